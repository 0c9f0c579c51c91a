//! `MCKP` checkpoint container.
//!
//! ```text
//! "MCKP" | u32 version | u32 len | model config (key=value text) | u64 step
//! u32 n_params | n × (u32 name_len | name | u32 rank | u32 dims… | f32 data…)
//! u64 optimizer step | n × (f32 m… | f32 v…)
//! ```
//! All integers and floats little-endian; parameters in sorted name order.

use std::path::Path;

use crate::autodiff::{AdamWState, Moments, Tensor};
use crate::error::{MelleError, Result};
use crate::model::{Model, ModelConfig, ParamStore};

const MAGIC: &[u8; 4] = b"MCKP";
const VERSION: u32 = 1;

/// Everything needed to continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optimizer: AdamWState<f32>,
    /// Completed optimizer steps.
    pub step: u64,
}

impl Checkpoint {
    /// Fails unless the stored model configuration equals `expected`.
    pub fn expect_config(&self, expected: &ModelConfig) -> Result<()> {
        if &self.model.config == expected {
            return Ok(());
        }
        let diffs: Vec<String> = self
            .model
            .config
            .to_pairs()
            .into_iter()
            .zip(expected.to_pairs())
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, b)| format!("{}: checkpoint {} vs requested {}", a.0, a.1, b.1))
            .collect();
        Err(MelleError::CheckpointMismatch(diffs.join(", ")))
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let cfg = ckpt.model.config.to_text();
    put_u32(&mut out, cfg.len() as u32);
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&ckpt.step.to_le_bytes());
    put_u32(&mut out, ckpt.model.params.len() as u32);
    for (name, t) in ckpt.model.params.iter() {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            put_u32(&mut out, d as u32);
        }
        put_f32s(&mut out, t.data());
    }
    out.extend_from_slice(&ckpt.optimizer.step.to_le_bytes());
    for m in &ckpt.optimizer.moments {
        put_f32s(&mut out, m.m.data());
        put_f32s(&mut out, m.v.data());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            MelleError::Format(format!("checkpoint truncated at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| MelleError::Format("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(MelleError::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(MelleError::CheckpointMismatch(format!(
            "checkpoint version {version}, expected {VERSION}"
        )));
    }
    let cfg_len = r.u32()? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| MelleError::Format("checkpoint config is not UTF-8".into()))?;
    let config = ModelConfig::from_text(cfg_text)?;
    let step = r.u64()?;

    // Names and shapes must be exactly those the configuration produces.
    let expected: ParamStore<f32> = ParamStore::init(&config);
    let n = r.u32()? as usize;
    if n != expected.len() {
        return Err(MelleError::CheckpointMismatch(format!(
            "{n} parameter tensors stored, configuration defines {}",
            expected.len()
        )));
    }
    let mut params = ParamStore::default();
    for (want_name, want) in expected.iter() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| MelleError::Format("parameter name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if name != want_name || shape != want.shape() {
            return Err(MelleError::CheckpointMismatch(format!(
                "found {name} {shape:?}, expected {want_name} {:?}",
                want.shape()
            )));
        }
        let data = r.f32s(want.len())?;
        params.insert(name, Tensor::new(&shape, data)?);
    }
    let opt_step = r.u64()?;
    let mut moments = Vec::with_capacity(n);
    for (_, p) in params.iter() {
        let m = Tensor::new(p.shape(), r.f32s(p.len())?)?;
        let v = Tensor::new(p.shape(), r.f32s(p.len())?)?;
        moments.push(Moments { m, v });
    }
    if r.pos != bytes.len() {
        return Err(MelleError::Format(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        model: Model { config, params },
        optimizer: AdamWState {
            step: opt_step,
            moments,
        },
        step,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(ckpt)).map_err(|e| MelleError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| MelleError::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt() -> Checkpoint {
        let model: Model<f32> = Model::new(ModelConfig::tiny(7)).unwrap();
        let mut optimizer = AdamWState::new(model.params.iter().map(|(_, t)| t));
        optimizer.step = 3;
        optimizer.moments[0].m.data_mut()[0] = 0.25;
        Checkpoint {
            model,
            optimizer,
            step: 3,
        }
    }

    #[test]
    fn round_trip_and_byte_stable() {
        let c = ckpt();
        let bytes = encode_checkpoint(&c);
        assert_eq!(&bytes[..4], b"MCKP");
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn config_mismatch_is_reported() {
        let c = ckpt();
        let mut other = c.model.config.clone();
        other.d_model = 32;
        let err = c.expect_config(&other).unwrap_err();
        assert!(matches!(err, MelleError::CheckpointMismatch(ref s) if s.contains("d_model")));
        c.expect_config(&c.model.config).unwrap();
    }

    #[test]
    fn corruption_is_rejected() {
        let bytes = encode_checkpoint(&ckpt());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(MelleError::CheckpointMismatch(_))));
        let mut long = bytes;
        long.push(0);
        assert!(decode_checkpoint(&long).is_err());
    }
}
