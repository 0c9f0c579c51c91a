//! MELF: little-endian binary mel features.
//!
//! ```text
//! b"MELF" | u32 version = 1 | u32 frames | u32 n_mels = 80 | f32 × frames·80 (row-major)
//! ```

use std::path::Path;

use super::{MelSpectrogram, N_MELS};
use crate::error::{MelleError, Result};

pub const MELF_MAGIC: &[u8; 4] = b"MELF";
pub const MELF_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode_melf(mel: &MelSpectrogram) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + mel.data().len() * 4);
    out.extend_from_slice(MELF_MAGIC);
    out.extend_from_slice(&MELF_VERSION.to_le_bytes());
    out.extend_from_slice(&(mel.n_frames() as u32).to_le_bytes());
    out.extend_from_slice(&(N_MELS as u32).to_le_bytes());
    for v in mel.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_melf(bytes: &[u8]) -> Result<MelSpectrogram> {
    if bytes.len() < HEADER_LEN {
        return Err(MelleError::Format("MELF: truncated header".into()));
    }
    if &bytes[0..4] != MELF_MAGIC {
        return Err(MelleError::Format("MELF: bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let (version, frames, n_mels) = (word(4), word(8) as usize, word(12) as usize);
    if version != MELF_VERSION {
        return Err(MelleError::Format(format!("MELF: unsupported version {version}")));
    }
    if n_mels != N_MELS {
        return Err(MelleError::Format(format!("MELF: expected {N_MELS} mels, found {n_mels}")));
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() != frames * n_mels * 4 {
        return Err(MelleError::Format(format!(
            "MELF: {} payload bytes for {frames} frames",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    MelSpectrogram::new(frames, data)
}

pub fn write_melf(path: impl AsRef<Path>, mel: &MelSpectrogram) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_melf(mel)).map_err(|e| MelleError::io(path, e))
}

pub fn read_melf(path: impl AsRef<Path>) -> Result<MelSpectrogram> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| MelleError::io(path, e))?;
    decode_melf(&bytes)
}
