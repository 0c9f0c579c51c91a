//! Training manifests: one `<wav-or-melf path>\t<transcript>` line per utterance.

use std::path::{Path, PathBuf};

use super::Utterance;
use crate::audio::{decode_melf, extract_mel, load_wav, MelSpectrogram};
use crate::error::{MelleError, Result};
use crate::tokenizer::Vocab;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// 1-based line number in the manifest.
    pub line: usize,
    pub path: PathBuf,
    pub transcript: String,
}

/// Parse manifest text; relative paths resolve against `base_dir`. Blank lines are skipped.
pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (path, transcript) = line
            .split_once('\t')
            .ok_or_else(|| MelleError::Format(format!("manifest line {}: expected `path<TAB>transcript`", i + 1)))?;
        if path.is_empty() {
            return Err(MelleError::Format(format!("manifest line {}: empty path", i + 1)));
        }
        let p = Path::new(path);
        out.push(ManifestEntry {
            line: i + 1,
            path: if p.is_absolute() { p.to_path_buf() } else { base_dir.join(p) },
            transcript: transcript.to_string(),
        });
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| MelleError::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Load features for one entry: MELF files are read directly (detected by
/// magic), anything else is decoded as WAV and analysed.
pub fn load_features(path: &Path) -> Result<MelSpectrogram> {
    let bytes = std::fs::read(path).map_err(|e| MelleError::io(path, e))?;
    if bytes.starts_with(b"MELF") {
        return decode_melf(&bytes);
    }
    extract_mel(&load_wav(path)?)
}

pub fn load_utterances(entries: &[ManifestEntry], vocab: &Vocab) -> Result<Vec<Utterance>> {
    entries
        .iter()
        .map(|e| {
            Ok(Utterance {
                id: e.path.display().to_string(),
                tokens: vocab.encode(&e.transcript),
                mel: load_features(&e.path)?,
            })
        })
        .collect()
}
