//! Write a few synthetic speech-like WAVs plus a manifest.
//!
//!     cargo run --example fixture_corpus -- <out_dir> [count]

use std::path::PathBuf;

use melle_core::audio::save_wav;
use melle_core::fixture::{fixture_audio, speech_like, FIXTURE_TRANSCRIPT};

const LINES: [&str; 4] = [
    "the quick brown fox",
    "jumps over the lazy dog",
    "numbers like 42 are fine",
    "it's a small test",
];

fn main() -> melle_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "fixture".into()));
    let count: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    std::fs::create_dir_all(&out).map_err(|e| melle_core::MelleError::io(&out, e))?;

    let mut manifest = String::new();
    save_wav(out.join("utt000.wav"), &fixture_audio())?;
    manifest.push_str(&format!("utt000.wav\t{FIXTURE_TRANSCRIPT}\n"));
    for i in 1..count {
        let name = format!("utt{i:03}.wav");
        save_wav(out.join(&name), &speech_like(i as u64, 1.5 + 0.25 * (i % 4) as f64))?;
        manifest.push_str(&format!("{name}\t{}\n", LINES[i % LINES.len()]));
    }
    let p = out.join("manifest.tsv");
    std::fs::write(&p, manifest).map_err(|e| melle_core::MelleError::io(&p, e))?;
    println!("{}", p.display());
    Ok(())
}
