//! Deterministic synthetic "speech-like" audio for tests, demos and toy training.
//!
//! A short lead-in of near-silence, a run of voiced syllables (harmonic
//! series on a gliding f0, shaped by three Gaussian formant bumps, with
//! raised-cosine onsets and offsets, separated by short pauses) and a tail of
//! near-silence. Nothing here models real speech; it only provides
//! spectro-temporal structure with a clear end.

use std::f64::consts::PI;

use crate::audio::{AudioSignal, SAMPLE_RATE};
use crate::autodiff::RngState;

/// Transcript paired with [`fixture_audio`].
pub const FIXTURE_TRANSCRIPT: &str = "a small synthetic voice says hello";

const LEAD_SECS: f64 = 0.12;
const PAUSE_SECS: f64 = 0.05;
const NOISE_FLOOR: f64 = 1e-3;

/// `duration_secs` of speech-like audio at 16 kHz, fully determined by `seed`.
pub fn speech_like(seed: u64, duration_secs: f64) -> AudioSignal {
    let n = (duration_secs * SAMPLE_RATE as f64).round() as usize;
    let sr = SAMPLE_RATE as f64;
    let rng = RngState::new(seed);
    let mut out: Vec<f64> = rng
        .split_named("floor")
        .normals(n)
        .into_iter()
        .map(|v| v * NOISE_FLOOR)
        .collect();

    let voiced_end = duration_secs - LEAD_SECS;
    let mut t0 = LEAD_SECS;
    let mut syl = 0u64;
    while t0 < voiced_end - 0.1 {
        let mut r = rng.split(syl);
        let u = r.uniforms(8);
        let len = (0.16 + 0.14 * u[0]).min(voiced_end - t0);
        let f0_start = 110.0 + 70.0 * u[1];
        let f0_end = f0_start * (0.85 + 0.3 * u[2]);
        let formants = [
            (350.0 + 500.0 * u[3], 90.0),
            (900.0 + 1400.0 * u[4], 140.0),
            (2300.0 + 900.0 * u[5], 220.0),
        ];
        let gain = 0.15 + 0.15 * u[6];
        let (start, count) = ((t0 * sr) as usize, (len * sr) as usize);
        let ramp = (0.02 * sr) as usize;
        let mut phase = 0.0f64;
        for i in 0..count.min(n.saturating_sub(start)) {
            let frac = i as f64 / count as f64;
            let f0 = f0_start + (f0_end - f0_start) * frac;
            phase += 2.0 * PI * f0 / sr;
            let env = if i < ramp {
                0.5 - 0.5 * (PI * i as f64 / ramp as f64).cos()
            } else if count - i < ramp {
                0.5 - 0.5 * (PI * (count - i) as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            let mut s = 0.0;
            let mut h = 1.0;
            while h * f0 < 4000.0 {
                let f = h * f0;
                let amp: f64 = formants
                    .iter()
                    .map(|&(fc, bw)| (-0.5 * ((f - fc) / bw).powi(2)).exp())
                    .sum::<f64>()
                    + 0.02;
                s += amp * (h * phase).sin() / h.sqrt();
                h += 1.0;
            }
            out[start + i] += gain * env * s;
        }
        t0 += len + PAUSE_SECS * (0.5 + u[7]);
        syl += 1;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.9 { 0.9 / peak } else { 1.0 };
    AudioSignal::new(out.into_iter().map(|v| (v * scale) as f32).collect(), SAMPLE_RATE)
}

/// The standard ~2 s fixture utterance.
pub fn fixture_audio() -> AudioSignal {
    speech_like(20240607, 2.0)
}
