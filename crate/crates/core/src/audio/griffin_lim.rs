use rustfft::num_complex::Complex64;

use super::mel::MelFilterbank;
use super::stft::{istft, stft, Spectrum};
use super::{AudioSignal, MelSpectrogram, SAMPLE_RATE};
use crate::autodiff::RngState;
use crate::error::{MelleError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GriffinLimOptions {
    pub iterations: usize,
    /// Seeds the initial random phase.
    pub seed: u64,
}

impl Default for GriffinLimOptions {
    fn default() -> Self {
        Self {
            iterations: 60,
            seed: 0,
        }
    }
}

pub fn griffin_lim(mel: &MelSpectrogram, iterations: usize) -> Result<AudioSignal> {
    griffin_lim_with(
        mel,
        GriffinLimOptions {
            iterations,
            ..Default::default()
        },
    )
}

/// Recover a waveform from a log10 mel spectrogram.
///
/// Linear magnitudes come from the clamped pseudo-inverse of the filterbank;
/// phase is refined by alternating projections between consistent STFTs and
/// the target magnitudes. Output has `(T-1)·256 + 1024` samples.
pub fn griffin_lim_with(mel: &MelSpectrogram, opts: GriffinLimOptions) -> Result<AudioSignal> {
    if opts.iterations == 0 {
        return Err(MelleError::InvalidInput("griffin_lim needs at least one iteration".into()));
    }
    if mel.n_frames() == 0 {
        return Err(MelleError::InvalidInput("griffin_lim on an empty mel spectrogram".into()));
    }
    let bank = MelFilterbank::standard();
    let nb = Spectrum::N_BINS;
    let mut mags = Vec::with_capacity(mel.n_frames() * nb);
    for t in 0..mel.n_frames() {
        let energies: Vec<f64> = mel.frame(t).iter().map(|&v| 10f64.powf(v as f64)).collect();
        mags.extend(bank.invert(&energies));
    }

    let mut rng = RngState::new(opts.seed);
    let phases = rng.uniforms(mags.len());
    let mut spec = Spectrum {
        n_frames: mel.n_frames(),
        bins: mags
            .iter()
            .zip(&phases)
            .map(|(&m, &u)| Complex64::from_polar(m, 2.0 * std::f64::consts::PI * u))
            .collect(),
    };
    let mut signal = istft(&spec);
    for _ in 1..opts.iterations {
        let rebuilt = stft(&signal);
        for ((b, r), &m) in spec.bins.iter_mut().zip(&rebuilt.bins).zip(&mags) {
            let n = r.norm();
            *b = if n > 1e-12 { r * (m / n) } else { Complex64::new(m, 0.0) };
        }
        signal = istft(&spec);
    }
    let samples = signal.iter().map(|&v| v.clamp(-1.0, 1.0) as f32).collect();
    Ok(AudioSignal::new(samples, SAMPLE_RATE))
}
