//! Audio ingestion, log-mel feature extraction and Griffin-Lim reconstruction.
//!
//! Feature protocol: 16 kHz input, 1024-point STFT with a periodic Hann
//! window of length 1024 and hop 256, no centre padding, magnitude spectra
//! projected onto 80 triangular mel bands spanning 80–7600 Hz (HTK mel
//! scale, unit peak), clamped at `1e-5` and mapped through `log10`.
//! A signal of `N` samples yields `floor((N - 1024) / 256) + 1` frames,
//! i.e. 62.5 frames per second.

mod griffin_lim;
mod mel;
mod melf;
mod resample;
mod stft;
mod wav;

pub use griffin_lim::{griffin_lim, griffin_lim_with, GriffinLimOptions};
pub use mel::{extract_mel, hz_to_mel, mel_to_hz, MelFilterbank, MelSpectrogram};
pub use melf::{decode_melf, encode_melf, read_melf, write_melf, MELF_MAGIC, MELF_VERSION};
pub use resample::resample;
pub use stft::{hann_window, istft, num_frames, stft, Spectrum};
pub use wav::{encode_wav, load_wav, save_wav};

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_FFT: usize = 1024;
pub const WIN_LENGTH: usize = 1024;
pub const HOP_LENGTH: usize = 256;
pub const N_MELS: usize = 80;
pub const F_MIN: f64 = 80.0;
pub const F_MAX: f64 = 7600.0;
/// Linear mel energies are clamped here before `log10`; entries are ≥ -5.
pub const MEL_FLOOR: f64 = 1e-5;
pub const FRAME_RATE: f64 = SAMPLE_RATE as f64 / HOP_LENGTH as f64;

/// Mono waveform with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let s: f64 = self.samples.iter().map(|&x| (x as f64).powi(2)).sum();
        (s / self.samples.len() as f64).sqrt()
    }
}
