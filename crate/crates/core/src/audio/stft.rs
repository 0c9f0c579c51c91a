use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{HOP_LENGTH, N_FFT};

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Frame count without centre padding: `floor((N - n_fft) / hop) + 1`, or 0 if `N < n_fft`.
pub fn num_frames(n_samples: usize) -> usize {
    if n_samples < N_FFT {
        0
    } else {
        (n_samples - N_FFT) / HOP_LENGTH + 1
    }
}

/// Complex one-sided spectra, `frames × (n_fft/2 + 1)`.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub n_frames: usize,
    pub bins: Vec<Complex64>,
}

impl Spectrum {
    pub const N_BINS: usize = N_FFT / 2 + 1;

    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.bins[t * Self::N_BINS..(t + 1) * Self::N_BINS]
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.bins.iter().map(|c| c.norm()).collect()
    }
}

fn plans() -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    let mut planner = FftPlanner::new();
    (planner.plan_fft_forward(N_FFT), planner.plan_fft_inverse(N_FFT))
}

pub fn stft(x: &[f64]) -> Spectrum {
    let n_frames = num_frames(x.len());
    let window = hann_window(N_FFT);
    let (fwd, _) = plans();
    let mut bins = Vec::with_capacity(n_frames * Spectrum::N_BINS);
    let mut buf = vec![Complex64::new(0.0, 0.0); N_FFT];
    for t in 0..n_frames {
        let start = t * HOP_LENGTH;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(x[start + i] * window[i], 0.0);
        }
        fwd.process(&mut buf);
        bins.extend_from_slice(&buf[..Spectrum::N_BINS]);
    }
    Spectrum { n_frames, bins }
}

/// Weighted overlap-add inverse of [`stft`]; output has `(T-1)·hop + n_fft` samples.
///
/// Samples are divided by the summed squared window, floored at 1e-3 of its
/// maximum so the sparsely covered edges stay bounded.
pub fn istft(spec: &Spectrum) -> Vec<f64> {
    if spec.n_frames == 0 {
        return Vec::new();
    }
    let window = hann_window(N_FFT);
    let (_, inv) = plans();
    let len = (spec.n_frames - 1) * HOP_LENGTH + N_FFT;
    let mut out = vec![0.0; len];
    let mut wsum = vec![0.0; len];
    let mut buf = vec![Complex64::new(0.0, 0.0); N_FFT];
    for t in 0..spec.n_frames {
        let half = spec.frame(t);
        buf[..Spectrum::N_BINS].copy_from_slice(half);
        // Hermitian completion; DC and Nyquist imaginary parts are dropped by taking re().
        for k in 1..N_FFT / 2 {
            buf[N_FFT - k] = half[k].conj();
        }
        inv.process(&mut buf);
        let start = t * HOP_LENGTH;
        for i in 0..N_FFT {
            out[start + i] += buf[i].re / N_FFT as f64 * window[i];
            wsum[start + i] += window[i] * window[i];
        }
    }
    let floor = wsum.iter().cloned().fold(0.0, f64::max) * 1e-3;
    for (o, w) in out.iter_mut().zip(&wsum) {
        *o /= w.max(floor);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_convention() {
        assert_eq!(num_frames(1023), 0);
        assert_eq!(num_frames(1024), 1);
        assert_eq!(num_frames(1024 + 255), 1);
        assert_eq!(num_frames(1024 + 256), 2);
        // 2 s: floor((32000 - 1024) / 256) + 1 = floor(121) + 1 = 122
        assert_eq!(num_frames(32_000), 122);
    }

    #[test]
    fn istft_inverts_stft_in_the_interior() {
        let x: Vec<f64> = (0..8192)
            .map(|i| ((i as f64) * 0.013).sin() + 0.3 * ((i as f64) * 0.31).cos())
            .collect();
        let y = istft(&stft(&x));
        assert_eq!(y.len(), (num_frames(x.len()) - 1) * HOP_LENGTH + N_FFT);
        let err = (N_FFT..y.len() - N_FFT)
            .map(|i| (x[i] - y[i]).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "max interior error {err}");
    }
}
