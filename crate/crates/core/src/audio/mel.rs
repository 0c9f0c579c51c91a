use std::sync::OnceLock;

use nalgebra::DMatrix;

use super::stft::{num_frames, stft, Spectrum};
use super::{AudioSignal, F_MAX, F_MIN, MEL_FLOOR, N_FFT, N_MELS, SAMPLE_RATE};
use crate::autodiff::{Real, Tensor};
use crate::error::{MelleError, Result};

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters with unit peak, `n_mels × (n_fft/2 + 1)`.
#[derive(Debug)]
pub struct MelFilterbank {
    n_mels: usize,
    n_bins: usize,
    sample_rate: u32,
    n_fft: usize,
    /// `n_mels + 2` breakpoints in Hz; band `k` spans `[hz[k], hz[k+2]]` and peaks at `hz[k+1]`.
    hz_points: Vec<f64>,
    weights: Vec<f64>,
    pinv: OnceLock<Vec<f64>>,
}

impl MelFilterbank {
    pub fn build(n_mels: usize, n_fft: usize, sample_rate: u32, fmin: f64, fmax: f64) -> Result<Self> {
        let nyquist = sample_rate as f64 / 2.0;
        if n_mels == 0 || n_fft == 0 {
            return Err(MelleError::InvalidInput("n_mels and n_fft must be positive".into()));
        }
        if !(fmin >= 0.0 && fmin < fmax) {
            return Err(MelleError::InvalidInput(format!(
                "mel range requires 0 <= fmin < fmax, got {fmin}..{fmax}"
            )));
        }
        if fmax > nyquist {
            return Err(MelleError::InvalidInput(format!(
                "fmax {fmax} Hz exceeds the Nyquist frequency {nyquist} Hz"
            )));
        }
        let n_bins = n_fft / 2 + 1;
        let (mlo, mhi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let hz_points: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut weights = vec![0.0; n_mels * n_bins];
        for k in 0..n_mels {
            for b in 0..n_bins {
                let f = b as f64 * sample_rate as f64 / n_fft as f64;
                weights[k * n_bins + b] = triangle(&hz_points[k..k + 3], f);
            }
        }
        Ok(Self {
            n_mels,
            n_bins,
            sample_rate,
            n_fft,
            hz_points,
            weights,
            pinv: OnceLock::new(),
        })
    }

    /// The 80-band, 1024-point, 80–7600 Hz bank at 16 kHz, built once per process.
    pub fn standard() -> &'static MelFilterbank {
        static BANK: OnceLock<MelFilterbank> = OnceLock::new();
        BANK.get_or_init(|| {
            MelFilterbank::build(N_MELS, N_FFT, SAMPLE_RATE, F_MIN, F_MAX).expect("valid defaults")
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, band: usize, bin: usize) -> f64 {
        self.weights[band * self.n_bins + bin]
    }

    pub fn bin_hz(&self, bin: usize) -> f64 {
        bin as f64 * self.sample_rate as f64 / self.n_fft as f64
    }

    pub fn center_hz(&self, band: usize) -> f64 {
        self.hz_points[band + 1]
    }

    /// `(lower edge, upper edge)` of band `band` in Hz.
    pub fn band_edges(&self, band: usize) -> (f64, f64) {
        (self.hz_points[band], self.hz_points[band + 2])
    }

    /// Continuous triangle response of `band` at `hz`.
    pub fn response(&self, band: usize, hz: f64) -> f64 {
        triangle(&self.hz_points[band..band + 3], hz)
    }

    /// `weights · magnitudes` for one frame.
    pub fn project(&self, magnitudes: &[f64]) -> Vec<f64> {
        debug_assert_eq!(magnitudes.len(), self.n_bins);
        self.weights
            .chunks(self.n_bins)
            .map(|row| row.iter().zip(magnitudes).map(|(w, m)| w * m).sum())
            .collect()
    }

    /// Moore–Penrose pseudo-inverse, `n_bins × n_mels`, computed on first use.
    pub fn pseudo_inverse(&self) -> &[f64] {
        self.pinv.get_or_init(|| {
            let m = DMatrix::from_row_slice(self.n_mels, self.n_bins, &self.weights);
            let p = m.pseudo_inverse(1e-10).expect("SVD of the filterbank converges");
            let mut out = Vec::with_capacity(self.n_bins * self.n_mels);
            for i in 0..self.n_bins {
                for j in 0..self.n_mels {
                    out.push(p[(i, j)]);
                }
            }
            out
        })
    }

    /// Least-squares linear magnitudes for one frame of linear mel energies, clamped at 0.
    pub fn invert(&self, mel_energies: &[f64]) -> Vec<f64> {
        self.pseudo_inverse()
            .chunks(self.n_mels)
            .map(|row| row.iter().zip(mel_energies).map(|(w, e)| w * e).sum::<f64>().max(0.0))
            .collect()
    }
}

fn triangle(p: &[f64], f: f64) -> f64 {
    let (lo, c, hi) = (p[0], p[1], p[2]);
    let up = (f - lo) / (c - lo);
    let down = (hi - f) / (hi - c);
    up.min(down).max(0.0)
}

/// Log10 mel spectrogram, `frames × 80`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    n_frames: usize,
    data: Vec<f32>,
}

impl MelSpectrogram {
    pub fn new(n_frames: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n_frames * N_MELS {
            return Err(MelleError::shape(
                "MelSpectrogram",
                format!("{} values for {n_frames} frames of {N_MELS}", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(MelleError::Numeric {
                context: format!("mel frame {} band {}", i / N_MELS, i % N_MELS),
            });
        }
        Ok(Self { n_frames, data })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_mels(&self) -> usize {
        N_MELS
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * N_MELS..(t + 1) * N_MELS]
    }

    pub fn duration_secs(&self) -> f64 {
        self.n_frames as f64 / super::FRAME_RATE
    }

    /// Frames `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            n_frames: end - start,
            data: self.data[start * N_MELS..end * N_MELS].to_vec(),
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            &[self.n_frames, N_MELS],
            self.data.iter().map(|&v| T::c(v as f64)).collect(),
        )
        .expect("length checked at construction")
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        if t.shape().len() != 2 || t.cols() != N_MELS {
            return Err(MelleError::shape(
                "MelSpectrogram::from_tensor",
                format!("expected [T, {N_MELS}], got {:?}", t.shape()),
            ));
        }
        Self::new(t.rows(), t.data().iter().map(|v| v.f64() as f32).collect())
    }

    /// Mean absolute difference over the common frame range.
    pub fn mean_abs_diff(&self, other: &Self) -> f64 {
        let n = self.n_frames.min(other.n_frames) * N_MELS;
        if n == 0 {
            return 0.0;
        }
        self.data[..n]
            .iter()
            .zip(&other.data[..n])
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / n as f64
    }
}

pub(crate) fn log_mel_from_spectrum(spec: &Spectrum, bank: &MelFilterbank) -> Vec<f32> {
    let mags = spec.magnitudes();
    let mut out = Vec::with_capacity(spec.n_frames * bank.n_mels());
    for frame in mags.chunks(Spectrum::N_BINS) {
        for e in bank.project(frame) {
            out.push(e.max(MEL_FLOOR).log10() as f32);
        }
    }
    out
}

/// Log10 mel spectrogram of a 16 kHz signal.
pub fn extract_mel(signal: &AudioSignal) -> Result<MelSpectrogram> {
    if signal.sample_rate != SAMPLE_RATE {
        return Err(MelleError::InvalidInput(format!(
            "extract_mel expects {SAMPLE_RATE} Hz audio, got {} Hz",
            signal.sample_rate
        )));
    }
    if signal.samples.len() < N_FFT {
        return Err(MelleError::InvalidInput(format!(
            "signal has {} samples; at least {N_FFT} (64 ms) are needed for one frame",
            signal.samples.len()
        )));
    }
    let x: Vec<f64> = signal.samples.iter().map(|&s| s as f64).collect();
    let spec = stft(&x);
    debug_assert_eq!(spec.n_frames, num_frames(x.len()));
    let data = log_mel_from_spectrum(&spec, MelFilterbank::standard());
    MelSpectrogram::new(spec.n_frames, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, amp: f64, n: usize) -> AudioSignal {
        let s = (0..n)
            .map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin()) as f32)
            .collect();
        AudioSignal::new(s, SAMPLE_RATE)
    }

    #[test]
    fn default_bank_is_80_by_513() {
        let b = MelFilterbank::standard();
        assert_eq!((b.n_mels(), b.n_bins()), (80, 513));
        assert_eq!(b.weights().len(), 80 * 513);
    }

    #[test]
    fn centres_strictly_increase() {
        let b = MelFilterbank::standard();
        for k in 1..80 {
            assert!(b.center_hz(k) > b.center_hz(k - 1));
        }
        assert!((b.band_edges(0).0 - 80.0).abs() < 1e-9);
        assert!((b.band_edges(79).1 - 7600.0).abs() < 1e-6);
    }

    #[test]
    fn first_band_matches_hand_computed_triangle() {
        // mel(80) = 2595 log10(1 + 80/700), mel(7600) = 2595 log10(1 + 7600/700),
        // 82 equally spaced points; band 0 uses points 0, 1, 2.
        let m0 = 2595.0 * (1.0f64 + 80.0 / 700.0).log10();
        let m81 = 2595.0 * (1.0f64 + 7600.0 / 700.0).log10();
        let step = (m81 - m0) / 81.0;
        let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
        let (lo, c, hi) = (hz(m0), hz(m0 + step), hz(m0 + 2.0 * step));
        assert!((lo - 80.0).abs() < 1e-9);
        let b = MelFilterbank::standard();
        assert!((b.center_hz(0) - c).abs() < 1e-9);
        assert_eq!(b.response(0, c), 1.0);
        for bin in 0..513 {
            let f = bin as f64 * 16_000.0 / 1024.0;
            let expect = if f <= lo || f >= hi {
                0.0
            } else if f <= c {
                (f - lo) / (c - lo)
            } else {
                (hi - f) / (hi - c)
            };
            assert!((b.weight(0, bin) - expect).abs() < 1e-12, "bin {bin}");
        }
        // Bins 6 (93.75 Hz) and 7 (109.375 Hz) fall inside band 0.
        assert!(b.weight(0, 6) > 0.0 && b.weight(0, 7) > 0.0);
    }

    #[test]
    fn rows_nonempty_contiguous_and_columns_bounded() {
        let b = MelFilterbank::standard();
        for k in 0..80 {
            let nz: Vec<usize> = (0..513).filter(|&j| b.weight(k, j) > 0.0).collect();
            assert!(!nz.is_empty(), "band {k} empty");
            assert_eq!(nz.last().unwrap() - nz[0] + 1, nz.len(), "band {k} not contiguous");
            assert!((0..513).all(|j| b.weight(k, j) >= 0.0));
        }
        for j in 0..513 {
            let s: f64 = (0..80).map(|k| b.weight(k, j)).sum();
            assert!(s <= 1.0 + 1e-12, "bin {j} sums to {s}");
        }
    }

    #[test]
    fn fmax_above_nyquist_is_rejected() {
        assert!(MelFilterbank::build(80, 1024, 16_000, 80.0, 8001.0).is_err());
        assert!(MelFilterbank::build(80, 1024, 16_000, 900.0, 800.0).is_err());
    }

    #[test]
    fn silence_hits_the_floor_everywhere() {
        let m = extract_mel(&AudioSignal::new(vec![0.0; 16_000], SAMPLE_RATE)).unwrap();
        assert!(m.data().iter().all(|&v| v == (MEL_FLOOR.log10() as f32)));
        assert_eq!(m.n_frames(), 59);
    }

    #[test]
    fn two_seconds_gives_122_frames() {
        let m = extract_mel(&sine(300.0, 0.3, 32_000)).unwrap();
        assert_eq!(m.n_frames(), 122);
        assert_eq!(m.n_mels(), 80);
    }

    #[test]
    fn short_signal_is_rejected() {
        assert!(extract_mel(&AudioSignal::new(vec![0.1; 1023], SAMPLE_RATE)).is_err());
        assert!(extract_mel(&AudioSignal::new(vec![0.1; 2048], 22_050)).is_err());
    }

    #[test]
    fn scaling_by_ten_adds_one() {
        // 16-bit PCM steps, so the ×10 below is exact in f32.
        let mut quiet = sine(523.0, 0.05, 8_000);
        for v in &mut quiet.samples {
            *v = (*v * 32768.0).round() / 32768.0;
        }
        let loud = AudioSignal::new(quiet.samples.iter().map(|v| v * 10.0).collect(), SAMPLE_RATE);
        let a = extract_mel(&quiet).unwrap();
        let b = extract_mel(&loud).unwrap();
        let floor = MEL_FLOOR.log10() as f32;
        let mut checked = 0;
        for (x, y) in a.data().iter().zip(b.data()) {
            if *x > floor + 0.01 {
                assert!((y - x - 1.0).abs() < 1e-6, "{x} -> {y}");
                checked += 1;
            }
        }
        assert!(checked > 1000);
    }

    #[test]
    fn extraction_is_deterministic() {
        let s = sine(440.0, 0.7, 20_000);
        assert_eq!(extract_mel(&s).unwrap(), extract_mel(&s).unwrap());
    }
}
