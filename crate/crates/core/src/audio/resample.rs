//! Rational-ratio windowed-sinc resampling.

/// Zero crossings of the sinc kept on each side of the centre tap.
const HALF_ZEROS: usize = 24;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k as f64 * k as f64);
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

/// Resample `x` from `from` Hz to `to` Hz with a Kaiser-windowed sinc low-pass.
///
/// The ratio is reduced to `up/down`; output sample `n` sits at input time
/// `n·down/up`, and its filter phase is `(n·down) mod up`, so one tap table
/// per phase is precomputed. Output length is `ceil(len·up/down)`.
pub fn resample(x: &[f32], from: u32, to: u32) -> Vec<f32> {
    if from == to || x.is_empty() {
        return x.to_vec();
    }
    let g = gcd(from as u64, to as u64);
    let up = (to as u64 / g) as usize;
    let down = (from as u64 / g) as usize;
    // Cutoff relative to the input Nyquist, with a little guard band.
    let cutoff = (to as f64 / from as f64).min(1.0) * 0.97;
    let half = (HALF_ZEROS as f64 / cutoff).ceil() as isize;
    let beta = 8.6;
    let i0b = bessel_i0(beta);

    let taps = (2 * half + 1) as usize;
    let table: Vec<Vec<f64>> = (0..up)
        .map(|phase| {
            let frac = phase as f64 / up as f64;
            (0..taps)
                .map(|j| {
                    // offset of input sample (base + j - half) from the output time
                    let d = (j as isize - half) as f64 - frac;
                    let r = d / (half as f64 + 1.0);
                    if r.abs() >= 1.0 {
                        return 0.0;
                    }
                    let w = bessel_i0(beta * (1.0 - r * r).sqrt()) / i0b;
                    let arg = std::f64::consts::PI * cutoff * d;
                    let sinc = if arg.abs() < 1e-12 { 1.0 } else { arg.sin() / arg };
                    cutoff * sinc * w
                })
                .collect()
        })
        .collect();

    let out_len = (x.len() * up).div_ceil(down);
    let n_in = x.len() as isize;
    (0..out_len)
        .map(|n| {
            let pos = n * down;
            let base = (pos / up) as isize;
            let h = &table[pos % up];
            let mut acc = 0.0;
            for (j, &w) in h.iter().enumerate() {
                let k = base + j as isize - half;
                if k >= 0 && k < n_in {
                    acc += w * x[k as usize] as f64;
                }
            }
            acc.clamp(-1.0, 1.0) as f32
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, rate: u32, secs: f64) -> Vec<f32> {
        let n = (rate as f64 * secs) as usize;
        (0..n)
            .map(|i| (0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin()) as f32)
            .collect()
    }

    #[test]
    fn one_second_at_48k_becomes_16000_samples() {
        assert_eq!(resample(&vec![0.0; 48_000], 48_000, 16_000).len(), 16_000);
        assert_eq!(resample(&vec![0.0; 44_100], 44_100, 16_000).len(), 16_000);
        assert_eq!(resample(&vec![0.0; 8_000], 8_000, 16_000).len(), 16_000);
    }

    #[test]
    fn in_band_tone_survives_downsampling() {
        let x = tone(440.0, 48_000, 0.5);
        let y = resample(&x, 48_000, 16_000);
        let expect = tone(440.0, 16_000, 0.5);
        // Ignore the filter's edge transients.
        let err = y[200..7800]
            .iter()
            .zip(&expect[200..7800])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err < 1e-3, "max error {err}");
    }

    #[test]
    fn out_of_band_tone_is_suppressed() {
        let x = tone(12_000.0, 48_000, 0.5);
        let y = resample(&x, 48_000, 16_000);
        let peak = y[200..7800].iter().map(|v| v.abs()).fold(0.0f32, f32::max);
        assert!(peak < 5e-3, "aliased peak {peak}");
    }
}
