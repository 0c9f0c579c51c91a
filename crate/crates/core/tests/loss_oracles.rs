use melle_core::autodiff::{Graph, Tensor};
use melle_core::losses::{eval, total_loss, LossWeights, Norm, STOP_POS_WEIGHT};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

fn random(rng: &mut ChaCha20Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

/// `E_{z~q}[log q(z) − log p(z)]` with `q = N(μ, σ²)`, `p = N(y, I)`, by plain sampling.
fn kl_monte_carlo(mu: &[f64], logvar: &[f64], y: &[f64], samples: usize, rng: &mut ChaCha20Rng) -> f64 {
    let mut acc = 0.0;
    for _ in 0..samples {
        let mut log_ratio = 0.0;
        for i in 0..mu.len() {
            let sigma = (0.5 * logvar[i]).exp();
            let eps: f64 = StandardNormal.sample(rng);
            let z = mu[i] + sigma * eps;
            // log N(z; μ, σ²) − log N(z; y, 1); the 2π terms cancel
            log_ratio += -0.5 * eps * eps - 0.5 * logvar[i] + 0.5 * (z - y[i]).powi(2);
        }
        acc += log_ratio;
    }
    acc / samples as f64
}

#[test]
fn kl_closed_form_agrees_with_monte_carlo() {
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d = 16;
        let mu = random(&mut rng, 1, d, -2.0, 2.0);
        let logvar = random(&mut rng, 1, d, -1.0, 1.0);
        let y = random(&mut rng, 1, d, -2.0, 2.0);
        let closed = eval::kl(&mu, &logvar, &y, Norm::Raw).unwrap();
        let mc = kl_monte_carlo(mu.data(), logvar.data(), y.data(), 100_000, &mut rng);
        worst = worst.max((closed - mc).abs() / closed.abs());
    }
    assert!(worst < 0.01, "worst relative gap {worst}");
}

#[test]
fn kl_is_nonnegative() {
    let mut rng = ChaCha20Rng::seed_from_u64(12);
    for i in 0..1000 {
        let (t, d) = (rng.random_range(1..4), rng.random_range(1..20));
        let scale = if i % 2 == 0 { 1.0 } else { 8.0 };
        let mu = random(&mut rng, t, d, -scale, scale);
        let logvar = random(&mut rng, t, d, -12.0, 6.0);
        let y = random(&mut rng, t, d, -scale, scale);
        let kl = eval::kl(&mu, &logvar, &y, Norm::Raw).unwrap();
        assert!(kl >= 0.0, "instance {i}: {kl}");
    }
}

#[test]
fn regression_matches_elementwise_reference() {
    let mut rng = ChaCha20Rng::seed_from_u64(13);
    let y = random(&mut rng, 3, 80, -5.0, 1.0);
    let y1 = random(&mut rng, 3, 80, -5.0, 1.0);
    let y2 = random(&mut rng, 3, 80, -5.0, 1.0);
    let mut expect = 0.0;
    for i in 0..240 {
        for p in [y1.data()[i], y2.data()[i]] {
            let e = y.data()[i] - p;
            expect += e.abs() + e * e;
        }
    }
    let got = eval::regression(&y, &y1, &y2, Norm::Raw).unwrap();
    assert!((got - expect).abs() <= 1e-9 * expect, "{got} vs {expect}");
    let mean = eval::regression(&y, &y1, &y2, Norm::Mean(240.0)).unwrap();
    assert!((mean - expect / 240.0).abs() < 1e-9);
}

#[test]
fn stop_matches_elementwise_reference() {
    let mut rng = ChaCha20Rng::seed_from_u64(14);
    let n = 17;
    let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-6.0..6.0)).collect();
    let mut targets = vec![0.0; n];
    targets[n - 1] = 1.0;
    let mut expect = 0.0;
    for (&x, &t) in logits.iter().zip(&targets) {
        let p = 1.0 / (1.0 + (-x).exp());
        expect -= STOP_POS_WEIGHT * t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    let got = eval::stop(&logits, &targets, STOP_POS_WEIGHT, Norm::Raw).unwrap();
    assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    let perfect: Vec<f64> = targets.iter().map(|&t| if t > 0.5 { 20.0 } else { -20.0 }).collect();
    // saturated logits leave ln(1 + e^-20) ≈ 2.1e-9 per unit of weight
    let sat = eval::stop(&perfect, &targets, STOP_POS_WEIGHT, Norm::Raw).unwrap();
    let total_weight = STOP_POS_WEIGHT + (n - 1) as f64;
    assert!((sat - total_weight * (-20f64).exp().ln_1p()).abs() < 1e-15);
    assert!(sat / total_weight < 1e-8);
}

#[test]
fn flux_is_zero_exactly_when_mean_tracks_previous_frame() {
    let mut rng = ChaCha20Rng::seed_from_u64(15);
    for _ in 0..50 {
        let t = rng.random_range(2..6);
        let y = random(&mut rng, t, 80, -3.0, 1.0);
        let mut mu = random(&mut rng, t, 80, -3.0, 1.0);
        for r in 1..t {
            let prev = y.row(r - 1).to_vec();
            mu.data_mut()[r * 80..(r + 1) * 80].copy_from_slice(&prev);
        }
        assert_eq!(eval::flux(&mu, &y, Norm::Raw).unwrap(), 0.0);

        let (r, i) = (rng.random_range(1..t), rng.random_range(0..80));
        mu.data_mut()[r * 80 + i] += rng.random_range(0.01..1.0);
        let off = eval::flux(&mu, &y, Norm::Raw).unwrap();
        assert!(off < 0.0);
        // pushing that element further away makes it strictly more negative
        let e = mu.data()[r * 80 + i] - y.at(r - 1, i);
        mu.data_mut()[r * 80 + i] += 0.5 * e.signum();
        assert!(eval::flux(&mu, &y, Norm::Raw).unwrap() < off);
    }
}

#[test]
fn total_is_the_weighted_sum_on_random_inputs() {
    let mut rng = ChaCha20Rng::seed_from_u64(16);
    for _ in 0..100 {
        let parts: Vec<f64> = (0..4).map(|_| rng.random_range(-10.0..10.0)).collect();
        let w = LossWeights {
            lambda: rng.random_range(0.0..1.0),
            beta: rng.random_range(0.0..1.0),
            gamma: rng.random_range(0.0..2.0),
        };
        let mut g = Graph::<f64>::new();
        let v: Vec<_> = parts.iter().map(|&p| g.constant(Tensor::scalar(p))).collect();
        let lv = total_loss(&mut g, v[0], v[1], v[2], v[3], w);
        let b = lv.breakdown(&g, w);
        let expect = parts[0] + w.lambda * parts[1] + w.beta * parts[2] + w.gamma * parts[3];
        assert!((b.total - expect).abs() < 1e-6);
    }
}
