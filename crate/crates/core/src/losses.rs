//! Training objective: regression, KL, spectrogram flux and stop losses.
//!
//! ```text
//! L      = L_reg + λ·L_kl + β·L_flux + γ·L_stop
//! L_reg  = ‖y − y′‖₁ + ‖y − y′‖₂² + ‖y − y″‖₁ + ‖y − y″‖₂²
//! L_kl   = ½ Σ_t ( ‖σ_t‖² + ‖μ_t − y_t‖² − d − Σ_i log σ_t²[i] )     prior N(y_t, I)
//! L_flux = −Σ_{t≥1} ‖μ_t − y_{t−1}‖₁
//! L_stop = Σ_t  w·s_t·softplus(−x_t) + (1 − s_t)·softplus(x_t)        w = 100
//! ```
//!
//! Each function takes a [`Norm`]: `Raw` gives the sums above, `Mean(n)`
//! divides by `n` (frames·80 for the spectral terms, decoding steps for the
//! stop term). Optional element masks zero out padded frame slots.

use std::sync::Arc;

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{MelleError, Result};

pub const STOP_POS_WEIGHT: f64 = 100.0;
pub const DEFAULT_BETA: f64 = 0.5;
pub const DEFAULT_GAMMA: f64 = 1.0;
pub const KL_LAMBDA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Norm {
    Raw,
    Mean(f64),
}

impl Norm {
    fn apply<T: Real>(self, g: &mut Graph<T>, v: Var) -> Var {
        match self {
            Norm::Raw => v,
            Norm::Mean(n) => g.scale(v, T::c(1.0 / n)),
        }
    }
}

fn masked<T: Real>(g: &mut Graph<T>, x: Var, mask: Option<&Arc<Vec<T>>>) -> Var {
    match mask {
        Some(m) => g.mul_const(x, m.clone()),
        None => x,
    }
}

/// L1 + squared L2 of `y − y′` and `y − y″`.
pub fn regression_loss<T: Real>(
    g: &mut Graph<T>,
    y: Var,
    y_prime: Var,
    y_double_prime: Var,
    mask: Option<&Arc<Vec<T>>>,
    norm: Norm,
) -> Var {
    let mut terms = Vec::with_capacity(4);
    for pred in [y_prime, y_double_prime] {
        let d = g.sub(y, pred);
        let d = masked(g, d, mask);
        let a = g.abs(d);
        terms.push(g.sum(a));
        let s = g.square(d);
        terms.push(g.sum(s));
    }
    let l1 = g.add(terms[0], terms[1]);
    let l2 = g.add(terms[2], terms[3]);
    let total = g.add(l1, l2);
    norm.apply(g, total)
}

/// Closed-form `KL(N(μ, diag σ²) ‖ N(y, I))` summed over steps and dimensions.
pub fn kl_loss<T: Real>(
    g: &mut Graph<T>,
    mu: Var,
    logvar: Var,
    y: Var,
    mask: Option<&Arc<Vec<T>>>,
    norm: Norm,
) -> Var {
    let var = g.exp(logvar);
    let d = g.sub(mu, y);
    let d2 = g.square(d);
    let a = g.add(var, d2);
    let a = g.sub(a, logvar);
    let a = g.add_scalar(a, -T::one());
    let a = masked(g, a, mask);
    let s = g.sum(a);
    let s = g.scale(s, T::c(0.5));
    norm.apply(g, s)
}

/// `−Σ_{t=1}^{T−1} ‖μ_t − y_{t−1}‖₁` over frame-level rows (`T × 80`).
///
/// `mask` covers rows `1..T` of `mu` (length `(T−1)·80`). Returns a zero
/// constant when `T < 2`.
pub fn flux_loss<T: Real>(
    g: &mut Graph<T>,
    mu: Var,
    y: Var,
    mask: Option<&Arc<Vec<T>>>,
    norm: Norm,
) -> Var {
    let t = g.value(mu).rows();
    if t < 2 {
        return g.constant(Tensor::scalar(T::zero()));
    }
    let cur = g.slice_rows(mu, 1, t);
    let prev = g.slice_rows(y, 0, t - 1);
    let d = g.sub(cur, prev);
    let d = masked(g, d, mask);
    let a = g.abs(d);
    let s = g.sum(a);
    let s = g.scale(s, -T::one());
    norm.apply(g, s)
}

/// Weighted binary cross-entropy on logits; `targets` are 0/1 per step.
pub fn stop_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[T],
    pos_weight: f64,
    norm: Norm,
) -> Var {
    let w = T::c(pos_weight);
    let pos: Vec<T> = targets.iter().map(|&s| w * s).collect();
    let neg: Vec<T> = targets.iter().map(|&s| T::one() - s).collect();
    let neg_logits = g.scale(logits, -T::one());
    let sp_pos = g.softplus(neg_logits);
    let sp_neg = g.softplus(logits);
    let a = g.mul_const(sp_pos, Arc::new(pos));
    let b = g.mul_const(sp_neg, Arc::new(neg));
    let l = g.add(a, b);
    let s = g.sum(l);
    norm.apply(g, s)
}

/// `(λ, β, γ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: KL_LAMBDA,
            beta: DEFAULT_BETA,
            gamma: DEFAULT_GAMMA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub reg: f64,
    pub kl: f64,
    pub flux: f64,
    pub stop: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn combine(reg: f64, kl: f64, flux: f64, stop: f64, weights: LossWeights) -> Self {
        Self {
            reg,
            kl,
            flux,
            stop,
            total: reg + weights.lambda * kl + weights.beta * flux + weights.gamma * stop,
            weights,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.reg, self.kl, self.flux, self.stop, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Graph handles for the four terms and the weighted total.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub reg: Var,
    pub kl: Var,
    pub flux: Var,
    pub stop: Var,
    pub total: Var,
}

pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    reg: Var,
    kl: Var,
    flux: Var,
    stop: Var,
    weights: LossWeights,
) -> LossVars {
    let mut total = reg;
    for (v, w) in [(kl, weights.lambda), (flux, weights.beta), (stop, weights.gamma)] {
        if w != 0.0 {
            let s = g.scale(v, T::c(w));
            total = g.add(total, s);
        }
    }
    LossVars {
        reg,
        kl,
        flux,
        stop,
        total,
    }
}

impl LossVars {
    pub fn breakdown<T: Real>(&self, g: &Graph<T>, weights: LossWeights) -> LossBreakdown {
        let v = |x: Var| g.value(x).item().f64();
        LossBreakdown {
            reg: v(self.reg),
            kl: v(self.kl),
            flux: v(self.flux),
            stop: v(self.stop),
            total: v(self.total),
            weights,
        }
    }
}

/// Plain-tensor evaluation of each term, with shape validation.
pub mod eval {
    use super::*;

    fn same(op: &'static str, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(MelleError::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok(())
    }

    pub fn regression(y: &Tensor<f64>, y1: &Tensor<f64>, y2: &Tensor<f64>, norm: Norm) -> Result<f64> {
        same("regression_loss", y, y1)?;
        same("regression_loss", y, y2)?;
        let mut g = Graph::new();
        let (a, b, c) = (g.constant(y.clone()), g.constant(y1.clone()), g.constant(y2.clone()));
        let l = regression_loss(&mut g, a, b, c, None, norm);
        Ok(g.value(l).item())
    }

    pub fn kl(mu: &Tensor<f64>, logvar: &Tensor<f64>, y: &Tensor<f64>, norm: Norm) -> Result<f64> {
        same("kl_loss", mu, logvar)?;
        same("kl_loss", mu, y)?;
        let mut g = Graph::new();
        let (a, b, c) = (g.constant(mu.clone()), g.constant(logvar.clone()), g.constant(y.clone()));
        let l = kl_loss(&mut g, a, b, c, None, norm);
        Ok(g.value(l).item())
    }

    pub fn flux(mu: &Tensor<f64>, y: &Tensor<f64>, norm: Norm) -> Result<f64> {
        same("flux_loss", mu, y)?;
        let mut g = Graph::new();
        let (a, b) = (g.constant(mu.clone()), g.constant(y.clone()));
        let l = flux_loss(&mut g, a, b, None, norm);
        Ok(g.value(l).item())
    }

    pub fn stop(logits: &[f64], targets: &[f64], pos_weight: f64, norm: Norm) -> Result<f64> {
        if logits.len() != targets.len() {
            return Err(MelleError::shape(
                "stop_loss",
                format!("{} logits vs {} targets", logits.len(), targets.len()),
            ));
        }
        if !targets.contains(&1.0) {
            return Err(MelleError::InvalidInput("stop targets contain no positive step".into()));
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[logits.len(), 1], logits.to_vec())?);
        let l = stop_loss(&mut g, x, targets, pos_weight, norm);
        Ok(g.value(l).item())
    }
}
