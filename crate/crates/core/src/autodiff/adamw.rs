use super::real::Real;
use super::tensor::Tensor;
use crate::error::{MelleError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Real> Moments<T> {
    pub fn zeros_like(p: &Tensor<T>) -> Self {
        Self {
            m: Tensor::zeros(p.shape()),
            v: Tensor::zeros(p.shape()),
        }
    }
}

/// Optimizer state for a list of parameters, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub step: u64,
    pub moments: Vec<Moments<T>>,
}

impl<T: Real> AdamWState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        Self {
            step: 0,
            moments: params.into_iter().map(Moments::zeros_like).collect(),
        }
    }
}

/// One decoupled-weight-decay Adam update with bias correction:
///
/// ```text
/// m ← β1 m + (1-β1) g          v ← β2 v + (1-β2) g²
/// p ← p - lr·wd·p - lr · (m / (1-β1^t)) / (sqrt(v / (1-β2^t)) + ε)
/// ```
pub fn adamw_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut AdamWState<T>,
    hp: &AdamWParams,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.moments.len() {
        return Err(MelleError::shape(
            "adamw_step",
            format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.moments.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let mo = &state.moments[i];
        if p.shape() != g.shape() || p.shape() != mo.m.shape() {
            return Err(MelleError::shape(
                "adamw_step",
                format!(
                    "param {i}: param {:?}, grad {:?}, state {:?}",
                    p.shape(),
                    g.shape(),
                    mo.m.shape()
                ),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let (b1, b2) = (T::c(hp.beta1), T::c(hp.beta2));
    let (ob1, ob2) = (T::c(1.0 - hp.beta1), T::c(1.0 - hp.beta2));
    let lr = T::c(hp.lr);
    let decay = T::c(1.0 - hp.lr * hp.weight_decay);
    let (bc1, bc2, eps) = (T::c(bc1), T::c(bc2), T::c(hp.eps));
    for ((p, g), mo) in params.iter_mut().zip(grads).zip(state.moments.iter_mut()) {
        let pd = p.data_mut();
        let md = mo.m.data_mut();
        let vd = mo.v.data_mut();
        for (j, &gj) in g.data().iter().enumerate() {
            md[j] = b1 * md[j] + ob1 * gj;
            vd[j] = b2 * vd[j] + ob2 * gj * gj;
            let mhat = md[j] / bc1;
            let vhat = vd[j] / bc2;
            pd[j] = pd[j] * decay - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_scalar(p0: f64, g: f64, hp: AdamWParams) -> f64 {
        let mut p = Tensor::scalar(p0);
        let gt = Tensor::scalar(g);
        let mut st = AdamWState::new([&p]);
        adamw_step(&mut [&mut p], &[&gt], &mut st, &hp).unwrap();
        p.item()
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let hp = AdamWParams {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        assert_eq!(step_scalar(1.25, 0.0, hp), 1.25);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // m = 0.05, v = 0.00025; m̂ = 0.5, v̂ = 0.25; p' = 1 - 0.1 * 0.5 / (0.5 + 1e-8)
        let hp = AdamWParams {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let expected = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((step_scalar(1.0, 0.5, hp) - expected).abs() < 1e-12);
        assert!((expected - 0.900_000_002).abs() < 1e-12);
    }

    #[test]
    fn decay_only_shrinks_multiplicatively() {
        let hp = AdamWParams {
            lr: 0.1,
            weight_decay: 0.2,
            ..Default::default()
        };
        assert!((step_scalar(3.0, 0.0, hp) - 3.0 * (1.0 - 0.1 * 0.2)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Tensor::<f64>::zeros(&[2, 2]);
        let g = Tensor::<f64>::zeros(&[4]);
        let mut st = AdamWState::new([&p]);
        let err = adamw_step(&mut [&mut p], &[&g], &mut st, &AdamWParams::default());
        assert!(err.is_err());
    }
}
