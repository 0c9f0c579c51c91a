//! Central finite-difference verification of [`Graph::backward`].

use super::graph::{Graph, Var};
use super::rng::RngState;
use super::tensor::Tensor;

/// Absolute denominator floor for the relative error `|a - n| / max(|a|, |n|, floor)`.
pub const DEFAULT_FLOOR: f64 = 1e-7;
/// Floor as a fraction of the largest analytic gradient entry over all inputs.
///
/// Central differences carry roundoff of order `ε·|f| / h`; an entry whose
/// derivative is many orders below the largest one (or exactly zero, like a
/// key bias under softmax) is pure roundoff on the numeric side, so it is
/// measured against this scale instead of itself.
pub const DEFAULT_RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub h: f64,
    pub floor: f64,
    pub relative_floor: f64,
    /// Check at most this many entries per input, chosen by a seeded shuffle.
    pub max_entries_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            floor: DEFAULT_FLOOR,
            relative_floor: DEFAULT_RELATIVE_FLOOR,
            max_entries_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, flat element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.value(out).item()
}

/// Compare backward gradients of the scalar `f` against `(f(x+h) - f(x-h)) / 2h`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    grad_check_with(
        f,
        inputs,
        GradCheckOptions {
            h,
            ..Default::default()
        },
    )
}

pub fn grad_check_with<F>(f: F, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out).expect("grad_check: backward failed");

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let scale = vars
        .iter()
        .filter_map(|v| grads.get(*v))
        .flat_map(|t| t.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = opts.floor.max(opts.relative_floor * scale);
    let mut rng = RngState::new(opts.seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("input is a leaf").clone();
        let n = inputs[k].len();
        let mut idx: Vec<usize> = (0..n).collect();
        if let Some(cap) = opts.max_entries_per_input {
            if cap < n {
                let keys = rng.uniforms(n);
                idx.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]));
                idx.truncate(cap);
                idx.sort_unstable();
            }
        }
        for i in idx {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + opts.h;
            let fp = eval(&f, &work);
            work[k].data_mut()[i] = orig - opts.h;
            let fm = eval(&f, &work);
            work[k].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * opts.h);
            let a = analytic.data()[i];
            let err = relative_error(a, numeric, floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((k, i));
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
        }
    }
    report
}
