//! Finite-difference gradient suite over every graph operation, the model
//! blocks, the loss terms and the full weighted objective (all in `f64`).

use std::sync::Arc;

use crate::audio::MelSpectrogram;
use crate::autodiff::{gaussian_draw, grad_check_with, GradCheckOptions, GradCheckReport, Graph, RngState, Tensor, Var};
use crate::error::{MelleError, Result};
use crate::losses::{flux_loss, kl_loss, regression_loss, stop_loss, LossWeights, Norm, STOP_POS_WEIGHT};
use crate::model::{
    decoder_forward, latent_sample, latent_to_frame, postnet, prenet_forward, stop_logit, Bound, ForwardOptions,
    LatentMode, ModelConfig, ParamStore,
};
use crate::tokenizer::TokenSequence;
use crate::trainer::{batch_loss_graph, TrainingBatch, Utterance};

/// Relative-error bound for individual operations, blocks and loss terms.
pub const COMPONENT_TOL: f64 = 1e-6;
/// Relative-error bound for the full objective through the whole model.
pub const END_TO_END_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Component {
    Ops,
    Model,
    Losses,
    EndToEnd,
}

impl Component {
    pub const ALL: [Component; 4] = [Self::Ops, Self::Model, Self::Losses, Self::EndToEnd];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ops => "ops",
            Self::Model => "model",
            Self::Losses => "losses",
            Self::EndToEnd => "end_to_end",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Self::EndToEnd => END_TO_END_TOL,
            _ => COMPONENT_TOL,
        }
    }
}

impl std::str::FromStr for Component {
    type Err = MelleError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s || (s == "end-to-end" && *c == Self::EndToEnd))
            .ok_or_else(|| {
                MelleError::InvalidInput(format!("unknown component {s:?}; expected ops, model, losses or end_to_end"))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub component: Component,
    pub name: String,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.passes(self.tolerance)
    }
}

type CheckFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Var>;

struct Case {
    name: String,
    inputs: Vec<Tensor<f64>>,
    f: CheckFn,
}

fn normal(rng: &mut RngState, r: usize, c: usize) -> Tensor<f64> {
    gaussian_draw(rng, &[r, c])
}

/// Entries with magnitude in `[0.2, 1.2)` and random sign: away from kinks at 0.
fn away_from_zero(rng: &mut RngState, r: usize, c: usize) -> Tensor<f64> {
    let u = rng.uniforms(2 * r * c);
    Tensor::new(
        &[r, c],
        (0..r * c)
            .map(|i| (0.2 + u[i]) * if u[r * c + i] < 0.5 { -1.0 } else { 1.0 })
            .collect(),
    )
    .expect("r × c")
}

/// `Σ w ⊙ y` for fixed random `w`, turning any output into a scalar with a generic gradient.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let n = g.value(y).len();
    let w = RngState::new(seed).split_named("projection").normals(n);
    let p = g.mul_const(y, Arc::new(w));
    g.sum(p)
}

fn case(name: &str, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var + 'static) -> Case {
    Case {
        name: name.into(),
        inputs,
        f: Box::new(f),
    }
}

fn op_cases(seed: u64) -> Vec<Case> {
    let mut rng = RngState::new(seed).split_named("ops");
    let r = &mut rng;
    let mut v: Vec<Case> = Vec::new();
    macro_rules! unary {
        ($name:literal, $input:expr, |$g:ident, $x:ident| $body:expr) => {{
            let s = v.len() as u64;
            v.push(case($name, vec![$input], move |$g, x| {
                let $x = x[0];
                let y = $body;
                project($g, y, s)
            }));
        }};
    }
    macro_rules! binary {
        ($name:literal, $a:expr, $b:expr, |$g:ident, $x:ident, $y:ident| $body:expr) => {{
            let s = v.len() as u64;
            v.push(case($name, vec![$a, $b], move |$g, x| {
                let ($x, $y) = (x[0], x[1]);
                let out = $body;
                project($g, out, s)
            }));
        }};
    }
    binary!("matmul", normal(r, 3, 4), normal(r, 4, 2), |g, a, b| g.matmul(a, b));
    unary!("transpose", normal(r, 3, 4), |g, a| g.transpose(a));
    binary!("add", normal(r, 2, 3), normal(r, 2, 3), |g, a, b| g.add(a, b));
    binary!("sub", normal(r, 2, 3), normal(r, 2, 3), |g, a, b| g.sub(a, b));
    binary!("mul", normal(r, 2, 3), normal(r, 2, 3), |g, a, b| g.mul(a, b));
    binary!("add_row", normal(r, 3, 4), gaussian_draw(r, &[4]), |g, a, b| g.add_row(a, b));
    binary!("mul_row", normal(r, 3, 4), gaussian_draw(r, &[4]), |g, a, b| g.mul_row(a, b));
    unary!("scale", normal(r, 2, 3), |g, a| g.scale(a, -1.7));
    unary!("add_scalar", normal(r, 2, 3), |g, a| g.add_scalar(a, 0.3));
    let c = Arc::new(r.normals(6));
    unary!("mul_const", normal(r, 2, 3), |g, a| g.mul_const(a, c.clone()));
    unary!("relu", away_from_zero(r, 3, 3), |g, a| g.relu(a));
    unary!("gelu", normal(r, 3, 3), |g, a| g.gelu(a));
    unary!("tanh", normal(r, 3, 3), |g, a| g.tanh(a));
    unary!("sigmoid", normal(r, 3, 3), |g, a| g.sigmoid(a));
    unary!("exp", normal(r, 3, 3), |g, a| g.exp(a));
    unary!("ln", normal(r, 3, 3).map(|x| x.abs() + 0.2), |g, a| g.ln(a));
    unary!("abs", away_from_zero(r, 3, 3), |g, a| g.abs(a));
    unary!("square", normal(r, 3, 3), |g, a| g.square(a));
    unary!("softplus", normal(r, 3, 3).map(|x| 4.0 * x), |g, a| g.softplus(a));
    // Entries land in (-1.8, -0.8) ∪ (0.8, 1.8); clamp at ±0.5 and ±2.5 exercises both regimes.
    unary!("clamp_inside", away_from_zero(r, 3, 3).map(|x| x * 1.5), |g, a| g.clamp(a, -2.5, 2.5));
    unary!("clamp_saturated", away_from_zero(r, 3, 3).map(|x| x * 1.5), |g, a| g.clamp(a, -0.5, 0.5));
    unary!("softmax_rows", normal(r, 3, 4), |g, a| g.softmax_rows(a));
    unary!("softmax_rows_causal", normal(r, 4, 4), |g, a| g.softmax_rows_masked(a, |i, j| j <= i));
    unary!("layer_norm_rows", normal(r, 3, 5), |g, a| g.layer_norm_rows(a, 1e-5));
    unary!("sum", normal(r, 3, 2), |g, a| {
        let s = g.sum(a);
        g.square(s)
    });
    binary!("concat_rows", normal(r, 2, 3), normal(r, 1, 3), |g, a, b| g.concat_rows(&[a, b]));
    binary!("concat_cols", normal(r, 2, 3), normal(r, 2, 2), |g, a, b| g.concat_cols(&[a, b]));
    unary!("slice_rows", normal(r, 4, 3), |g, a| g.slice_rows(a, 1, 3));
    unary!("slice_cols", normal(r, 3, 4), |g, a| g.slice_cols(a, 1, 3));
    unary!("reshape", normal(r, 2, 6), |g, a| g.reshape(a, &[3, 4]));
    unary!("gather_rows", normal(r, 5, 3), |g, a| g.gather_rows(a, &[4, 0, 4, 2]));
    unary!("unfold_rows", normal(r, 4, 3), |g, a| g.unfold_rows(a, 3));
    v
}

/// Initial parameters moved off their structured starting point (zero biases,
/// unit gains) so no activation sits exactly on a ReLU or |·| kink.
fn jittered_params(cfg: &ModelConfig, seed: u64) -> ParamStore<f64> {
    let mut store: ParamStore<f64> = ParamStore::init(cfg);
    let root = RngState::new(seed).split_named("jitter");
    for (name, t) in store.iter_mut() {
        let noise = root.split_named(name).normals(t.len());
        t.data_mut().iter_mut().zip(noise).for_each(|(x, n)| *x += 0.1 * n);
    }
    store
}

fn params_case(
    name: &str,
    store: &ParamStore<f64>,
    prefixes: &[&str],
    extra: Vec<Tensor<f64>>,
    f: impl Fn(&mut Graph<f64>, &Bound, &[Var]) -> Var + 'static,
) -> Case {
    let selected: Vec<(String, Tensor<f64>)> = store
        .iter()
        .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
        .map(|(k, t)| (k.to_string(), t.clone()))
        .collect();
    let names: Vec<String> = selected.iter().map(|(k, _)| k.clone()).collect();
    let n_extra = extra.len();
    let mut inputs = extra;
    inputs.extend(selected.into_iter().map(|(_, t)| t));
    case(name, inputs, move |g, v| {
        let b = Bound::from_vars(names.iter().cloned().zip(v[n_extra..].iter().copied()));
        f(g, &b, &v[..n_extra])
    })
}

fn model_cases(cfg: &ModelConfig, seed: u64) -> Vec<Case> {
    let store = jittered_params(cfg, seed);
    let mut rng = RngState::new(seed).split_named("model");
    let gd = cfg.group_dim();
    let d = cfg.d_model;
    let opts = ForwardOptions::train(RngState::new(seed).split_named("forward"));
    let c = cfg.clone();
    let mut v = Vec::new();

    let c1 = c.clone();
    v.push(params_case("prenet", &store, &["prenet."], vec![normal(&mut rng, 3, gd)], move |g, b, x| {
        let y = prenet_forward(g, b, &c1, x[0], &opts.stream("prenet"), 0);
        project(g, y, 1)
    }));
    let c2 = c.clone();
    v.push(params_case(
        "decoder",
        &store,
        &["dec.", "final_ln."],
        vec![normal(&mut rng, 2, d), normal(&mut rng, 3, d)],
        move |g, b, x| {
            let e = decoder_forward(g, b, &c2, x[0], x[1], &opts).expect("valid decoder input");
            project(g, e, 2)
        },
    ));
    for (name, mode) in [("latent_sample", LatentMode::Sample), ("latent_mean", LatentMode::Mean)] {
        let c3 = c.clone();
        v.push(params_case(name, &store, &["latent."], vec![normal(&mut rng, 3, d)], move |g, b, x| {
            let l = latent_sample(g, b, &c3, x[0], mode, &opts.stream("latent"), 0);
            let z = project(g, l.z, 3);
            match l.logvar {
                Some(lv) => {
                    let p = project(g, lv, 4);
                    g.add(z, p)
                }
                None => z,
            }
        }));
    }
    v.push(params_case("latent_to_frame", &store, &["latent_mlp."], vec![normal(&mut rng, 2, gd)], |g, b, x| {
        let y = latent_to_frame(g, b, x[0]);
        project(g, y, 5)
    }));
    v.push(params_case("stop_logit", &store, &["stop."], vec![normal(&mut rng, 3, d)], |g, b, x| {
        let y = stop_logit(g, b, x[0]);
        project(g, y, 6)
    }));
    let c4 = c.clone();
    v.push(params_case("postnet", &store, &["postnet."], vec![normal(&mut rng, 3, cfg.n_mels)], move |g, b, x| {
        let y = postnet(g, b, &c4, x[0], &opts);
        project(g, y, 7)
    }));
    v
}

fn loss_cases(seed: u64) -> Vec<Case> {
    let mut rng = RngState::new(seed).split_named("losses");
    let r = &mut rng;
    let mask = Arc::new({
        let mut m = vec![1.0; 4 * 6];
        m[3 * 6..].iter_mut().for_each(|x| *x = 0.0);
        m
    });
    let (m1, m2) = (mask.clone(), mask.clone());
    let targets = vec![0.0, 0.0, 0.0, 1.0];
    vec![
        case("regression", vec![normal(r, 4, 6), normal(r, 4, 6), normal(r, 4, 6)], |g, x| {
            regression_loss(g, x[0], x[1], x[2], None, Norm::Mean(24.0))
        }),
        case("regression_masked", vec![normal(r, 4, 6), normal(r, 4, 6), normal(r, 4, 6)], move |g, x| {
            regression_loss(g, x[0], x[1], x[2], Some(&m1), Norm::Raw)
        }),
        case("kl", vec![normal(r, 4, 6), normal(r, 4, 6), normal(r, 4, 6)], move |g, x| {
            kl_loss(g, x[0], x[1], x[2], Some(&m2), Norm::Mean(18.0))
        }),
        case("flux", vec![normal(r, 4, 6), normal(r, 4, 6)], |g, x| flux_loss(g, x[0], x[1], None, Norm::Raw)),
        case("stop", vec![normal(r, 4, 1)], move |g, x| {
            stop_loss(g, x[0], &targets, STOP_POS_WEIGHT, Norm::Mean(4.0))
        }),
    ]
}

/// Two-frame utterance and the tiny objective with all four terms active.
fn end_to_end_case(cfg: &ModelConfig, seed: u64) -> Result<Case> {
    let store = jittered_params(cfg, seed);
    let mut rng = RngState::new(seed).split_named("end_to_end");
    let frames = 2 * cfg.reduction_factor;
    let mel = MelSpectrogram::new(
        frames,
        rng.normals(frames * cfg.n_mels).into_iter().map(|v| (v - 2.0) as f32).collect(),
    )?;
    let ids: Vec<usize> = (0..3).map(|i| 3 + i % (cfg.vocab_size - 3)).chain([crate::tokenizer::EOS]).collect();
    let utt = Utterance {
        id: "gradcheck".into(),
        tokens: TokenSequence::from_ids(ids)?,
        mel,
    };
    let batch = TrainingBatch::new(&[&utt], cfg.reduction_factor)?;
    let opts = ForwardOptions::train(RngState::new(seed).split_named("forward"));
    let weights = LossWeights::default();
    let c = cfg.clone();
    Ok(params_case("total_loss", &store, &[""], vec![], move |g, b, _| {
        batch_loss_graph(g, b, &c, &batch, &opts, weights).expect("valid batch").total
    }))
}

/// Run the checks for `component`. `max_entries` caps the entries checked per input tensor.
pub fn run_component(
    component: Component,
    cfg: &ModelConfig,
    seed: u64,
    max_entries: Option<usize>,
) -> Result<Vec<CheckResult>> {
    cfg.validate()?;
    let cases = match component {
        Component::Ops => op_cases(seed),
        Component::Model => model_cases(cfg, seed),
        Component::Losses => loss_cases(seed),
        Component::EndToEnd => vec![end_to_end_case(cfg, seed)?],
    };
    let opts = GradCheckOptions {
        max_entries_per_input: max_entries,
        seed,
        ..GradCheckOptions::default()
    };
    Ok(cases
        .into_iter()
        .map(|c| CheckResult {
            component,
            report: grad_check_with(&c.f, &c.inputs, opts),
            name: c.name,
            tolerance: component.tolerance(),
        })
        .collect())
}
