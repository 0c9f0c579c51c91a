//! Decoder-only mel-spectrogram language model.
//!
//! Text ids are embedded and concatenated with pre-net projections of the
//! acoustic input groups; a causal Transformer maps the joint sequence to
//! hidden states `e_t` at the acoustic positions. From each `e_t` a linear
//! head predicts a diagonal Gaussian `(μ_t, log σ_t²)` over a latent of one
//! group's width (`r · 80`), a sample `z_t = μ_t + σ_t ⊙ ε` is refined by a
//! residual MLP into the coarse frames `y′`, and a second linear head emits a
//! stop logit. A residual convolutional post-net turns `y′` into `y″`.
//!
//! All functions here add nodes to a caller-supplied [`Graph`] so the same
//! code path serves training (with gradients), inference and gradient checks.

mod config;
mod params;

use std::sync::Arc;

pub use config::ModelConfig;
pub use params::{Bound, ParamStore};

use crate::autodiff::{Graph, Real, RngState, Tensor, Var};
use crate::error::{MelleError, Result};
use crate::trainer::partition_reduction;

pub const LOGVAR_MIN: f64 = -12.0;
pub const LOGVAR_MAX: f64 = 6.0;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentMode {
    /// `z = μ + σ ⊙ ε`.
    Sample,
    /// `z = μ`.
    Mean,
}

impl std::str::FromStr for LatentMode {
    type Err = MelleError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(Self::Sample),
            "mean" => Ok(Self::Mean),
            _ => Err(MelleError::InvalidInput(format!(
                "sampling mode must be `sample` or `mean`, got {s:?}"
            ))),
        }
    }
}

/// Per-forward switches and randomness.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    /// Enables decoder, embedding and post-net dropout. Pre-net dropout is always on.
    pub train: bool,
    pub latent: LatentMode,
    pub rng: RngState,
}

impl ForwardOptions {
    pub fn train(rng: RngState) -> Self {
        Self {
            train: true,
            latent: LatentMode::Sample,
            rng,
        }
    }

    pub fn inference(latent: LatentMode, rng: RngState) -> Self {
        Self {
            train: false,
            latent,
            rng,
        }
    }

    /// Named child stream of `rng` for one model component.
    pub fn stream(&self, name: &str) -> RngState {
        self.rng.split_named(name)
    }
}

fn linear<T: Real>(g: &mut Graph<T>, b: &Bound, name: &str, x: Var) -> Var {
    let y = g.matmul(x, b.var(&format!("{name}.w")));
    g.add_row(y, b.var(&format!("{name}.b")))
}

fn layer_norm<T: Real>(g: &mut Graph<T>, b: &Bound, name: &str, x: Var) -> Var {
    let y = g.layer_norm_rows(x, T::c(LN_EPS));
    let y = g.mul_row(y, b.var(&format!("{name}.g")));
    g.add_row(y, b.var(&format!("{name}.b")))
}

fn dropout<T: Real>(g: &mut Graph<T>, x: Var, rate: f64, rng: &mut RngState) -> Var {
    if rate <= 0.0 {
        return x;
    }
    let n = g.value(x).len();
    let mask = rng.dropout_mask::<T>(n, 1.0 - rate);
    g.mul_const(x, Arc::new(mask))
}

/// Sinusoidal position codes for positions `[start, start + n)`.
pub fn sinusoidal_positions<T: Real>(start: usize, n: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn(n, d, |i, j| {
        let pos = (start + i) as f64;
        let freq = 1.0 / 10_000f64.powf((2 * (j / 2)) as f64 / d as f64);
        T::c(if j % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        })
    })
}

/// Token embeddings `L × d`, with dropout in training.
pub fn text_embed<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    cfg: &ModelConfig,
    ids: &[usize],
    opts: &ForwardOptions,
) -> Result<Var> {
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(MelleError::InvalidInput(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let x = g.gather_rows(b.var("text_emb"), ids);
    if opts.train {
        let mut rng = opts.stream("text_dropout");
        Ok(dropout(g, x, cfg.dropout, &mut rng))
    } else {
        Ok(x)
    }
}

/// Pre-net: three linear layers, ReLU and dropout after the first two.
///
/// Row `j` draws its dropout masks from `rng.split(first_position + j)`, so a
/// given acoustic position sees the same mask regardless of how much of the
/// sequence is recomputed around it.
pub fn prenet_forward<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    cfg: &ModelConfig,
    frames: Var,
    rng: &RngState,
    first_position: usize,
) -> Var {
    let rows = g.value(frames).rows();
    let pd = cfg.prenet_dim;
    let keep = 1.0 - cfg.prenet_dropout;
    let (mut m1, mut m2) = (Vec::with_capacity(rows * pd), Vec::with_capacity(rows * pd));
    if cfg.prenet_dropout > 0.0 {
        for j in 0..rows {
            let mut r = rng.split((first_position + j) as u64);
            m1.extend(r.dropout_mask::<T>(pd, keep));
            m2.extend(r.dropout_mask::<T>(pd, keep));
        }
    }
    let h = linear(g, b, "prenet.0", frames);
    let mut h = g.relu(h);
    if cfg.prenet_dropout > 0.0 {
        h = g.mul_const(h, Arc::new(m1));
    }
    let h = linear(g, b, "prenet.1", h);
    let mut h = g.relu(h);
    if cfg.prenet_dropout > 0.0 {
        h = g.mul_const(h, Arc::new(m2));
    }
    linear(g, b, "prenet.2", h)
}

fn attention<T: Real>(g: &mut Graph<T>, b: &Bound, prefix: &str, x: Var, n_heads: usize) -> Var {
    let d = g.value(x).cols();
    let dh = d / n_heads;
    let q = linear(g, b, &format!("{prefix}.q"), x);
    let k = linear(g, b, &format!("{prefix}.k"), x);
    let v = linear(g, b, &format!("{prefix}.v"), x);
    let scale = T::c(1.0 / (dh as f64).sqrt());
    let heads: Vec<Var> = (0..n_heads)
        .map(|h| {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, lo, hi);
            let kh = g.slice_cols(k, lo, hi);
            let vh = g.slice_cols(v, lo, hi);
            let kt = g.transpose(kh);
            let s = g.matmul(qh, kt);
            let s = g.scale(s, scale);
            let p = g.softmax_rows_masked(s, |i, j| j <= i);
            g.matmul(p, vh)
        })
        .collect();
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)
    };
    linear(g, b, &format!("{prefix}.o"), cat)
}

/// Causal Transformer over `[text; acoustic]`; returns the hidden states at the
/// `M` acoustic positions.
///
/// Every position attends to itself and all earlier positions, so text
/// positions never see acoustic ones and acoustic position `k` sees the whole
/// text plus acoustic positions `≤ k`.
pub fn decoder_forward<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    cfg: &ModelConfig,
    text_emb: Var,
    mel_emb: Var,
    opts: &ForwardOptions,
) -> Result<Var> {
    let l = g.value(text_emb).rows();
    let m = g.value(mel_emb).rows();
    if l == 0 || m == 0 {
        return Err(MelleError::InvalidInput(
            "decoder needs at least one text and one acoustic position".into(),
        ));
    }
    if l + m > cfg.max_positions() {
        return Err(MelleError::InvalidInput(format!(
            "sequence of {} positions exceeds the maximum of {}",
            l + m,
            cfg.max_positions()
        )));
    }
    let x = g.concat_rows(&[text_emb, mel_emb]);
    let pe = g.constant(sinusoidal_positions(0, l + m, cfg.d_model));
    let mut x = g.add(x, pe);
    let mut rng = opts.stream("decoder");
    for layer in 0..cfg.n_layers {
        let p = format!("dec.{layer}");
        let h = layer_norm(g, b, &format!("{p}.ln1"), x);
        let mut a = attention(g, b, &format!("{p}.attn"), h, cfg.n_heads);
        if opts.train {
            a = dropout(g, a, cfg.dropout, &mut rng);
        }
        x = g.add(x, a);
        let h = layer_norm(g, b, &format!("{p}.ln2"), x);
        let f = linear(g, b, &format!("{p}.ffn.0"), h);
        let f = g.gelu(f);
        let mut f = linear(g, b, &format!("{p}.ffn.1"), f);
        if opts.train {
            f = dropout(g, f, cfg.dropout, &mut rng);
        }
        x = g.add(x, f);
    }
    let x = layer_norm(g, b, "final_ln", x);
    Ok(g.slice_rows(x, l, l + m))
}

/// Graph handles for the latent head's outputs.
#[derive(Debug, Clone)]
pub struct LatentVars<T> {
    pub mu: Var,
    /// Clamped to `[LOGVAR_MIN, LOGVAR_MAX]`; `None` when the model has no variance head.
    pub logvar: Option<Var>,
    pub z: Var,
    /// Noise used for `z`, when sampled.
    pub eps: Option<Tensor<T>>,
}

/// Latent sampling head over `e: n × d`. Row `j` draws its noise from
/// `rng.split(first_step + j)`.
pub fn latent_sample<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    cfg: &ModelConfig,
    e: Var,
    mode: LatentMode,
    rng: &RngState,
    first_step: usize,
) -> LatentVars<T> {
    let gd = cfg.group_dim();
    if !cfg.latent_sampling {
        let mu = linear(g, b, "latent", e);
        return LatentVars {
            mu,
            logvar: None,
            z: mu,
            eps: None,
        };
    }
    let out = linear(g, b, "latent", e);
    let mu = g.slice_cols(out, 0, gd);
    let raw = g.slice_cols(out, gd, 2 * gd);
    let logvar = g.clamp(raw, T::c(LOGVAR_MIN), T::c(LOGVAR_MAX));
    match mode {
        LatentMode::Mean => LatentVars {
            mu,
            logvar: Some(logvar),
            z: mu,
            eps: None,
        },
        LatentMode::Sample => {
            let rows = g.value(e).rows();
            let mut eps = Vec::with_capacity(rows * gd);
            for j in 0..rows {
                let mut r = rng.split((first_step + j) as u64);
                eps.extend(r.normals(gd).into_iter().map(T::c));
            }
            let half = g.scale(logvar, T::c(0.5));
            let sigma = g.exp(half);
            let noise = g.mul_const(sigma, Arc::new(eps.clone()));
            let z = g.add(mu, noise);
            LatentVars {
                mu,
                logvar: Some(logvar),
                z,
                eps: Some(Tensor::new(&[rows, gd], eps).expect("rows × group width")),
            }
        }
    }
}

/// `y′ = z + MLP(z)`, one row per decoding step (`n × r·80`).
pub fn latent_to_frame<T: Real>(g: &mut Graph<T>, b: &Bound, z: Var) -> Var {
    let h = linear(g, b, "latent_mlp.0", z);
    let h = g.relu(h);
    let h = linear(g, b, "latent_mlp.1", h);
    let h = g.relu(h);
    let r = linear(g, b, "latent_mlp.2", h);
    g.add(z, r)
}

/// One stop logit per row of `e`.
pub fn stop_logit<T: Real>(g: &mut Graph<T>, b: &Bound, e: Var) -> Var {
    linear(g, b, "stop", e)
}

/// `y″ = y′ + convs(y′)` over frames `T × 80`, "same" padding in time.
pub fn postnet<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    cfg: &ModelConfig,
    y_prime: Var,
    opts: &ForwardOptions,
) -> Var {
    let mut rng = opts.stream("postnet");
    let mut x = y_prime;
    for i in 0..cfg.postnet_layers {
        let u = g.unfold_rows(x, cfg.postnet_kernel);
        let mut c = linear(g, b, &format!("postnet.{i}"), u);
        if i + 1 < cfg.postnet_layers {
            c = g.tanh(c);
            if opts.train {
                c = dropout(g, c, cfg.dropout, &mut rng);
            }
        }
        x = c;
    }
    g.add(y_prime, x)
}

/// Graph handles for a teacher-forced pass.
#[derive(Debug, Clone)]
pub struct OutputVars<T> {
    /// LM states at acoustic positions, `n × d`.
    pub e: Var,
    pub latents: LatentVars<T>,
    /// Coarse frames, `n·r × 80`.
    pub y_prime: Var,
    /// Post-net output, `n·r × 80`.
    pub y_double_prime: Var,
    /// `n × 1`.
    pub stop_logits: Var,
}

/// Decoder inputs for teacher forcing: a zero "begin" group followed by all
/// target groups but the last.
pub fn shifted_inputs<T: Real>(groups: &Tensor<T>) -> Tensor<T> {
    let (n, w) = (groups.rows(), groups.cols());
    let mut data = vec![T::zero(); n * w];
    data[w..].copy_from_slice(&groups.data()[..(n - 1) * w]);
    Tensor::new(&[n, w], data).expect("n × w")
}

/// Teacher-forced pass over target groups `n × r·80`.
pub fn forward_teacher_forced_graph<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    cfg: &ModelConfig,
    tokens: &[usize],
    target_groups: &Tensor<T>,
    opts: &ForwardOptions,
) -> Result<OutputVars<T>> {
    let n = target_groups.rows();
    if n == 0 || target_groups.cols() != cfg.group_dim() {
        return Err(MelleError::shape(
            "forward_teacher_forced",
            format!(
                "target groups {:?}, expected [n >= 1, {}]",
                target_groups.shape(),
                cfg.group_dim()
            ),
        ));
    }
    let text = text_embed(g, b, cfg, tokens, opts)?;
    let inputs = g.constant(shifted_inputs(target_groups));
    let mel = prenet_forward(g, b, cfg, inputs, &opts.stream("prenet"), 0);
    let e = decoder_forward(g, b, cfg, text, mel, opts)?;
    let latents = latent_sample(g, b, cfg, e, opts.latent, &opts.stream("latent"), 0);
    let yg = latent_to_frame(g, b, latents.z);
    let y_prime = g.reshape(yg, &[n * cfg.reduction_factor, cfg.n_mels]);
    let stop_logits = stop_logit(g, b, e);
    let y_double_prime = postnet(g, b, cfg, y_prime, opts);
    Ok(OutputVars {
        e,
        latents,
        y_prime,
        y_double_prime,
        stop_logits,
    })
}

/// `(μ, log σ², z)` per decoding step, each `n × r·80`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats<T> {
    pub mu: Tensor<T>,
    pub logvar: Option<Tensor<T>>,
    pub z: Tensor<T>,
    pub eps: Option<Tensor<T>>,
}

/// Values of a teacher-forced pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutputs<T> {
    pub y_prime: Tensor<T>,
    pub y_double_prime: Tensor<T>,
    pub stop_logits: Vec<T>,
    pub latents: LatentStats<T>,
    pub lm_states: Tensor<T>,
}

/// A configuration and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::init(&config);
        Ok(Self { config, params })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Teacher-forced outputs for `frames: T × 80` (zero-padded to a multiple of `r`).
    pub fn forward_teacher_forced(
        &self,
        tokens: &[usize],
        frames: &Tensor<T>,
        opts: &ForwardOptions,
    ) -> Result<ModelOutputs<T>> {
        let groups = partition_reduction(frames, self.config.reduction_factor)?;
        self.forward_teacher_forced_grouped(tokens, &groups.groups, opts)
    }

    pub fn forward_teacher_forced_grouped(
        &self,
        tokens: &[usize],
        groups: &Tensor<T>,
        opts: &ForwardOptions,
    ) -> Result<ModelOutputs<T>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let out = forward_teacher_forced_graph(&mut g, &b, &self.config, tokens, groups, opts)?;
        g.check_finite()?;
        Ok(ModelOutputs {
            y_prime: g.value(out.y_prime).clone(),
            y_double_prime: g.value(out.y_double_prime).clone(),
            stop_logits: g.value(out.stop_logits).data().to_vec(),
            latents: LatentStats {
                mu: g.value(out.latents.mu).clone(),
                logvar: out.latents.logvar.map(|v| g.value(v).clone()),
                z: g.value(out.latents.z).clone(),
                eps: out.latents.eps.clone(),
            },
            lm_states: g.value(out.e).clone(),
        })
    }
}
