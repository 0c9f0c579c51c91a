//! Teacher-forced training: batching, schedules, the optimizer step and checkpoints.

mod batch;
mod checkpoint;
mod manifest;
mod partition;
mod schedule;

use std::sync::Arc;

pub use batch::{epoch_order, make_batches, TrainingBatch, Utterance};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use manifest::{load_features, load_utterances, parse_manifest, read_manifest, ManifestEntry};
pub use partition::{partition_reduction, Groups};
pub use schedule::{lambda_schedule, lr_schedule};

use crate::autodiff::{adamw_step, AdamWParams, AdamWState, Graph, Real, RngState, Tensor};
use crate::error::{MelleError, Result};
use crate::losses::{
    flux_loss, kl_loss, regression_loss, stop_loss, total_loss, LossBreakdown, LossVars, LossWeights, Norm,
    DEFAULT_BETA, DEFAULT_GAMMA, KL_LAMBDA, STOP_POS_WEIGHT,
};
use crate::model::{forward_teacher_forced_graph, Bound, ForwardOptions, Model, ModelConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    /// Real frames per batch.
    pub batch_frames: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub lambda_breakpoint: u64,
    /// KL weight after the breakpoint.
    pub lambda: f64,
    pub beta: f64,
    pub gamma: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_frames: 2000,
            peak_lr: 5e-4,
            warmup_steps: 200,
            lambda_breakpoint: 100,
            lambda: KL_LAMBDA,
            beta: DEFAULT_BETA,
            gamma: DEFAULT_GAMMA,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
            checkpoint_interval: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MelleError::Config(m));
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if self.warmup_steps >= self.steps {
            return bad(format!(
                "warmup_steps ({}) must be less than steps ({})",
                self.warmup_steps, self.steps
            ));
        }
        if self.batch_frames == 0 {
            return bad("batch_frames must be positive".into());
        }
        for (k, v) in [
            ("peak_lr", self.peak_lr),
            ("lambda", self.lambda),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{k} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }

    /// `(key, value)` pairs in a fixed order; the inverse of [`TrainConfig::set`].
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("steps", self.steps.to_string()),
            ("batch_frames", self.batch_frames.to_string()),
            ("peak_lr", self.peak_lr.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("lambda_breakpoint", self.lambda_breakpoint.to_string()),
            ("lambda", self.lambda.to_string()),
            ("beta", self.beta.to_string()),
            ("gamma", self.gamma.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("seed", self.seed.to_string()),
            ("checkpoint_interval", self.checkpoint_interval.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .trim()
                .parse()
                .map_err(|_| MelleError::Config(format!("{key}: cannot parse {value:?}")))
        }
        match key {
            "steps" => self.steps = p(key, value)?,
            "batch_frames" => self.batch_frames = p(key, value)?,
            "peak_lr" => self.peak_lr = p(key, value)?,
            "warmup_steps" => self.warmup_steps = p(key, value)?,
            "lambda_breakpoint" => self.lambda_breakpoint = p(key, value)?,
            "lambda" => self.lambda = p(key, value)?,
            "beta" => self.beta = p(key, value)?,
            "gamma" => self.gamma = p(key, value)?,
            "weight_decay" => self.weight_decay = p(key, value)?,
            "grad_clip" => self.grad_clip = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = p(key, value)?,
            _ => return Err(MelleError::Config(format!("unknown training key {key:?}"))),
        }
        Ok(())
    }

    pub fn weights_at(&self, step: u64) -> LossWeights {
        LossWeights {
            lambda: lambda_schedule(step, self),
            beta: self.beta,
            gamma: self.gamma,
        }
    }
}

/// Batch loss graph. Item `i` uses `opts` with its rng split by `i`.
///
/// Spectral terms are summed over real frames and divided by
/// `total_frames · 80`; the stop term is divided by the number of real decoding steps.
pub fn batch_loss_graph<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    cfg: &ModelConfig,
    batch: &TrainingBatch,
    opts: &ForwardOptions,
    weights: LossWeights,
) -> Result<LossVars> {
    if batch.reduction_factor != cfg.reduction_factor {
        return Err(MelleError::InvalidInput(format!(
            "batch grouped with r={} but model uses r={}",
            batch.reduction_factor, cfg.reduction_factor
        )));
    }
    let elems = (batch.total_frames() * cfg.n_mels) as f64;
    let steps = batch.total_groups() as f64;
    let (mut reg, mut kl, mut flux, mut stop) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..batch.len() {
        let (tokens, groups) = batch.item_groups(i)?;
        let groups: Groups<T> = Groups {
            groups: groups.groups.cast(),
            n_frames: groups.n_frames,
            reduction_factor: groups.reduction_factor,
        };
        let item_opts = ForwardOptions {
            rng: opts.rng.split(i as u64),
            ..*opts
        };
        let out = forward_teacher_forced_graph(g, b, cfg, &tokens, &groups.groups, &item_opts)?;
        let mask = groups.frame_mask();
        let padded = mask.iter().any(|&m| m == T::zero());
        let full_mask = padded.then(|| Arc::new(mask.clone()));
        let y = g.constant(groups.padded_frames());
        reg.push(regression_loss(g, y, out.y_prime, out.y_double_prime, full_mask.as_ref(), Norm::Raw));
        if let Some(logvar) = out.latents.logvar {
            let yg = g.constant(groups.groups.clone());
            kl.push(kl_loss(g, out.latents.mu, logvar, yg, full_mask.as_ref(), Norm::Raw));
        }
        let mu_frames = g.reshape(out.latents.mu, &[groups.groups.rows() * cfg.reduction_factor, cfg.n_mels]);
        let flux_mask = padded.then(|| Arc::new(mask[cfg.n_mels..].to_vec()));
        flux.push(flux_loss(g, mu_frames, y, flux_mask.as_ref(), Norm::Raw));
        let targets: Vec<T> = batch.stop_targets[i][..groups.groups.rows()].iter().map(|&s| T::c(s as f64)).collect();
        stop.push(stop_loss(g, out.stop_logits, &targets, STOP_POS_WEIGHT, Norm::Raw));
    }
    let sum = |g: &mut Graph<T>, parts: Vec<_>, norm: f64| {
        let mut acc = match parts.first() {
            Some(&v) => v,
            None => g.constant(Tensor::scalar(T::zero())),
        };
        for &p in parts.iter().skip(1) {
            acc = g.add(acc, p);
        }
        g.scale(acc, T::c(1.0 / norm))
    };
    let reg = sum(g, reg, elems);
    let kl = sum(g, kl, elems);
    let flux = sum(g, flux, elems);
    let stop = sum(g, stop, steps);
    Ok(total_loss(g, reg, kl, flux, stop, weights))
}

/// Loss values for `batch` without updating anything.
pub fn evaluate_batch(
    model: &Model<f32>,
    batch: &TrainingBatch,
    opts: &ForwardOptions,
    weights: LossWeights,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let b = model.params.bind(&mut g, false);
    let lv = batch_loss_graph(&mut g, &b, &model.config, batch, opts, weights)?;
    Ok(lv.breakdown(&g, weights))
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub losses: LossBreakdown,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl StepReport {
    /// `step reg kl flux stop total lr lambda`, tab-separated.
    pub fn log_line(&self) -> String {
        let l = &self.losses;
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step, l.reg, l.kl, l.flux, l.stop, l.total, self.lr, l.weights.lambda
        )
    }
}

pub const METRICS_HEADER: &str = "step\treg\tkl\tflux\tstop\ttotal\tlr\tlambda";

/// Forward, loss, backward and one AdamW update at `step` (1-based).
///
/// All randomness comes from `RngState::new(cfg.seed).split(step)`, so the
/// step is a pure function of `(parameters, optimizer state, batch, cfg, step)`.
pub fn train_step(
    model: &mut Model<f32>,
    opt: &mut AdamWState<f32>,
    batch: &TrainingBatch,
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepReport> {
    let weights = cfg.weights_at(step);
    let opts = ForwardOptions::train(RngState::new(cfg.seed).split(step));
    let mut g = Graph::new();
    let b = model.params.bind(&mut g, true);
    let lv = batch_loss_graph(&mut g, &b, &model.config, batch, &opts, weights)?;
    let losses = lv.breakdown(&g, weights);
    if !losses.is_finite() {
        return Err(MelleError::Numeric {
            context: format!(
                "non-finite loss at step {step}: reg={} kl={} flux={} stop={} total={}",
                losses.reg, losses.kl, losses.flux, losses.stop, losses.total
            ),
        });
    }
    let grads = g.backward(lv.total)?;
    let mut grad_tensors: Vec<Tensor<f32>> = Vec::with_capacity(model.params.len());
    let mut norm_sq = 0.0f64;
    for (name, var) in b.iter() {
        let gr = grads.get(var).cloned().unwrap_or_else(|| Tensor::zeros(g.value(var).shape()));
        let n = gr.data().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
        if !n.is_finite() {
            return Err(MelleError::Numeric {
                context: format!("non-finite gradient for {name} at step {step} (total loss {})", losses.total),
            });
        }
        norm_sq += n;
        grad_tensors.push(gr);
    }
    let grad_norm = norm_sq.sqrt();
    if cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip {
        let s = (cfg.grad_clip / grad_norm) as f32;
        for gr in &mut grad_tensors {
            gr.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    let lr = lr_schedule(step, cfg);
    let hp = AdamWParams {
        lr,
        weight_decay: cfg.weight_decay,
        ..AdamWParams::default()
    };
    let mut params: Vec<&mut Tensor<f32>> = model.params.iter_mut().map(|(_, t)| t).collect();
    let grad_refs: Vec<&Tensor<f32>> = grad_tensors.iter().collect();
    adamw_step(&mut params, &grad_refs, opt, &hp)?;
    Ok(StepReport {
        step,
        losses,
        lr,
        grad_norm,
    })
}

/// Stateful driver over a fixed set of batches.
///
/// Step `s` (1-based) trains on batch `epoch_order(seed, e)[k]` with
/// `e, k = divmod(s − 1, n_batches)`, so resuming from a checkpoint at step
/// `s` replays exactly the same sequence as an uninterrupted run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model<f32>,
    pub optimizer: AdamWState<f32>,
    pub config: TrainConfig,
    /// Completed steps.
    pub step: u64,
    batches: Vec<TrainingBatch>,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig, data: &[Utterance]) -> Result<Self> {
        let optimizer = AdamWState::new(model.params.iter().map(|(_, t)| t));
        Self::resume(
            Checkpoint {
                model,
                optimizer,
                step: 0,
            },
            config,
            data,
        )
    }

    pub fn resume(ckpt: Checkpoint, config: TrainConfig, data: &[Utterance]) -> Result<Self> {
        config.validate()?;
        let batches = make_batches(data, config.batch_frames, ckpt.model.config.reduction_factor)?;
        Ok(Self {
            model: ckpt.model,
            optimizer: ckpt.optimizer,
            config,
            step: ckpt.step,
            batches,
        })
    }

    pub fn batches(&self) -> &[TrainingBatch] {
        &self.batches
    }

    pub fn batch_for_step(&self, step: u64) -> &TrainingBatch {
        let n = self.batches.len() as u64;
        let (epoch, k) = ((step - 1) / n, (step - 1) % n);
        &self.batches[epoch_order(self.config.seed, epoch, n as usize)[k as usize]]
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.steps
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let s = self.step + 1;
        let batch = self.batch_for_step(s).clone();
        let report = train_step(&mut self.model, &mut self.optimizer, &batch, &self.config, s)?;
        self.step = s;
        Ok(report)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
        }
    }
}
