//! Toy reproduction harness for the latent-sampling and flux-loss ablations.

use crate::autodiff::Tensor;
use crate::error::{MelleError, Result};
use crate::losses::LossBreakdown;
use crate::model::{LatentMode, Model, ModelConfig};
use crate::synth::{generate, PromptMode, SynthesisRequest};
use crate::trainer::{TrainConfig, Trainer, Utterance};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Latent sampling, flux loss, sampled decoding.
    Full,
    /// Plain linear head instead of the Gaussian latent module.
    NoLatentSampling,
    /// `β = 0`.
    NoFlux,
    /// The full model decoded with `z = μ`.
    MeanSampling,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Self::Full, Self::NoLatentSampling, Self::NoFlux, Self::MeanSampling];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoLatentSampling => "no_latent_sampling",
            Self::NoFlux => "no_flux",
            Self::MeanSampling => "mean_sampling",
        }
    }

    fn configs(self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let (mut m, mut t) = (model.clone(), train.clone());
        match self {
            Self::NoLatentSampling => m.latent_sampling = false,
            Self::NoFlux => t.beta = 0.0,
            Self::Full | Self::MeanSampling => {}
        }
        (m, t)
    }

    fn sampling(self) -> LatentMode {
        match self {
            Self::MeanSampling => LatentMode::Mean,
            _ => LatentMode::Sample,
        }
    }

    /// Variants sharing a trained model reuse it.
    fn training_key(self) -> Self {
        match self {
            Self::MeanSampling => Self::Full,
            v => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    /// Losses of the last training step (`None` if training diverged).
    pub final_losses: Option<LossBreakdown>,
    pub finite: bool,
    /// Prompt frames plus generated frames.
    pub total_frames: usize,
    pub reference_frames: usize,
    /// Mean absolute error between generated and reference frames over their overlap.
    pub mel_l1: f64,
    pub stopped: bool,
    pub error: Option<String>,
}

impl AblationRow {
    pub fn frame_error_pct(&self) -> f64 {
        100.0 * (self.total_frames as f64 - self.reference_frames as f64) / self.reference_frames as f64
    }
}

pub const TABLE_HEADER: &str =
    "variant\ttrain_reg\ttrain_kl\ttrain_flux\ttrain_stop\ttrain_total\tfinite\tframes\tref_frames\tframe_err_pct\tmel_l1\tstopped";

/// Tab-separated comparison table, one row per variant.
pub fn format_table(rows: &[AblationRow]) -> String {
    let mut s = String::from(TABLE_HEADER);
    s.push('\n');
    for r in rows {
        let l = |f: fn(&LossBreakdown) -> f64| r.final_losses.as_ref().map_or("nan".into(), |b| format!("{:.4}", f(b)));
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.1}\t{:.4}\t{}\n",
            r.variant.name(),
            l(|b| b.reg),
            l(|b| b.kl),
            l(|b| b.flux),
            l(|b| b.stop),
            l(|b| b.total),
            r.finite,
            r.total_frames,
            r.reference_frames,
            r.frame_error_pct(),
            r.mel_l1,
            r.stopped
        ));
    }
    s
}

/// Prompt frames used when evaluating on a training utterance: a tenth of it, whole groups, at least one group.
pub fn eval_prompt_frames(frames: usize, r: usize) -> usize {
    (frames / 10 / r * r).max(r).min(frames / r * r)
}

fn train(model_cfg: ModelConfig, train_cfg: TrainConfig, data: &[Utterance]) -> Result<(Model<f32>, LossBreakdown)> {
    let mut t = Trainer::new(Model::new(model_cfg)?, train_cfg, data)?;
    let mut last = None;
    while !t.is_done() {
        last = Some(t.step()?.losses);
    }
    Ok((t.model, last.expect("at least one step")))
}

fn evaluate(model: &Model<f32>, utt: &Utterance, sampling: LatentMode, seed: u64) -> Result<(usize, f64, bool)> {
    let r = model.config.reduction_factor;
    let t = utt.mel.n_frames();
    let k = eval_prompt_frames(t, r);
    if k == 0 {
        return Err(MelleError::InvalidInput(format!("utterance {} is shorter than one group", utt.id)));
    }
    let req = SynthesisRequest {
        prompt_text: utt.tokens.clone(),
        prompt_mel: utt.mel.slice(0, k),
        target_text: utt.tokens.clone(),
        mode: PromptMode::Continuation,
        sampling,
        max_frames: None,
        seed,
    };
    let out = generate(&req, model)?;
    let reference: Tensor<f32> = utt.mel.to_tensor();
    let overlap = out.frame_count.min(t - k);
    let l1 = if overlap == 0 {
        f64::NAN
    } else {
        let gen = &out.mel.data()[..overlap * 80];
        let refd = &reference.data()[k * 80..(k + overlap) * 80];
        gen.iter().zip(refd).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / (overlap * 80) as f64
    };
    Ok((k + out.frame_count, l1, !out.truncated))
}

/// Train each requested variant on `data` and evaluate it on `data[0]`.
pub fn run_ablation(
    variants: &[Variant],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &[Utterance],
    mut on_variant: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let first = data.first().ok_or_else(|| MelleError::InvalidInput("no utterances for ablation".into()))?;
    let mut trained: Vec<(Variant, std::result::Result<(Model<f32>, LossBreakdown), String>)> = Vec::new();
    let mut rows = Vec::new();
    for &v in variants {
        let key = v.training_key();
        if !trained.iter().any(|(k, _)| *k == key) {
            let (m, t) = key.configs(model_cfg, train_cfg);
            log::info!("training variant {}", key.name());
            trained.push((key, train(m, t, data).map_err(|e| e.to_string())));
        }
        let (_, outcome) = trained.iter().find(|(k, _)| *k == key).expect("trained above");
        let row = match outcome {
            Ok((model, losses)) => match evaluate(model, first, v.sampling(), train_cfg.seed) {
                Ok((frames, l1, stopped)) => AblationRow {
                    variant: v,
                    final_losses: Some(*losses),
                    finite: losses.is_finite(),
                    total_frames: frames,
                    reference_frames: first.mel.n_frames(),
                    mel_l1: l1,
                    stopped,
                    error: None,
                },
                Err(e) => failed_row(v, Some(*losses), first, e.to_string()),
            },
            Err(e) => failed_row(v, None, first, e.clone()),
        };
        on_variant(&row);
        rows.push(row);
    }
    Ok(rows)
}

fn failed_row(v: Variant, losses: Option<LossBreakdown>, utt: &Utterance, error: String) -> AblationRow {
    AblationRow {
        variant: v,
        final_losses: losses,
        finite: false,
        total_frames: 0,
        reference_frames: utt.mel.n_frames(),
        mel_l1: f64::NAN,
        stopped: false,
        error: Some(error),
    }
}
