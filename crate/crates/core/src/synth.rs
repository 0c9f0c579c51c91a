//! Prompted autoregressive inference.
//!
//! Each decoding step rebuilds the graph over `[text; begin; prompt groups;
//! generated groups]` and reads the latent and stop heads at the last
//! position. Generation ends when the stop probability exceeds 0.5 (that
//! step's frames are kept) or the frame budget runs out. The post-net runs
//! once over the generated frames; prompt frames are never part of the output.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::audio::{
    encode_melf, griffin_lim_with, save_wav, write_melf, AudioSignal, GriffinLimOptions, MelSpectrogram, FRAME_RATE,
    HOP_LENGTH, N_FFT,
};
use crate::autodiff::{Graph, RngState, Tensor};
use crate::error::{MelleError, Result};
use crate::model::{
    decoder_forward, latent_sample, latent_to_frame, postnet, prenet_forward, stop_logit, text_embed, ForwardOptions,
    LatentMode, Model,
};
use crate::tokenizer::TokenSequence;
use crate::trainer::partition_reduction;

/// Length of the continuation prompt.
pub const CONTINUATION_PROMPT_SECS: f64 = 3.0;
pub const STOP_THRESHOLD: f64 = 0.5;
/// Default frame budget per input token.
pub const MAX_FRAMES_PER_TOKEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptMode {
    /// Prompt audio is the opening of the utterance whose full transcript is the target text.
    Continuation,
    /// Prompt audio and text come from a separate reference utterance.
    CrossSentence,
}

impl std::str::FromStr for PromptMode {
    type Err = MelleError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continuation" => Ok(Self::Continuation),
            "cross_sentence" | "cross-sentence" => Ok(Self::CrossSentence),
            _ => Err(MelleError::InvalidInput(format!(
                "mode must be `continuation` or `cross_sentence`, got {s:?}"
            ))),
        }
    }
}

impl PromptMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Continuation => "continuation",
            Self::CrossSentence => "cross_sentence",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisRequest {
    /// Transcript of the prompt audio (used in cross-sentence mode).
    pub prompt_text: TokenSequence,
    pub prompt_mel: MelSpectrogram,
    pub target_text: TokenSequence,
    pub mode: PromptMode,
    pub sampling: LatentMode,
    /// Defaults to [`MAX_FRAMES_PER_TOKEN`] × the assembled token count.
    pub max_frames: Option<usize>,
    pub seed: u64,
}

impl SynthesisRequest {
    /// Stable digest of everything but the seed.
    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.mode.as_str());
        h.update(match self.sampling {
            LatentMode::Sample => "sample",
            LatentMode::Mean => "mean",
        });
        for ids in [self.prompt_text.ids(), self.target_text.ids()] {
            h.update((ids.len() as u64).to_le_bytes());
            for &i in ids {
                h.update((i as u64).to_le_bytes());
            }
        }
        h.update(encode_melf(&self.prompt_mel));
        h.update(self.max_frames.map_or(u64::MAX, |m| m as u64).to_le_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Decoder text input and acoustic prefix (`P × r·80`, whole groups only).
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledPrompt {
    pub tokens: Vec<usize>,
    pub prefix: Tensor<f32>,
    /// Prompt frames actually used (`P · r`).
    pub prefix_frames: usize,
}

pub fn assemble_prompt(req: &SynthesisRequest, r: usize) -> Result<AssembledPrompt> {
    if req.prompt_mel.n_frames() == 0 {
        return Err(MelleError::InvalidInput("prompt audio is empty".into()));
    }
    if req.target_text.content().is_empty() {
        return Err(MelleError::InvalidInput("target text is empty".into()));
    }
    let (tokens, frames) = match req.mode {
        PromptMode::Continuation => {
            let keep = ((CONTINUATION_PROMPT_SECS * FRAME_RATE).ceil() as usize).min(req.prompt_mel.n_frames());
            (req.target_text.ids().to_vec(), keep)
        }
        PromptMode::CrossSentence => {
            if req.prompt_text.content().is_empty() {
                return Err(MelleError::InvalidInput("prompt text is empty".into()));
            }
            (req.prompt_text.concat(&req.target_text).ids().to_vec(), req.prompt_mel.n_frames())
        }
    };
    let usable = frames / r * r;
    if usable == 0 {
        return Err(MelleError::InvalidInput(format!(
            "prompt of {frames} frames is shorter than one group of {r}"
        )));
    }
    let prefix = partition_reduction(&req.prompt_mel.slice(0, usable).to_tensor::<f32>(), r)?.groups;
    Ok(AssembledPrompt {
        tokens,
        prefix,
        prefix_frames: usable,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisResult {
    /// Post-net output `y″`.
    pub mel: MelSpectrogram,
    /// Coarse frames `y′` before the post-net.
    pub coarse: MelSpectrogram,
    pub frame_count: usize,
    /// Decoding step (1-based) at which the stop head fired.
    pub stop_step: Option<usize>,
    pub stop_probs: Vec<f64>,
    pub truncated: bool,
    pub decode_steps: usize,
    pub seed: u64,
}

/// Autoregressive generation for one request.
pub fn generate(req: &SynthesisRequest, model: &Model<f32>) -> Result<SynthesisResult> {
    let cfg = &model.config;
    let r = cfg.reduction_factor;
    let gd = cfg.group_dim();
    let prompt = assemble_prompt(req, r)?;
    let p = prompt.prefix.rows();
    let max_frames = req.max_frames.unwrap_or(MAX_FRAMES_PER_TOKEN * prompt.tokens.len());
    if max_frames == 0 {
        return Err(MelleError::InvalidInput("max_frames must be positive".into()));
    }
    let fixed = prompt.tokens.len() + 1 + p;
    if fixed > cfg.max_positions() {
        return Err(MelleError::InvalidInput(format!(
            "prompt needs {fixed} positions, model supports {}",
            cfg.max_positions()
        )));
    }
    let max_steps = max_frames.div_ceil(r).min(cfg.max_positions() - fixed + 1);

    let opts = ForwardOptions::inference(req.sampling, RngState::new(req.seed));
    let (prenet_rng, latent_rng) = (opts.stream("prenet"), opts.stream("latent"));
    let mut inputs: Vec<f32> = vec![0.0; gd];
    inputs.extend_from_slice(prompt.prefix.data());
    let mut generated: Vec<f32> = Vec::new();
    let mut stop_probs = Vec::new();
    let mut stop_step = None;
    for k in 0..max_steps {
        let rows = 1 + p + k;
        let mut g = Graph::new();
        let b = model.params.bind(&mut g, false);
        let text = text_embed(&mut g, &b, cfg, &prompt.tokens, &opts)?;
        let x = g.constant(Tensor::new(&[rows, gd], inputs.clone())?);
        let mel = prenet_forward(&mut g, &b, cfg, x, &prenet_rng, 0);
        let e = decoder_forward(&mut g, &b, cfg, text, mel, &opts)?;
        let last = g.slice_rows(e, rows - 1, rows);
        let lat = latent_sample(&mut g, &b, cfg, last, req.sampling, &latent_rng, rows - 1);
        let y = latent_to_frame(&mut g, &b, lat.z);
        let s = stop_logit(&mut g, &b, last);
        let frame = g.value(y).data();
        if !frame.iter().all(|v| v.is_finite()) {
            return Err(MelleError::Numeric {
                context: format!("non-finite frame at decoding step {}", k + 1),
            });
        }
        let prob = 1.0 / (1.0 + (-(g.value(s).item() as f64)).exp());
        generated.extend_from_slice(frame);
        inputs.extend_from_slice(frame);
        stop_probs.push(prob);
        if prob > STOP_THRESHOLD {
            stop_step = Some(k + 1);
            break;
        }
    }
    let decode_steps = stop_probs.len();
    let frame_count = (decode_steps * r).min(max_frames);
    generated.truncate(frame_count * cfg.n_mels);

    let mut g = Graph::new();
    let b = model.params.bind(&mut g, false);
    let yp = g.constant(Tensor::new(&[frame_count, cfg.n_mels], generated.clone())?);
    let ypp = postnet(&mut g, &b, cfg, yp, &opts);
    g.check_finite()?;
    Ok(SynthesisResult {
        mel: MelSpectrogram::new(frame_count, g.value(ypp).data().to_vec())?,
        coarse: MelSpectrogram::new(frame_count, generated)?,
        frame_count,
        stop_step,
        stop_probs,
        truncated: stop_step.is_none(),
        decode_steps,
        seed: req.seed,
    })
}

/// Mean distance of the per-step stop probabilities from the 0.5 threshold.
pub fn stop_margin_score(r: &SynthesisResult) -> f64 {
    if r.stop_probs.is_empty() {
        return 0.0;
    }
    r.stop_probs.iter().map(|p| (p - STOP_THRESHOLD).abs()).sum::<f64>() / r.stop_probs.len() as f64
}

/// Winner of a [`multi_sample`] run.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiSampleOutcome {
    pub best: SynthesisResult,
    pub best_index: usize,
    /// Score per sample; `None` where generation failed.
    pub scores: Vec<Option<f64>>,
}

/// `n` generations with seeds `seed, seed+1, …`; returns the highest-scoring
/// one, ties going to the lowest index. Fails only if every sample fails.
pub fn multi_sample(
    req: &SynthesisRequest,
    model: &Model<f32>,
    n: usize,
    scorer: &(dyn Fn(&SynthesisResult) -> f64 + Sync),
) -> Result<MultiSampleOutcome> {
    if n == 0 {
        return Err(MelleError::InvalidInput("n_samples must be >= 1".into()));
    }
    let results: Vec<Result<SynthesisResult>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let mut rq = req.clone();
            rq.seed = req.seed.wrapping_add(k as u64);
            generate(&rq, model)
        })
        .collect();
    let scores: Vec<Option<f64>> = results.iter().map(|r| r.as_ref().ok().map(scorer)).collect();
    let mut best: Option<(usize, f64)> = None;
    for (k, s) in scores.iter().enumerate() {
        if let Some(s) = *s {
            let s = if s.is_nan() { f64::NEG_INFINITY } else { s };
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((k, s));
            }
        }
    }
    match best {
        Some((k, _)) => {
            let best = results.into_iter().nth(k).expect("index in range")?;
            Ok(MultiSampleOutcome {
                best,
                best_index: k,
                scores,
            })
        }
        None => Err(results.into_iter().find_map(|r| r.err()).expect("all samples failed")),
    }
}

/// One JSON-lines record per synthesized file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthesisReport {
    pub request_hash: String,
    pub seed: u64,
    pub frame_count: usize,
    pub stop_step: Option<usize>,
    pub truncated: bool,
    pub score: f64,
}

impl SynthesisReport {
    pub fn new(req: &SynthesisRequest, result: &SynthesisResult, score: f64) -> Self {
        Self {
            request_hash: req.hash_hex(),
            seed: result.seed,
            frame_count: result.frame_count,
            stop_step: result.stop_step,
            truncated: result.truncated,
            score,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Vocode `result` with Griffin-Lim, write the WAV and a `.melf` sidecar next to it.
///
/// The vocoder's output overhangs the frames by `N_FFT - HOP_LENGTH` samples
/// of window taper; half is trimmed from each end so the file lasts exactly
/// `frame_count · HOP_LENGTH` samples.
pub fn render_to_wav(result: &SynthesisResult, gl: GriffinLimOptions, wav_path: &Path) -> Result<AudioSignal> {
    let full = griffin_lim_with(&result.mel, gl)?;
    let edge = (N_FFT - HOP_LENGTH) / 2;
    let audio = AudioSignal::new(
        full.samples[edge..edge + result.frame_count * HOP_LENGTH].to_vec(),
        full.sample_rate,
    );
    save_wav(wav_path, &audio)?;
    write_melf(wav_path.with_extension("melf"), &result.mel)?;
    Ok(audio)
}

/// [`generate`] followed by [`render_to_wav`].
pub fn synthesize_to_wav(
    req: &SynthesisRequest,
    model: &Model<f32>,
    gl: GriffinLimOptions,
    wav_path: &Path,
) -> Result<(SynthesisResult, AudioSignal)> {
    let result = generate(req, model)?;
    let audio = render_to_wav(&result, gl, wav_path)?;
    Ok((result, audio))
}
