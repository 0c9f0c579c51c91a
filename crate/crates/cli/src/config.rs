//! Run configuration: a sectioned `key = value` file plus command-line overrides.
//!
//! [`SCHEMA`] is the single list of recognised keys. Config files are
//! validated against it and every command derives its `--flag`s from it, so
//! the two cannot drift apart.

use std::collections::BTreeSet;

use melle_core::model::{LatentMode, ModelConfig};
use melle_core::synth::PromptMode;
use melle_core::trainer::TrainConfig;
use melle_core::{MelleError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Section {
    Run,
    Model,
    Train,
    Synth,
}

impl Section {
    pub fn name(self) -> &'static str {
        match self {
            Self::Run => "run",
            Self::Model => "model",
            Self::Train => "train",
            Self::Synth => "synth",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [Self::Run, Self::Model, Self::Train, Self::Synth]
            .into_iter()
            .find(|x| x.name() == s)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub section: Section,
    pub key: &'static str,
    pub help: &'static str,
}

impl KeySpec {
    /// `--key-name` form of the key (underscores become dashes).
    pub fn flag(&self) -> String {
        self.key.replace('_', "-")
    }
}

macro_rules! keys {
    ($($section:ident $key:literal => $help:literal,)*) => {
        &[$(KeySpec { section: Section::$section, key: $key, help: $help },)*]
    };
}

pub const SCHEMA: &[KeySpec] = keys! {
    Run "seed" => "Global seed for data order, dropout, latent noise and vocoder phase [env: MELLE_SEED]",
    Model "n_layers" => "Transformer blocks",
    Model "n_heads" => "Attention heads",
    Model "d_model" => "Hidden width",
    Model "d_ffn" => "Feed-forward width",
    Model "dropout" => "Decoder and post-net dropout rate",
    Model "n_mels" => "Mel bands (fixed at 80)",
    Model "reduction_factor" => "Frames predicted per decoding step",
    Model "max_frames" => "Longest acoustic sequence the positional range covers",
    Model "max_text_tokens" => "Longest token sequence the positional range covers",
    Model "prenet_dim" => "Pre-net width",
    Model "prenet_dropout" => "Pre-net dropout rate (always active)",
    Model "latent_hidden" => "Hidden width of the latent refinement MLP",
    Model "latent_sampling" => "Use the Gaussian latent sampling head (false: plain linear head)",
    Model "postnet_channels" => "Post-net channels",
    Model "postnet_kernel" => "Post-net kernel size (odd)",
    Model "postnet_layers" => "Post-net convolution layers",
    Model "init_seed" => "Parameter initialisation seed",
    Train "steps" => "Optimizer steps",
    Train "batch_frames" => "Real frames per batch",
    Train "peak_lr" => "Peak learning rate",
    Train "warmup_steps" => "Linear warm-up steps (must be < steps)",
    Train "lambda_breakpoint" => "Step from which the KL weight is active",
    Train "lambda" => "KL weight after the breakpoint",
    Train "beta" => "Spectrogram flux loss weight",
    Train "gamma" => "Stop loss weight",
    Train "weight_decay" => "AdamW decoupled weight decay",
    Train "grad_clip" => "Global gradient-norm clip (0 disables)",
    Train "checkpoint_interval" => "Steps between checkpoints (0: final only)",
    Synth "mode" => "Prompting scheme: continuation or cross_sentence",
    Synth "sampling" => "Latent decoding: sample or mean",
    Synth "n_samples" => "Candidates to generate; the best by stop margin is kept",
    Synth "max_frames_out" => "Frame budget for generation (0: 20 x token count)",
    Synth "griffin_lim_iters" => "Griffin-Lim iterations",
};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSettings {
    pub mode: PromptMode,
    pub sampling: LatentMode,
    pub n_samples: usize,
    pub max_frames_out: usize,
    pub griffin_lim_iters: usize,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            mode: PromptMode::Continuation,
            sampling: LatentMode::Sample,
            n_samples: 1,
            max_frames_out: 0,
            griffin_lim_iters: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthSettings,
    explicit: BTreeSet<(Section, &'static str)>,
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| MelleError::Config(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    /// Built-in defaults; `seed` comes from `MELLE_SEED` when set.
    pub fn new(model: ModelConfig) -> Result<Self> {
        let mut c = Self {
            seed: 0,
            model,
            train: TrainConfig::default(),
            synth: SynthSettings::default(),
            explicit: BTreeSet::new(),
        };
        if let Ok(s) = std::env::var("MELLE_SEED") {
            c.seed = parse("MELLE_SEED", &s)?;
        }
        c.train.seed = c.seed;
        Ok(c)
    }

    pub fn spec(section: Section, key: &str) -> Option<&'static KeySpec> {
        SCHEMA.iter().find(|s| s.section == section && s.key == key)
    }

    pub fn set(&mut self, section: Section, key: &str, value: &str) -> Result<()> {
        let spec = Self::spec(section, key)
            .ok_or_else(|| MelleError::Config(format!("unknown key `{key}` in section [{}]", section.name())))?;
        match section {
            Section::Run => {
                self.seed = parse(key, value)?;
                self.train.seed = self.seed;
            }
            Section::Model => self.model.set(key, value)?,
            Section::Train => self.train.set(key, value)?,
            Section::Synth => match key {
                "mode" => self.synth.mode = value.trim().parse()?,
                "sampling" => self.synth.sampling = value.trim().parse()?,
                "n_samples" => self.synth.n_samples = parse(key, value)?,
                "max_frames_out" => self.synth.max_frames_out = parse(key, value)?,
                "griffin_lim_iters" => self.synth.griffin_lim_iters = parse(key, value)?,
                _ => unreachable!("schema and setter disagree on {key}"),
            },
        }
        self.explicit.insert((section, spec.key));
        Ok(())
    }

    /// Apply a sectioned config file.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| MelleError::Config(format!("config line {}: {m}", n + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(Section::parse(name.trim()).ok_or_else(|| err(format!("unknown section [{name}]")))?);
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            let s = section.ok_or_else(|| err("key outside of any [section]".into()))?;
            self.set(s, k.trim(), v).map_err(|e| match e {
                MelleError::Config(m) => err(m),
                other => err(other.to_string()),
            })?;
        }
        Ok(())
    }

    /// Model keys set explicitly through a file or flag.
    pub fn explicit_model_keys(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.explicit
            .iter()
            .filter(|(s, _)| *s == Section::Model)
            .map(|(_, k)| *k)
    }

    /// Every schema key with its current value, as a config file.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let model = self.model.to_pairs();
        let train = self.train.to_pairs();
        let mut current = None;
        for spec in SCHEMA {
            if current != Some(spec.section) {
                if current.is_some() {
                    out.push('\n');
                }
                out.push_str(&format!("[{}]\n", spec.section.name()));
                current = Some(spec.section);
            }
            let value = match spec.section {
                Section::Run => self.seed.to_string(),
                Section::Model => lookup(&model, spec.key),
                Section::Train => lookup(&train, spec.key),
                Section::Synth => match spec.key {
                    "mode" => self.synth.mode.as_str().to_string(),
                    "sampling" => match self.synth.sampling {
                        LatentMode::Sample => "sample".into(),
                        LatentMode::Mean => "mean".into(),
                    },
                    "n_samples" => self.synth.n_samples.to_string(),
                    "max_frames_out" => self.synth.max_frames_out.to_string(),
                    "griffin_lim_iters" => self.synth.griffin_lim_iters.to_string(),
                    _ => unreachable!(),
                },
            };
            out.push_str(&format!("{} = {}\n", spec.key, value));
        }
        out
    }
}

fn lookup(pairs: &[(&'static str, String)], key: &str) -> String {
    pairs
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| v.clone())
        .unwrap_or_else(|| panic!("schema key {key} missing from config pairs"))
}
