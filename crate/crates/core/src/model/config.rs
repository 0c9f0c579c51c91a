use crate::audio::N_MELS;
use crate::error::{MelleError, Result};

/// Architecture hyperparameters.
///
/// `desk()` is the CPU-trainable default; `full_scale()` carries the large
/// configuration (12 blocks, 16 heads, width 1024, FFN 4096) in the same schema.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    pub n_mels: usize,
    pub reduction_factor: usize,
    /// Longest acoustic sequence, in frames, the positional range must cover.
    pub max_frames: usize,
    pub max_text_tokens: usize,
    pub vocab_size: usize,
    pub prenet_dim: usize,
    /// Pre-net dropout; active in training and inference alike.
    pub prenet_dropout: f64,
    pub latent_hidden: usize,
    /// `false` replaces the Gaussian latent head with a plain linear projection (ablation).
    pub latent_sampling: bool,
    pub postnet_channels: usize,
    pub postnet_kernel: usize,
    pub postnet_layers: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ffn: 512,
            dropout: 0.1,
            n_mels: N_MELS,
            reduction_factor: 1,
            max_frames: 4000,
            max_text_tokens: 512,
            vocab_size: 64,
            prenet_dim: 128,
            prenet_dropout: 0.5,
            latent_hidden: 128,
            latent_sampling: true,
            postnet_channels: 256,
            postnet_kernel: 5,
            postnet_layers: 5,
            init_seed: 0,
        }
    }

    pub fn full_scale() -> Self {
        Self {
            n_layers: 12,
            n_heads: 16,
            d_model: 1024,
            d_ffn: 4096,
            prenet_dim: 1024,
            latent_hidden: 1024,
            ..Self::desk()
        }
    }

    /// Smallest useful configuration; used by gradient checks and fixtures.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_ffn: 32,
            dropout: 0.1,
            vocab_size,
            prenet_dim: 16,
            latent_hidden: 16,
            postnet_channels: 4,
            max_frames: 512,
            max_text_tokens: 64,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MelleError::Config(m));
        if self.n_mels != N_MELS {
            return bad(format!("n_mels must be {N_MELS}, got {}", self.n_mels));
        }
        if self.reduction_factor == 0 {
            return bad("reduction_factor must be >= 1".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.postnet_kernel.is_multiple_of(2) {
            return bad("postnet_kernel must be odd".into());
        }
        if self.postnet_layers < 2 {
            return bad("postnet_layers must be >= 2".into());
        }
        for (name, p) in [("dropout", self.dropout), ("prenet_dropout", self.prenet_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1), got {p}"));
            }
        }
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("d_ffn", self.d_ffn),
            ("vocab_size", self.vocab_size),
            ("prenet_dim", self.prenet_dim),
            ("latent_hidden", self.latent_hidden),
            ("postnet_channels", self.postnet_channels),
            ("max_frames", self.max_frames),
            ("max_text_tokens", self.max_text_tokens),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.vocab_size < 3 {
            return bad("vocab_size must cover the three reserved ids".into());
        }
        Ok(())
    }

    /// Width of one decoding step: `r · n_mels`.
    pub fn group_dim(&self) -> usize {
        self.reduction_factor * self.n_mels
    }

    /// Positions available to the concatenated `[text; acoustic]` sequence.
    pub fn max_positions(&self) -> usize {
        self.max_text_tokens + self.max_frames.div_ceil(self.reduction_factor) + 1
    }

    /// `(key, value)` pairs in a fixed order; the inverse of [`ModelConfig::set`].
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_layers", self.n_layers.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("d_model", self.d_model.to_string()),
            ("d_ffn", self.d_ffn.to_string()),
            ("dropout", self.dropout.to_string()),
            ("n_mels", self.n_mels.to_string()),
            ("reduction_factor", self.reduction_factor.to_string()),
            ("max_frames", self.max_frames.to_string()),
            ("max_text_tokens", self.max_text_tokens.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("prenet_dim", self.prenet_dim.to_string()),
            ("prenet_dropout", self.prenet_dropout.to_string()),
            ("latent_hidden", self.latent_hidden.to_string()),
            ("latent_sampling", self.latent_sampling.to_string()),
            ("postnet_channels", self.postnet_channels.to_string()),
            ("postnet_kernel", self.postnet_kernel.to_string()),
            ("postnet_layers", self.postnet_layers.to_string()),
            ("init_seed", self.init_seed.to_string()),
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
            "n_layers" => self.n_layers = p(key, value)?,
            "n_heads" => self.n_heads = p(key, value)?,
            "d_model" => self.d_model = p(key, value)?,
            "d_ffn" => self.d_ffn = p(key, value)?,
            "dropout" => self.dropout = p(key, value)?,
            "n_mels" => self.n_mels = p(key, value)?,
            "reduction_factor" => self.reduction_factor = p(key, value)?,
            "max_frames" => self.max_frames = p(key, value)?,
            "max_text_tokens" => self.max_text_tokens = p(key, value)?,
            "vocab_size" => self.vocab_size = p(key, value)?,
            "prenet_dim" => self.prenet_dim = p(key, value)?,
            "prenet_dropout" => self.prenet_dropout = p(key, value)?,
            "latent_hidden" => self.latent_hidden = p(key, value)?,
            "latent_sampling" => self.latent_sampling = p(key, value)?,
            "postnet_channels" => self.postnet_channels = p(key, value)?,
            "postnet_kernel" => self.postnet_kernel = p(key, value)?,
            "postnet_layers" => self.postnet_layers = p(key, value)?,
            "init_seed" => self.init_seed = p(key, value)?,
            _ => return Err(MelleError::Config(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }

    /// `key=value` lines, in [`ModelConfig::to_pairs`] order.
    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MelleError::Config(format!("malformed line {line:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::full_scale().validate().unwrap();
        ModelConfig::tiny(10).validate().unwrap();
        let p = ModelConfig::full_scale();
        assert_eq!((p.n_layers, p.n_heads, p.d_model, p.d_ffn), (12, 16, 1024, 4096));
        assert_eq!(p.dropout, 0.1);
        let d = ModelConfig::desk();
        assert_eq!((d.n_layers, d.n_heads, d.d_model, d.d_ffn), (4, 4, 128, 512));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = ModelConfig::desk();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.reduction_factor = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.n_mels = 64;
        assert!(c.validate().is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = ModelConfig::tiny(17);
        c.reduction_factor = 4;
        c.latent_sampling = false;
        assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
        assert!(ModelConfig::from_text("bogus=1\n").is_err());
    }
}
