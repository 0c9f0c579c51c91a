use std::collections::BTreeMap;

use super::config::ModelConfig;
use crate::autodiff::{gaussian_draw, Graph, Real, RngState, Tensor, Var};

/// Named parameter tensors, iterated in sorted name order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Place every tensor on `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), g.leaf(v.clone(), requires_grad)))
                .collect(),
        }
    }

    /// Zero every tensor whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (k, v) in self.tensors.iter_mut() {
            if k.starts_with(prefix) {
                v.data_mut().iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }

    /// Freshly initialized parameters for `cfg`, deterministic in `cfg.init_seed`.
    ///
    /// Weights are `N(0, 1/fan_in)`, biases and layer-norm shifts zero,
    /// layer-norm gains one, text embeddings `N(0, 1)`.
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut s = Self::default();
        let root = RngState::new(cfg.init_seed);
        let d = cfg.d_model;
        let gd = cfg.group_dim();
        let linear = |s: &mut Self, name: &str, fan_in: usize, fan_out: usize| {
            let mut rng = root.split_named(name);
            let w: Tensor<T> = gaussian_draw(&mut rng, &[fan_in, fan_out]);
            let std = T::c(1.0 / (fan_in as f64).sqrt());
            s.insert(format!("{name}.w"), w.map(|x| x * std));
            s.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        };

        let mut emb_rng = root.split_named("text_emb");
        s.insert("text_emb", gaussian_draw(&mut emb_rng, &[cfg.vocab_size, d]));

        linear(&mut s, "prenet.0", gd, cfg.prenet_dim);
        linear(&mut s, "prenet.1", cfg.prenet_dim, cfg.prenet_dim);
        linear(&mut s, "prenet.2", cfg.prenet_dim, d);

        for l in 0..cfg.n_layers {
            let p = format!("dec.{l}");
            for ln in ["ln1", "ln2"] {
                s.insert(format!("{p}.{ln}.g"), Tensor::full(&[d], T::one()));
                s.insert(format!("{p}.{ln}.b"), Tensor::zeros(&[d]));
            }
            for m in ["q", "k", "v", "o"] {
                linear(&mut s, &format!("{p}.attn.{m}"), d, d);
            }
            linear(&mut s, &format!("{p}.ffn.0"), d, cfg.d_ffn);
            linear(&mut s, &format!("{p}.ffn.1"), cfg.d_ffn, d);
        }
        s.insert("final_ln.g", Tensor::full(&[d], T::one()));
        s.insert("final_ln.b", Tensor::zeros(&[d]));

        let latent_out = if cfg.latent_sampling { 2 * gd } else { gd };
        linear(&mut s, "latent", d, latent_out);
        linear(&mut s, "latent_mlp.0", gd, cfg.latent_hidden);
        linear(&mut s, "latent_mlp.1", cfg.latent_hidden, cfg.latent_hidden);
        linear(&mut s, "latent_mlp.2", cfg.latent_hidden, gd);

        linear(&mut s, "stop", d, 1);

        let k = cfg.postnet_kernel;
        for i in 0..cfg.postnet_layers {
            let cin = if i == 0 { cfg.n_mels } else { cfg.postnet_channels };
            let cout = if i + 1 == cfg.postnet_layers {
                cfg.n_mels
            } else {
                cfg.postnet_channels
            };
            linear(&mut s, &format!("postnet.{i}"), k * cin, cout);
        }
        s
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Handles for parameters placed on a graph by other means (e.g. as gradient-check inputs).
    pub fn from_vars<S: Into<String>>(vars: impl IntoIterator<Item = (S, Var)>) -> Self {
        Self {
            vars: vars.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} is not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
