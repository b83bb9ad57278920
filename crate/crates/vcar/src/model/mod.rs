//! Tiny decoder-only multimodal transformer.
//!
//! Scene cells are projected into prefix embeddings that precede all text
//! tokens; causal self-attention runs over the combined sequence and a
//! vocabulary head predicts the next text token. Adapter deltas are applied
//! on the fly to the configured attention projections.

mod decode;
mod forward;
pub mod vocab;

pub use decode::{generate_greedy, Decoder, Generation};
pub use forward::{
    bind_model, encode_scene, encode_scene_on_tape, forward, forward_on_tape,
    full_model_fd_check, scene_features, BoundModel, LN_EPS, SCENE_FEATURE_DIM,
};
pub use vocab::Vocab;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NumericsError, Scalar, Tensor};
use crate::taskgen::{fnv64, splitmix64};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("vocabulary corpus is empty")]
    EmptyCorpus,
    #[error("unknown word {0:?} (closed-world violation: template and vocab diverged)")]
    UnknownWord(String),
    #[error("context overflow: need {need} positions, context_len is {have}")]
    ContextOverflow { need: usize, have: usize },
    #[error("scene grid {scene_rows}x{scene_cols} does not match configured {cfg_rows}x{cfg_cols}")]
    SceneGridMismatch { scene_rows: u8, scene_cols: u8, cfg_rows: u8, cfg_cols: u8 },
    #[error("model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    pub grid_rows: u8,
    pub grid_cols: u8,
    /// Feed-forward width as a multiple of d_model.
    pub ff_mult: usize,
    /// Projection names that receive adapter deltas.
    pub injection_targets: Vec<String>,
}

impl ModelConfig {
    /// Default toy configuration; the grid matches the default generator.
    pub fn toy(vocab_size: usize) -> Self {
        Self::with_dims(128, 4, 4, 320, vocab_size, 4, 4)
    }

    /// Small configuration for fast tests.
    pub fn tiny(vocab_size: usize) -> Self {
        Self::with_dims(16, 1, 2, 96, vocab_size, 2, 2)
    }

    pub fn with_dims(
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        context_len: usize,
        vocab_size: usize,
        grid_rows: u8,
        grid_cols: u8,
    ) -> Self {
        let injection_targets = (0..n_layers)
            .flat_map(|i| {
                [format!("layers.{}.attn.wq", i), format!("layers.{}.attn.wv", i)]
            })
            .collect();
        ModelConfig {
            d_model,
            n_layers,
            n_heads,
            context_len,
            vocab_size,
            grid_rows,
            grid_cols,
            ff_mult: 4,
            injection_targets,
        }
    }

    pub fn grid_cells(&self) -> usize {
        self.grid_rows as usize * self.grid_cols as usize
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ff_dim(&self) -> usize {
        self.d_model * self.ff_mult
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.context_len < self.grid_cells() + 16 {
            return Err(ModelError::InvalidConfig(format!(
                "context_len {} leaves no room for text after {} prefix cells",
                self.context_len,
                self.grid_cells()
            )));
        }
        if self.vocab_size == 0 || self.n_layers == 0 {
            return Err(ModelError::InvalidConfig("empty model".into()));
        }
        for t in &self.injection_targets {
            if !t.contains(".attn.") {
                return Err(ModelError::InvalidConfig(format!(
                    "injection target {} is not an attention projection",
                    t
                )));
            }
        }
        Ok(())
    }
}

/// Named base parameters. Adapter deltas live in their own sets, never here.
#[derive(Debug, Clone)]
pub struct ModelParams<S: Scalar> {
    pub config: ModelConfig,
    tensors: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ModelParams<S> {
    /// Seeded Gaussian init (std 0.02), layer-norm gains at one.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d_model;
        let mut tensors = BTreeMap::new();
        fn gaussian<S: Scalar>(name: &str, shape: Vec<usize>, seed: u64) -> Tensor<S> {
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ fnv64(name.as_bytes())));
            Tensor::randn(shape, 0.02, &mut rng)
        }
        fn ones<S: Scalar>(d: usize) -> Tensor<S> {
            let mut t = Tensor::zeros(vec![d]);
            for v in t.data_mut() {
                *v = S::one();
            }
            t
        }
        let add = |tensors: &mut BTreeMap<String, Tensor<S>>, name: &str, shape: Vec<usize>| {
            tensors.insert(name.to_string(), gaussian(name, shape, seed));
        };
        add(&mut tensors, "tok_emb", vec![config.vocab_size, d]);
        add(&mut tensors, "pos_emb", vec![config.context_len, d]);
        add(&mut tensors, "scene_proj", vec![d, forward::SCENE_FEATURE_DIM]);
        for i in 0..config.n_layers {
            for proj in ["wq", "wk", "wv", "wo"] {
                add(&mut tensors, &format!("layers.{}.attn.{}", i, proj), vec![d, d]);
            }
            add(&mut tensors, &format!("layers.{}.ff.w1", i), vec![config.ff_dim(), d]);
            add(&mut tensors, &format!("layers.{}.ff.w2", i), vec![d, config.ff_dim()]);
            for ln in ["ln1", "ln2"] {
                tensors.insert(format!("layers.{}.{}.gain", i, ln), ones(d));
                tensors.insert(format!("layers.{}.{}.bias", i, ln), Tensor::zeros(vec![d]));
            }
        }
        tensors.insert("ln_f.gain".into(), ones(d));
        tensors.insert("ln_f.bias".into(), Tensor::zeros(vec![d]));
        add(&mut tensors, "head", vec![config.vocab_size, d]);
        Ok(ModelParams { config: config.clone(), tensors })
    }

    pub fn from_tensors(
        config: ModelConfig,
        tensors: BTreeMap<String, Tensor<S>>,
    ) -> Self {
        ModelParams { config, tensors }
    }

    pub fn get(&self, name: &str) -> &Tensor<S> {
        &self.tensors[name]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<S> {
        self.tensors.get_mut(name).expect("unknown parameter")
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<S>> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor<S>> {
        &mut self.tensors
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_validated() {
        let cfg = ModelConfig::tiny(50);
        let a = ModelParams::<f32>::init(&cfg, 7).unwrap();
        let b = ModelParams::<f32>::init(&cfg, 7).unwrap();
        for (name, t) in a.tensors() {
            assert_eq!(t.data(), b.get(name).data(), "{}", name);
        }
        let bad = ModelConfig { n_heads: 3, ..cfg };
        assert!(ModelParams::<f32>::init(&bad, 7).is_err());
    }

    #[test]
    fn injection_targets_exist_in_params() {
        let cfg = ModelConfig::toy(100);
        let params = ModelParams::<f32>::init(&cfg, 1).unwrap();
        for t in &cfg.injection_targets {
            assert!(params.tensors().contains_key(t), "{}", t);
        }
        assert_eq!(cfg.injection_targets.len(), 2 * cfg.n_layers);
    }
}
