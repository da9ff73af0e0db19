//! Model configuration, parameter initialization, and checkpoints.
//!
//! Pre-norm decoder-only transformer with RMS normalization, per-head
//! attention projections, learned absolute position embeddings, and no
//! biases. The norm / activation / attention kinds can each be swapped for
//! a degenerate variant, which turns the network into a fully linear map —
//! used as the analytic surrogate when validating attribution machinery.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{fnv1a, SeedStreams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    Rms,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActKind {
    #[default]
    Gelu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnKind {
    #[default]
    Softmax,
    /// Input-independent row-stochastic causal patterns derived from the
    /// seed. Makes the whole network linear in its activations.
    FixedRandom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    #[serde(default)]
    pub norm: NormKind,
    #[serde(default)]
    pub activation: ActKind,
    #[serde(default)]
    pub attention: AttnKind,
}

impl ModelConfig {
    /// The standard subject model: 2 layers, 4 heads, d_model 64, over the
    /// shared vocabulary, sized to fit every template.
    pub fn desk(seed: u64) -> ModelConfig {
        let max_len = crate::dataset::Operation::ALL
            .iter()
            .flat_map(|&op| crate::dataset::Template::all(op))
            .map(|t| t.token_len())
            .max()
            .unwrap();
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_head: 16,
            d_mlp: 128,
            vocab_size: crate::tokenizer::Vocab::shared().len(),
            max_seq_len: max_len,
            seed,
            norm: NormKind::Rms,
            activation: ActKind::Gelu,
            attention: AttnKind::Softmax,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::InvalidConfig(format!(
                "d_model {} must equal n_heads {} × d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Shapes and canonical order of every parameter tensor.
pub fn param_specs(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let mut specs = vec![
        ("embed".to_string(), vec![config.vocab_size, d]),
        ("pos_embed".to_string(), vec![config.max_seq_len, d]),
    ];
    for l in 0..config.n_layers {
        specs.push((format!("layer{l}.attn_norm"), vec![d]));
        for h in 0..config.n_heads {
            specs.push((format!("layer{l}.head{h}.wq"), vec![d, config.d_head]));
            specs.push((format!("layer{l}.head{h}.wk"), vec![d, config.d_head]));
            specs.push((format!("layer{l}.head{h}.wv"), vec![d, config.d_head]));
            specs.push((format!("layer{l}.head{h}.wo"), vec![config.d_head, d]));
        }
        specs.push((format!("layer{l}.mlp_norm"), vec![d]));
        specs.push((format!("layer{l}.w_in"), vec![d, config.d_mlp]));
        specs.push((format!("layer{l}.w_out"), vec![config.d_mlp, d]));
    }
    specs.push(("final_norm".to_string(), vec![config.d_model]));
    specs.push(("unembed".to_string(), vec![config.d_model, config.vocab_size]));
    specs
}

#[derive(Debug, Clone)]
pub struct Parameters {
    pub config: ModelConfig,
    tensors: BTreeMap<String, Arc<Tensor>>,
}

impl Parameters {
    pub fn get(&self, name: &str) -> &Arc<Tensor> {
        &self.tensors[name]
    }

    pub fn tensors(&self) -> &BTreeMap<String, Arc<Tensor>> {
        &self.tensors
    }

    /// Functional update: returns new parameters with replaced tensors.
    pub fn with_tensors(&self, tensors: BTreeMap<String, Arc<Tensor>>) -> Parameters {
        Parameters { config: self.config.clone(), tensors }
    }

    /// Stable hash of config plus every parameter bit, in canonical order.
    pub fn fingerprint(&self) -> String {
        let mut bytes = serde_json::to_vec(&self.config).expect("config serializes");
        for (name, _) in param_specs(&self.config) {
            bytes.extend_from_slice(name.as_bytes());
            for &v in self.tensors[&name].data() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        format!("{:016x}", fnv1a(&bytes))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.as_ref().clone()))
                .collect(),
        };
        crate::report::write_atomic(path, &serde_json::to_vec(&ckpt)?)
    }

    pub fn load(path: &Path) -> Result<Parameters> {
        let ckpt: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        ckpt.config.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in param_specs(&ckpt.config) {
            let t = ckpt
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            t.check_finite("checkpoint")?;
            tensors.insert(name, Arc::new(t.clone()));
        }
        Ok(Parameters { config: ckpt.config, tensors })
    }
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

const EMBED_STD: f64 = 0.05;

/// Initializes parameters from scaled normal draws. Each tensor draws from
/// its own named stream of the config seed, so values do not depend on
/// construction order.
pub fn init_model(config: &ModelConfig) -> Result<Parameters> {
    config.validate()?;
    let streams = SeedStreams::new(config.seed);
    let proj_std = 1.0 / (config.d_model as f64).sqrt();
    let mut tensors = BTreeMap::new();
    for (name, shape) in param_specs(config) {
        let t = if name.ends_with("norm") {
            Tensor::new(shape.clone(), vec![1.0; shape.iter().product()])?
        } else {
            let std = if name.starts_with("embed") || name.starts_with("pos_embed") {
                EMBED_STD
            } else {
                proj_std
            };
            let mut rng = streams.rng(&name);
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| gaussian(&mut rng) * std).collect())?
        };
        tensors.insert(name, Arc::new(t));
    }
    Ok(Parameters { config: config.clone(), tensors })
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller with u1 bounded away from zero.
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_mlp: 16,
            vocab_size: 12,
            max_seq_len: 6,
            seed,
            norm: NormKind::Rms,
            activation: ActKind::Gelu,
            attention: AttnKind::Softmax,
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = init_model(&tiny_config(3)).unwrap();
        let b = init_model(&tiny_config(3)).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        for (name, _) in param_specs(&a.config) {
            assert_eq!(a.get(&name).data(), b.get(&name).data());
        }
    }

    #[test]
    fn different_seeds_differ() {
        let a = init_model(&tiny_config(3)).unwrap();
        let b = init_model(&tiny_config(4)).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.get("embed").data(), b.get("embed").data());
    }

    #[test]
    fn head_dim_mismatch_is_rejected() {
        let mut cfg = tiny_config(0);
        cfg.d_head = 5;
        assert!(init_model(&cfg).is_err());
        // the desk shape enforces d_head = d_model / n_heads
        let desk = ModelConfig::desk(0);
        assert_eq!(desk.d_model, 64);
        assert_eq!(desk.n_heads, 4);
        assert_eq!(desk.d_head, 16);
        desk.validate().unwrap();
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let params = init_model(&tiny_config(9)).unwrap();
        let dir = std::env::temp_dir().join("mi_core_model_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ckpt.json");
        params.save(&path).unwrap();
        let loaded = Parameters::load(&path).unwrap();
        assert_eq!(params.fingerprint(), loaded.fingerprint());
        for (name, _) in param_specs(&params.config) {
            let a = params.get(&name).data();
            let b = loaded.get(&name).data();
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()), "{name}");
        }
    }
}
