//! Tiny decoder-only transformer with explicit 2D attention masks and
//! explicit position identifiers, plus weight generation, serialization,
//! pretraining, and the perturbation suite used by the fingerprint studies.

mod corpus;
mod files;
mod forward;
mod perturb;
mod train;

pub use corpus::{markov_corpus, MarkovSource};
pub use files::{deserialize, read_from_path, serialize, write_to_dir, MODEL_MAGIC};
pub use forward::{
    causal_mask, forward, forward_causal, generate_greedy, ForwardInput, ForwardOutput,
};
pub use perturb::{perturb_finetune_step, perturb_low_rank, perturb_quantize};
pub use train::{
    adamw_step, heldout_log_loss, model_tape_forward, next_token_gradients, pretrain,
    register_frozen, register_trainable, sgd_apply, AdamState, ParamStore, PretrainMetrics,
    TapeLayer, TapeModel, TrainOptions, ADAM_WEIGHT_DECAY,
};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Prng, Tensor};

/// Initialization scale for all weight matrices.
const INIT_STD: f64 = 0.02;

/// Architecture of the tiny decoder-only transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_mult: usize,
    pub max_positions: usize,
    pub eps: f64,
}

impl ModelConfig {
    /// Desk-scale default: fingerprints stay 3*64 floats and a forward pass
    /// is well under a millisecond.
    pub fn desk() -> Self {
        ModelConfig {
            vocab_size: 64,
            embed_dim: 64,
            hidden_dim: 64,
            n_layers: 2,
            n_heads: 4,
            mlp_mult: 4,
            max_positions: 512,
            eps: 1e-5,
        }
    }

    /// Shrunk variant for gradient checks.
    pub fn tiny(embed_dim: usize) -> Self {
        ModelConfig {
            vocab_size: 16,
            embed_dim,
            hidden_dim: embed_dim,
            n_layers: 2,
            n_heads: 2,
            mlp_mult: 2,
            max_positions: 64,
            eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::InvalidArgument("vocab_size must be >= 2".into()));
        }
        if self.n_layers < 1 || self.max_positions < 1 {
            return Err(Error::InvalidArgument(
                "n_layers and max_positions must be >= 1".into(),
            ));
        }
        if self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "embed_dim {} must divide into n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.hidden_dim != self.embed_dim {
            return Err(Error::InvalidArgument(
                "hidden_dim must equal embed_dim in this architecture".into(),
            ));
        }
        if self.mlp_mult == 0 {
            return Err(Error::InvalidArgument("mlp_mult must be >= 1".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidArgument("eps must be > 0".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }
}

/// Per-layer weights of the pre-norm decoder block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

/// Full weight set plus the SHA-256 of the canonical weight blob.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_norm: Tensor,
    pub unembedding: Tensor,
    pub hash: [u8; 32],
}

impl ModelParams {
    /// Canonical (name, tensor) sequence; blob layout, hashing, and the
    /// optimizer all iterate in this order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("token_embedding".into(), &self.token_embedding),
            ("position_embedding".into(), &self.position_embedding),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &layer.attn_norm));
            out.push((format!("layers.{i}.wq"), &layer.wq));
            out.push((format!("layers.{i}.wk"), &layer.wk));
            out.push((format!("layers.{i}.wv"), &layer.wv));
            out.push((format!("layers.{i}.wo"), &layer.wo));
            out.push((format!("layers.{i}.mlp_norm"), &layer.mlp_norm));
            out.push((format!("layers.{i}.w_up"), &layer.w_up));
            out.push((format!("layers.{i}.w_down"), &layer.w_down));
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("unembedding".into(), &self.unembedding));
        out
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match name {
            "token_embedding" => return Some(&mut self.token_embedding),
            "position_embedding" => return Some(&mut self.position_embedding),
            "final_norm" => return Some(&mut self.final_norm),
            "unembedding" => return Some(&mut self.unembedding),
            _ => {}
        }
        let rest = name.strip_prefix("layers.")?;
        let (idx, field) = rest.split_once('.')?;
        let layer = self.layers.get_mut(idx.parse::<usize>().ok()?)?;
        Some(match field {
            "attn_norm" => &mut layer.attn_norm,
            "wq" => &mut layer.wq,
            "wk" => &mut layer.wk,
            "wv" => &mut layer.wv,
            "wo" => &mut layer.wo,
            "mlp_norm" => &mut layer.mlp_norm,
            "w_up" => &mut layer.w_up,
            "w_down" => &mut layer.w_down,
            _ => return None,
        })
    }

    /// Serializes all tensors to the canonical little-endian blob.
    pub fn weight_blob(&self) -> Vec<u8> {
        let mut blob = Vec::new();
        for (_, t) in self.named_tensors() {
            for &v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        blob
    }

    pub fn compute_hash(&self) -> [u8; 32] {
        let digest = Sha256::digest(self.weight_blob());
        digest.into()
    }

    /// Recomputes and stores the content hash; call after mutating weights.
    pub fn rehash(&mut self) {
        self.hash = self.compute_hash();
    }

    pub fn hash_hex(&self) -> String {
        self.hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }

    /// Bitwise equality of every weight tensor.
    pub fn bit_equal(&self, other: &ModelParams) -> bool {
        self.config == other.config
            && self
                .named_tensors()
                .iter()
                .zip(other.named_tensors())
                .all(|((an, at), (bn, bt))| *an == bn && at.bit_eq(&bt))
    }
}

/// Draws a fresh weight set. Weights are i.i.d. normal with std 0.02;
/// residual output projections (wo, w_down) are additionally scaled by
/// 1/sqrt(2 * n_layers); norms start at one.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = Prng::from_seed(seed);
    let d = config.embed_dim;
    let v = config.vocab_size;
    let mlp = d * config.mlp_mult;
    let out_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();

    let mut normal_matrix = |rows: usize, cols: usize, std: f64| -> Tensor {
        let data = (0..rows * cols).map(|_| rng.normal(0.0, std)).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    };

    let token_embedding = normal_matrix(v, d, INIT_STD);
    let position_embedding = normal_matrix(config.max_positions, d, INIT_STD);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(LayerParams {
            attn_norm: Tensor::vector(vec![1.0; d]),
            wq: normal_matrix(d, d, INIT_STD),
            wk: normal_matrix(d, d, INIT_STD),
            wv: normal_matrix(d, d, INIT_STD),
            wo: normal_matrix(d, d, INIT_STD * out_scale),
            mlp_norm: Tensor::vector(vec![1.0; d]),
            w_up: normal_matrix(d, mlp, INIT_STD),
            w_down: normal_matrix(mlp, d, INIT_STD * out_scale),
        });
    }
    let final_norm = Tensor::vector(vec![1.0; d]);
    let unembedding = normal_matrix(config.hidden_dim, v, INIT_STD);

    let mut params = ModelParams {
        config: config.clone(),
        token_embedding,
        position_embedding,
        layers,
        final_norm,
        unembedding,
        hash: [0; 32],
    };
    params.rehash();
    Ok(params)
}
