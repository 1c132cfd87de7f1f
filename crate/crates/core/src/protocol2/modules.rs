use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blobio::{self, TensorEntry};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::kernels::{add_row_broadcast, argmax, matmul, vec_matmul};
use crate::numerics::{Prng, Tensor};
use crate::protocol2::NoiseSet;

pub const NOISE_MAGIC: &str = "PVNOISE1";

/// Learned noise-id embedding plus a linear combiner that folds it into the
/// token embedding: e' = W^T concat(e, E[b]) + bias.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseEmbedderParams {
    pub noise_embedding: Tensor, // |B| x d_e
    pub combiner: Tensor,        // 2*d_e x d_e
    pub combiner_bias: Tensor,   // d_e
}

/// Linear classifier over final hidden states producing unnormalized logits
/// over the noise ids.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePredictorParams {
    pub weight: Tensor, // d_h x |B|
    pub bias: Tensor,   // |B|
}

/// Trained module pair, bound to the base model it was trained against.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseModules {
    pub embedder: NoiseEmbedderParams,
    pub predictor: NoisePredictorParams,
    pub noise_set: NoiseSet,
    pub base_model_hash: [u8; 32],
}

impl NoiseModules {
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("noise.embedding".into(), &self.embedder.noise_embedding),
            ("noise.combiner".into(), &self.embedder.combiner),
            ("noise.combiner_bias".into(), &self.embedder.combiner_bias),
            ("predictor.weight".into(), &self.predictor.weight),
            ("predictor.bias".into(), &self.predictor.bias),
        ]
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        Some(match name {
            "noise.embedding" => &mut self.embedder.noise_embedding,
            "noise.combiner" => &mut self.embedder.combiner,
            "noise.combiner_bias" => &mut self.embedder.combiner_bias,
            "predictor.weight" => &mut self.predictor.weight,
            "predictor.bias" => &mut self.predictor.bias,
            _ => return None,
        })
    }
}

/// Fresh modules at the exact pass-through point: the combiner starts as
/// [I; 0], so the noised embedding equals the raw embedding at step zero
/// and the language-model term anchors training while the noise channel
/// bootstraps through the classification gradient.
pub fn init_modules(
    model: &ModelParams,
    noise_set: NoiseSet,
    seed: u64,
) -> Result<NoiseModules> {
    let d = model.config.embed_dim;
    let b = noise_set.size();
    let mut rng = Prng::from_seed(seed);
    let mut matrix = |rows: usize, cols: usize, std: f64| -> Tensor {
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols).map(|_| rng.normal(0.0, std)).collect(),
        )
        .unwrap()
    };
    let e_std: f64 = std::env::var("PV_E_STD").ok().and_then(|v| v.parse().ok()).unwrap_or(0.005);
    let p_std: f64 = std::env::var("PV_P_STD").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0);
    let noise_embedding = matrix(b, d, e_std);
    let mut combiner = Tensor::zeros(vec![2 * d, d]);
    for i in 0..d {
        combiner.set(i, i, 1.0);
    }
    let predictor_weight = matrix(model.config.hidden_dim, b, p_std);
    Ok(NoiseModules {
        embedder: NoiseEmbedderParams {
            noise_embedding,
            combiner,
            combiner_bias: Tensor::vector(vec![0.0; d]),
        },
        predictor: NoisePredictorParams {
            weight: predictor_weight,
            bias: Tensor::vector(vec![0.0; b]),
        },
        noise_set,
        base_model_hash: model.hash,
    })
}

/// e' = W^T concat(e, E[b]) + bias for a single embedding row.
pub fn embed_noise(ne: &NoiseEmbedderParams, embedding: &Tensor, noise_id: u32) -> Result<Tensor> {
    if noise_id as usize >= ne.noise_embedding.rows() {
        return Err(Error::InvalidArgument(format!(
            "noise id {noise_id} outside the embedding table"
        )));
    }
    if embedding.rank() != 1 || embedding.numel() != ne.combiner.shape()[1] {
        return Err(Error::ShapeMismatch(format!(
            "embedding {:?} vs combiner {:?}",
            embedding.shape(),
            ne.combiner.shape()
        )));
    }
    let mut concat = embedding.data().to_vec();
    concat.extend_from_slice(ne.noise_embedding.row(noise_id as usize));
    let out = vec_matmul(&Tensor::vector(concat), &ne.combiner)?;
    crate::numerics::kernels::add(&out, &ne.combiner_bias)
}

/// Row-wise noising of a whole embedding matrix; `noise_ids[i]` applies to
/// row i. Composes the same kernel sequence as the training tape
/// (concat, matmul, row-broadcast add) so values agree bit-exactly.
pub fn embed_noise_rows(
    ne: &NoiseEmbedderParams,
    embeddings: &Tensor,
    noise_ids: &[u32],
) -> Result<Tensor> {
    if embeddings.rank() != 2 || noise_ids.len() != embeddings.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} noise ids for embeddings {:?}",
            noise_ids.len(),
            embeddings.shape()
        )));
    }
    let d = embeddings.cols();
    let mut concat = Vec::with_capacity(embeddings.rows() * 2 * d);
    for (i, &b) in noise_ids.iter().enumerate() {
        if b as usize >= ne.noise_embedding.rows() {
            return Err(Error::InvalidArgument(format!(
                "noise id {b} outside the embedding table"
            )));
        }
        concat.extend_from_slice(embeddings.row(i));
        concat.extend_from_slice(ne.noise_embedding.row(b as usize));
    }
    let concat = Tensor::new(vec![embeddings.rows(), 2 * d], concat)?;
    let mixed = matmul(&concat, &ne.combiner)?;
    add_row_broadcast(&mixed, &ne.combiner_bias)
}

/// argmax over W^T h + bias; ties resolve to the lowest id.
pub fn predict_noise(np: &NoisePredictorParams, hidden_row: &[f64]) -> Result<u32> {
    if hidden_row.len() != np.weight.rows() {
        return Err(Error::ShapeMismatch(format!(
            "hidden width {} vs predictor {:?}",
            hidden_row.len(),
            np.weight.shape()
        )));
    }
    let logits = vec_matmul(&Tensor::vector(hidden_row.to_vec()), &np.weight)?;
    let logits = crate::numerics::kernels::add(&logits, &np.bias)?;
    Ok(argmax(logits.data()) as u32)
}

#[derive(Serialize, Deserialize)]
struct NoiseManifest {
    magic: String,
    base_model_hash: String,
    noise_set_size: usize,
    embed_dim: usize,
    hidden_dim: usize,
    tensors: Vec<TensorEntry>,
    blob_len: usize,
    sha256: String,
}

pub fn serialize_modules(modules: &NoiseModules) -> Result<(String, Vec<u8>)> {
    let mut blob = Vec::new();
    let mut index = Vec::new();
    for (name, t) in modules.named_tensors() {
        blobio::append_tensor(&mut blob, &mut index, &name, t);
    }
    let manifest = NoiseManifest {
        magic: NOISE_MAGIC.to_string(),
        base_model_hash: blobio::hex(&modules.base_model_hash),
        noise_set_size: modules.noise_set.size(),
        embed_dim: modules.embedder.combiner.shape()[1],
        hidden_dim: modules.predictor.weight.shape()[0],
        tensors: index,
        blob_len: blob.len(),
        sha256: blobio::sha256_hex(&blob),
    };
    Ok((serde_json::to_string_pretty(&manifest)?, blob))
}

pub fn deserialize_modules(manifest_json: &str, blob: &[u8]) -> Result<NoiseModules> {
    let manifest: NoiseManifest = serde_json::from_str(manifest_json)?;
    if manifest.magic != NOISE_MAGIC {
        return Err(Error::Format(format!(
            "bad magic `{}`, expected `{NOISE_MAGIC}`",
            manifest.magic
        )));
    }
    blobio::check_blob(blob, manifest.blob_len, &manifest.sha256)?;
    let read = |name: &str| -> Result<Tensor> {
        let entry = manifest
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("manifest missing tensor `{name}`")))?;
        blobio::read_tensor(blob, entry)
    };
    let noise_embedding = read("noise.embedding")?;
    let combiner = read("noise.combiner")?;
    let combiner_bias = read("noise.combiner_bias")?;
    let weight = read("predictor.weight")?;
    let bias = read("predictor.bias")?;
    if noise_embedding.rows() != manifest.noise_set_size
        || combiner.shape() != [2 * manifest.embed_dim, manifest.embed_dim]
        || weight.shape() != [manifest.hidden_dim, manifest.noise_set_size]
    {
        return Err(Error::Format("module tensor shapes inconsistent".into()));
    }
    let hash_bytes = blobio::unhex(&manifest.base_model_hash)?;
    let base_model_hash: [u8; 32] = hash_bytes
        .try_into()
        .map_err(|_| Error::Format("base model hash must be 32 bytes".into()))?;
    Ok(NoiseModules {
        embedder: NoiseEmbedderParams {
            noise_embedding,
            combiner,
            combiner_bias,
        },
        predictor: NoisePredictorParams { weight, bias },
        noise_set: NoiseSet::new(manifest.noise_set_size)?,
        base_model_hash,
    })
}

pub fn write_modules_to_dir(modules: &NoiseModules, stem: &Path) -> Result<()> {
    let manifest = blobio::manifest_path(stem);
    let blob = blobio::blob_path(&manifest);
    let (manifest_json, blob_bytes) = serialize_modules(modules)?;
    fs::write(manifest, manifest_json)?;
    fs::write(blob, blob_bytes)?;
    Ok(())
}

pub fn read_modules_from_path(path: &Path) -> Result<NoiseModules> {
    let manifest = blobio::manifest_path(path);
    let blob = blobio::blob_path(&manifest);
    let manifest_json = fs::read_to_string(&manifest)?;
    let blob_bytes = fs::read(&blob)?;
    deserialize_modules(&manifest_json, &blob_bytes)
}
