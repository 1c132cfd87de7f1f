//! Model file = manifest (UTF-8 JSON) + blob (raw little-endian f64,
//! tensors concatenated in manifest order). The manifest carries the config,
//! a tensor index, and the hex SHA-256 of the blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blobio::{self, TensorEntry};
use crate::error::{Error, Result};
use crate::model::{LayerParams, ModelConfig, ModelParams};
use crate::numerics::Tensor;

pub const MODEL_MAGIC: &str = "PVMODEL1";

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    magic: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    blob_len: usize,
    sha256: String,
}

/// Renders `(manifest, blob)` for the given params.
pub fn serialize(params: &ModelParams) -> Result<(String, Vec<u8>)> {
    let mut blob = Vec::new();
    let mut index = Vec::new();
    for (name, t) in params.named_tensors() {
        blobio::append_tensor(&mut blob, &mut index, &name, t);
    }
    let manifest = ModelManifest {
        magic: MODEL_MAGIC.to_string(),
        config: params.config.clone(),
        tensors: index,
        blob_len: blob.len(),
        sha256: blobio::sha256_hex(&blob),
    };
    Ok((serde_json::to_string_pretty(&manifest)?, blob))
}

/// Parses and verifies a `(manifest, blob)` pair. The SHA-256 in the
/// manifest must match the blob, every tensor must land inside the blob,
/// and shapes must be consistent with the config.
pub fn deserialize(manifest_json: &str, blob: &[u8]) -> Result<ModelParams> {
    let manifest: ModelManifest = serde_json::from_str(manifest_json)?;
    if manifest.magic != MODEL_MAGIC {
        return Err(Error::Format(format!(
            "bad magic `{}`, expected `{MODEL_MAGIC}`",
            manifest.magic
        )));
    }
    manifest.config.validate()?;
    blobio::check_blob(blob, manifest.blob_len, &manifest.sha256)?;

    let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        tensors.push((entry.name.clone(), blobio::read_tensor(blob, entry)?));
    }

    let cfg = manifest.config;
    let mut take = |name: String| -> Result<Tensor> {
        let pos = tensors
            .iter()
            .position(|(n, _)| *n == name)
            .ok_or_else(|| Error::Format(format!("manifest missing tensor `{name}`")))?;
        Ok(tensors.remove(pos).1)
    };

    let token_embedding = take("token_embedding".into())?;
    let position_embedding = take("position_embedding".into())?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        layers.push(LayerParams {
            attn_norm: take(format!("layers.{i}.attn_norm"))?,
            wq: take(format!("layers.{i}.wq"))?,
            wk: take(format!("layers.{i}.wk"))?,
            wv: take(format!("layers.{i}.wv"))?,
            wo: take(format!("layers.{i}.wo"))?,
            mlp_norm: take(format!("layers.{i}.mlp_norm"))?,
            w_up: take(format!("layers.{i}.w_up"))?,
            w_down: take(format!("layers.{i}.w_down"))?,
        });
    }
    let final_norm = take("final_norm".into())?;
    let unembedding = take("unembedding".into())?;

    let mut params = ModelParams {
        config: cfg,
        token_embedding,
        position_embedding,
        layers,
        final_norm,
        unembedding,
        hash: [0; 32],
    };
    expect_shape(&params.token_embedding, &[params.config.vocab_size, params.config.embed_dim])?;
    expect_shape(
        &params.position_embedding,
        &[params.config.max_positions, params.config.embed_dim],
    )?;
    expect_shape(
        &params.unembedding,
        &[params.config.hidden_dim, params.config.vocab_size],
    )?;
    params.rehash();
    let stored = blobio::unhex(&manifest.sha256)?;
    if params.hash.as_slice() != stored.as_slice() {
        return Err(Error::Integrity(
            "recomputed weight hash does not match manifest".into(),
        ));
    }
    Ok(params)
}

fn expect_shape(t: &Tensor, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::Format(format!(
            "tensor shape {:?} does not match config expectation {shape:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Writes `<stem>.json` and `<stem>.bin`.
pub fn write_to_dir(params: &ModelParams, stem: &Path) -> Result<()> {
    let manifest = blobio::manifest_path(stem);
    let blob = blobio::blob_path(&manifest);
    let (manifest_json, blob_bytes) = serialize(params)?;
    fs::write(manifest, manifest_json)?;
    fs::write(blob, blob_bytes)?;
    Ok(())
}

/// Reads a model from `<stem>.json` / `<stem>.bin` (or an explicit
/// manifest path).
pub fn read_from_path(path: &Path) -> Result<ModelParams> {
    let manifest = blobio::manifest_path(path);
    let blob = blobio::blob_path(&manifest);
    let manifest_json = fs::read_to_string(&manifest)?;
    let blob_bytes = fs::read(&blob)?;
    deserialize(&manifest_json, &blob_bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    #[test]
    fn round_trip_bit_exact() {
        let p = init_params(&ModelConfig::desk(), 12).unwrap();
        let (manifest, blob) = serialize(&p).unwrap();
        let q = deserialize(&manifest, &blob).unwrap();
        assert!(p.bit_equal(&q));
        assert_eq!(p.hash, q.hash);
    }

    #[test]
    fn corrupted_blob_detected() {
        let p = init_params(&ModelConfig::desk(), 13).unwrap();
        let (manifest, mut blob) = serialize(&p).unwrap();
        blob[1024] ^= 0x01;
        assert!(matches!(
            deserialize(&manifest, &blob),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn truncated_blob_detected() {
        let p = init_params(&ModelConfig::desk(), 14).unwrap();
        let (manifest, blob) = serialize(&p).unwrap();
        assert!(matches!(
            deserialize(&manifest, &blob[..blob.len() - 8]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn wrong_magic_rejected() {
        let p = init_params(&ModelConfig::desk(), 15).unwrap();
        let (manifest, blob) = serialize(&p).unwrap();
        let manifest = manifest.replace("PVMODEL1", "PVMODEL9");
        assert!(matches!(
            deserialize(&manifest, &blob),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn serialization_is_deterministic() {
        let p = init_params(&ModelConfig::desk(), 16).unwrap();
        let (m1, b1) = serialize(&p).unwrap();
        let (m2, b2) = serialize(&p).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(b1, b2);
    }
}
