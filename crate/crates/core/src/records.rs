//! Request/response records in the manifest+blob convention, so the user
//! side (request/verify) and the provider side (respond) can run as
//! separate process invocations.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blobio::{self, TensorEntry};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::privacy::{PrivacyMode, ProviderResponse, RequestPayload};
use crate::protocol1::{AugmentedRequest, SentinelSequence};
use crate::protocol2::{NoiseMode, NoisyRequest};

pub const REQUEST_MAGIC: &str = "PVREQ1";
pub const RESPONSE_MAGIC: &str = "PVRESP1";

/// The user's saved request state: the full payload (secrets included; the
/// record never leaves the user's machine) plus the privacy mode and the
/// model the request targets.
#[derive(Clone, Debug)]
pub struct RequestRecord {
    pub payload: RequestPayload,
    pub mode: PrivacyMode,
    pub model_hash: [u8; 32],
}

#[derive(Serialize, Deserialize)]
struct RequestManifest {
    magic: String,
    protocol: u8,
    mode: PrivacyMode,
    model_hash: String,
    n: usize,
    k: usize,
    tokens: Vec<u32>,
    sentinel_positions: Vec<usize>,
    sentinel_tokens: Vec<u32>,
    position_ids: Vec<u32>,
    noise_mode: Option<NoiseMode>,
    noise_ids: Vec<(usize, u32)>,
    tensors: Vec<TensorEntry>,
    blob_len: usize,
    sha256: String,
}

pub fn serialize_request(record: &RequestRecord) -> Result<(String, Vec<u8>)> {
    let base = record.payload.base();
    let mut blob = Vec::new();
    let mut index = Vec::new();
    blobio::append_tensor(&mut blob, &mut index, "mask2d", &base.mask2d);
    let (noise_mode, noise_ids) = match &record.payload {
        RequestPayload::Plain(_) => (None, vec![]),
        RequestPayload::Noisy(r) => {
            blobio::append_tensor(&mut blob, &mut index, "embeddings", &r.embeddings);
            (Some(r.mode), r.noise_ids.clone())
        }
    };
    let manifest = RequestManifest {
        magic: REQUEST_MAGIC.to_string(),
        protocol: record.payload.protocol(),
        mode: record.mode,
        model_hash: blobio::hex(&record.model_hash),
        n: base.n_original,
        k: base.k(),
        tokens: base.tokens.clone(),
        sentinel_positions: base.sentinel_positions.clone(),
        sentinel_tokens: base.sentinel_sequence.tokens().to_vec(),
        position_ids: base.position_ids.clone(),
        noise_mode,
        noise_ids,
        tensors: index,
        blob_len: blob.len(),
        sha256: blobio::sha256_hex(&blob),
    };
    Ok((serde_json::to_string_pretty(&manifest)?, blob))
}

pub fn deserialize_request(manifest_json: &str, blob: &[u8]) -> Result<RequestRecord> {
    let manifest: RequestManifest = serde_json::from_str(manifest_json)?;
    if manifest.magic != REQUEST_MAGIC {
        return Err(Error::Format(format!(
            "bad magic `{}`, expected `{REQUEST_MAGIC}`",
            manifest.magic
        )));
    }
    blobio::check_blob(blob, manifest.blob_len, &manifest.sha256)?;
    let read = |name: &str| -> Result<Tensor> {
        let entry = manifest
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("request record missing `{name}`")))?;
        blobio::read_tensor(blob, entry)
    };
    let mask2d = read("mask2d")?;
    let total = manifest.n + manifest.k;
    if manifest.tokens.len() != total
        || manifest.position_ids.len() != total
        || manifest.sentinel_positions.len() != manifest.k
        || mask2d.shape() != [total, total]
    {
        return Err(Error::Format("request record fields inconsistent".into()));
    }
    let base = AugmentedRequest {
        tokens: manifest.tokens,
        mask2d,
        position_ids: manifest.position_ids,
        sentinel_positions: manifest.sentinel_positions,
        sentinel_sequence: SentinelSequence(manifest.sentinel_tokens),
        n_original: manifest.n,
    };
    let payload = match manifest.protocol {
        1 => RequestPayload::Plain(base),
        2 => {
            let embeddings = read("embeddings")?;
            let mode = manifest
                .noise_mode
                .ok_or_else(|| Error::Format("protocol 2 record lacks noise mode".into()))?;
            RequestPayload::Noisy(NoisyRequest {
                base,
                embeddings,
                noise_ids: manifest.noise_ids,
                mode,
            })
        }
        p => return Err(Error::Format(format!("unknown protocol {p}"))),
    };
    let hash_bytes = blobio::unhex(&manifest.model_hash)?;
    let model_hash: [u8; 32] = hash_bytes
        .try_into()
        .map_err(|_| Error::Format("model hash must be 32 bytes".into()))?;
    Ok(RequestRecord {
        payload,
        mode: manifest.mode,
        model_hash,
    })
}

/// Provider output saved for a later `verify` invocation.
#[derive(Clone, Debug)]
pub struct ResponseRecord {
    pub protocol: u8,
    pub strategy: String,
    pub rows: Tensor,
    pub claimed_tokens: Option<Vec<u32>>,
    pub model_hash: [u8; 32],
}

impl ResponseRecord {
    pub fn from_response(
        response: &ProviderResponse,
        protocol: u8,
        model_hash: [u8; 32],
    ) -> Self {
        ResponseRecord {
            protocol,
            strategy: response.strategy.clone(),
            rows: response.rows.clone(),
            claimed_tokens: None,
            model_hash,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ResponseManifest {
    magic: String,
    protocol: u8,
    strategy: String,
    rows_kind: String,
    claimed_tokens: Option<Vec<u32>>,
    model_hash: String,
    tensors: Vec<TensorEntry>,
    blob_len: usize,
    sha256: String,
}

pub fn serialize_response(record: &ResponseRecord) -> Result<(String, Vec<u8>)> {
    let mut blob = Vec::new();
    let mut index = Vec::new();
    blobio::append_tensor(&mut blob, &mut index, "rows", &record.rows);
    let manifest = ResponseManifest {
        magic: RESPONSE_MAGIC.to_string(),
        protocol: record.protocol,
        strategy: record.strategy.clone(),
        rows_kind: if record.protocol == 1 { "logits" } else { "hidden" }.to_string(),
        claimed_tokens: record.claimed_tokens.clone(),
        model_hash: blobio::hex(&record.model_hash),
        tensors: index,
        blob_len: blob.len(),
        sha256: blobio::sha256_hex(&blob),
    };
    Ok((serde_json::to_string_pretty(&manifest)?, blob))
}

pub fn deserialize_response(manifest_json: &str, blob: &[u8]) -> Result<ResponseRecord> {
    let manifest: ResponseManifest = serde_json::from_str(manifest_json)?;
    if manifest.magic != RESPONSE_MAGIC {
        return Err(Error::Format(format!(
            "bad magic `{}`, expected `{RESPONSE_MAGIC}`",
            manifest.magic
        )));
    }
    blobio::check_blob(blob, manifest.blob_len, &manifest.sha256)?;
    let entry = manifest
        .tensors
        .iter()
        .find(|e| e.name == "rows")
        .ok_or_else(|| Error::Format("response record missing rows".into()))?;
    let rows = blobio::read_tensor(blob, entry)?;
    let hash_bytes = blobio::unhex(&manifest.model_hash)?;
    let model_hash: [u8; 32] = hash_bytes
        .try_into()
        .map_err(|_| Error::Format("model hash must be 32 bytes".into()))?;
    Ok(ResponseRecord {
        protocol: manifest.protocol,
        strategy: manifest.strategy,
        rows,
        claimed_tokens: manifest.claimed_tokens,
        model_hash,
    })
}

pub fn write_request(record: &RequestRecord, stem: &Path) -> Result<()> {
    let manifest = blobio::manifest_path(stem);
    let (json, blob) = serialize_request(record)?;
    fs::write(&manifest, json)?;
    fs::write(blobio::blob_path(&manifest), blob)?;
    Ok(())
}

pub fn read_request(path: &Path) -> Result<RequestRecord> {
    let manifest = blobio::manifest_path(path);
    let json = fs::read_to_string(&manifest)?;
    let blob = fs::read(blobio::blob_path(&manifest))?;
    deserialize_request(&json, &blob)
}

pub fn write_response(record: &ResponseRecord, stem: &Path) -> Result<()> {
    let manifest = blobio::manifest_path(stem);
    let (json, blob) = serialize_response(record)?;
    fs::write(&manifest, json)?;
    fs::write(blobio::blob_path(&manifest), blob)?;
    Ok(())
}

pub fn read_response(path: &Path) -> Result<ResponseRecord> {
    let manifest = blobio::manifest_path(path);
    let json = fs::read_to_string(&manifest)?;
    let blob = fs::read(blobio::blob_path(&manifest))?;
    deserialize_response(&json, &blob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::numerics::Prng;
    use crate::protocol1::build_request;
    use crate::protocol2::{build_noisy_request, init_modules, NoiseSet};

    fn request_fixture(protocol: u8) -> RequestRecord {
        let model = init_params(&ModelConfig::desk(), 180).unwrap();
        let mut rng = Prng::from_seed(1);
        let prompt = rng.tokens(5, 64);
        let seq = SentinelSequence::new(vec![2, 3, 4], 64).unwrap();
        let payload = if protocol == 1 {
            RequestPayload::Plain(build_request(&prompt, &seq, &mut rng).unwrap())
        } else {
            let noise_set = NoiseSet::new(8).unwrap();
            let modules = init_modules(&model, noise_set, 2).unwrap();
            RequestPayload::Noisy(
                build_noisy_request(
                    &model,
                    &prompt,
                    &seq,
                    &noise_set,
                    &modules,
                    &mut rng,
                    NoiseMode::Shared,
                )
                .unwrap(),
            )
        };
        RequestRecord {
            payload,
            mode: PrivacyMode::Structural,
            model_hash: model.hash,
        }
    }

    #[test]
    fn request_round_trip_both_protocols() {
        for protocol in [1u8, 2] {
            let record = request_fixture(protocol);
            let (json, blob) = serialize_request(&record).unwrap();
            let back = deserialize_request(&json, &blob).unwrap();
            let (json2, blob2) = serialize_request(&back).unwrap();
            assert_eq!(json, json2, "protocol {protocol}");
            assert_eq!(blob, blob2, "protocol {protocol}");
        }
    }

    #[test]
    fn request_blob_corruption_detected() {
        let record = request_fixture(2);
        let (json, mut blob) = serialize_request(&record).unwrap();
        blob[17] ^= 0x80;
        assert!(matches!(
            deserialize_request(&json, &blob),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn response_round_trip_and_corruption() {
        let rows = Tensor::matrix(3, 4, (0..12).map(|i| i as f64 / 7.0).collect()).unwrap();
        let record = ResponseRecord {
            protocol: 1,
            strategy: "honest".into(),
            rows,
            claimed_tokens: Some(vec![1, 2, 3]),
            model_hash: [7; 32],
        };
        let (json, blob) = serialize_response(&record).unwrap();
        let back = deserialize_response(&json, &blob).unwrap();
        assert!(back.rows.bit_eq(&record.rows));
        assert_eq!(back.claimed_tokens, record.claimed_tokens);
        assert_eq!(back.strategy, "honest");

        let mut corrupted = blob.clone();
        corrupted[0] ^= 0x01;
        assert!(matches!(
            deserialize_response(&json, &corrupted),
            Err(Error::Integrity(_))
        ));
    }
}
