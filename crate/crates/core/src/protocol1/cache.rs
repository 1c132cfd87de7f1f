use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{forward_causal, ModelParams};
use crate::numerics::{Prng, Tensor};
use crate::protocol1::SentinelSequence;

pub const CACHE_MAGIC: &[u8; 8] = b"PVCACHE1";

/// Public mapping from sentinel sequences to their KxV logit matrices for a
/// specific model, identified by the model's weight hash. Entries keep
/// insertion order so a cache regenerated from the same seed serializes to
/// identical bytes.
#[derive(Clone, Debug)]
pub struct SentinelCache {
    pub model_hash: [u8; 32],
    pub k: usize,
    pub vocab: usize,
    sequences: Vec<SentinelSequence>,
    logits: Vec<Tensor>,
    index: HashMap<Vec<u32>, usize>,
}

impl SentinelCache {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn sequences(&self) -> &[SentinelSequence] {
        &self.sequences
    }

    pub fn sequence(&self, idx: usize) -> &SentinelSequence {
        &self.sequences[idx]
    }

    pub fn entry(&self, idx: usize) -> &Tensor {
        &self.logits[idx]
    }

    /// Logits for an exact sequence, if cached.
    pub fn lookup(&self, sequence: &SentinelSequence) -> Option<&Tensor> {
        self.index.get(sequence.tokens()).map(|&i| &self.logits[i])
    }

    /// Uniform draw of a cached sequence.
    pub fn draw(&self, rng: &mut Prng) -> &SentinelSequence {
        &self.sequences[rng.below(self.len() as u64) as usize]
    }

    /// Binary layout: magic, model hash, K, V, entry count, then per entry
    /// K token ids (u32 LE) and K*V logits (f64 LE); a SHA-256 of everything
    /// preceding closes the file so corruption is detectable.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&self.model_hash);
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.vocab as u32).to_le_bytes());
        out.extend_from_slice(&(self.sequences.len() as u64).to_le_bytes());
        for (sequence, logits) in self.sequences.iter().zip(&self.logits) {
            for &t in sequence.tokens() {
                out.extend_from_slice(&t.to_le_bytes());
            }
            for &v in logits.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 8 + 32 + 4 + 4 + 8;
        if bytes.len() < HEADER + 32 {
            return Err(Error::Format("cache file too short".into()));
        }
        let (body, footer) = bytes.split_at(bytes.len() - 32);
        let digest = Sha256::digest(body);
        if digest.as_slice() != footer {
            return Err(Error::Integrity("cache checksum mismatch".into()));
        }
        if &body[..8] != CACHE_MAGIC {
            return Err(Error::Format("bad cache magic".into()));
        }
        let mut model_hash = [0u8; 32];
        model_hash.copy_from_slice(&body[8..40]);
        let k = u32::from_le_bytes(body[40..44].try_into().unwrap()) as usize;
        let vocab = u32::from_le_bytes(body[44..48].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(body[48..56].try_into().unwrap()) as usize;
        if k == 0 || vocab == 0 {
            return Err(Error::Format("cache declares zero K or V".into()));
        }
        let entry_bytes = 4 * k + 8 * k * vocab;
        if body.len() != HEADER + count * entry_bytes {
            return Err(Error::Format(format!(
                "cache length {} does not match {count} declared entries",
                bytes.len()
            )));
        }
        let mut sequences = Vec::with_capacity(count);
        let mut logits = Vec::with_capacity(count);
        let mut index = HashMap::with_capacity(count);
        let mut cursor = HEADER;
        for i in 0..count {
            let mut tokens = Vec::with_capacity(k);
            for _ in 0..k {
                tokens.push(u32::from_le_bytes(
                    body[cursor..cursor + 4].try_into().unwrap(),
                ));
                cursor += 4;
            }
            let mut values = Vec::with_capacity(k * vocab);
            for _ in 0..k * vocab {
                values.push(f64::from_le_bytes(
                    body[cursor..cursor + 8].try_into().unwrap(),
                ));
                cursor += 8;
            }
            if index.insert(tokens.clone(), i).is_some() {
                return Err(Error::Format("duplicate cache sequence".into()));
            }
            sequences.push(SentinelSequence(tokens));
            logits.push(Tensor::new(vec![k, vocab], values)?);
        }
        Ok(SentinelCache {
            model_hash,
            k,
            vocab,
            sequences,
            logits,
            index,
        })
    }
}

/// Fills a cache with `cache_size` distinct sentinel sequences. Tokens are
/// sampled with replacement within a sequence; a sequence colliding with an
/// existing entry is re-drawn so lookup keys stay unique.
pub fn generate_cache(
    model: &ModelParams,
    cache_size: usize,
    k: usize,
    rng: &mut Prng,
) -> Result<SentinelCache> {
    if cache_size == 0 || k == 0 {
        return Err(Error::InvalidArgument(
            "cache size and K must be >= 1".into(),
        ));
    }
    let vocab = model.config.vocab_size;
    if let Some(limit) = (vocab as u128).checked_pow(k as u32) {
        if cache_size as u128 > limit {
            return Err(Error::InvalidArgument(format!(
                "cache size {cache_size} exceeds the {limit} distinct sequences of length {k}"
            )));
        }
    }
    let mut sequences = Vec::with_capacity(cache_size);
    let mut logits = Vec::with_capacity(cache_size);
    let mut index = HashMap::with_capacity(cache_size);
    while sequences.len() < cache_size {
        let tokens: Vec<u32> = (0..k).map(|_| rng.below(vocab as u64) as u32).collect();
        if index.contains_key(&tokens) {
            continue;
        }
        let out = forward_causal(model, &tokens)?;
        index.insert(tokens.clone(), sequences.len());
        sequences.push(SentinelSequence(tokens));
        logits.push(out.logits);
    }
    Ok(SentinelCache {
        model_hash: model.hash,
        k,
        vocab,
        sequences,
        logits,
        index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    fn desk_model() -> ModelParams {
        init_params(&ModelConfig::desk(), 60).unwrap()
    }

    #[test]
    fn degenerate_cache_single_entry() {
        let model = desk_model();
        let mut rng = Prng::from_seed(1);
        let cache = generate_cache(&model, 1, 1, &mut rng).unwrap();
        assert_eq!(cache.len(), 1);
        let seq = cache.sequence(0).clone();
        let out = forward_causal(&model, seq.tokens()).unwrap();
        assert!(cache.lookup(&seq).unwrap().bit_eq(&out.logits));
    }

    #[test]
    fn entries_distinct_and_recomputable() {
        let model = desk_model();
        let mut rng = Prng::from_seed(2);
        let cache = generate_cache(&model, 100, 3, &mut rng).unwrap();
        assert_eq!(cache.len(), 100);
        let mut seen = std::collections::HashSet::new();
        for i in 0..cache.len() {
            assert!(seen.insert(cache.sequence(i).tokens().to_vec()));
            let out = forward_causal(&model, cache.sequence(i).tokens()).unwrap();
            assert!(cache.entry(i).bit_eq(&out.logits), "entry {i}");
        }
    }

    #[test]
    fn same_seed_byte_identical() {
        let model = desk_model();
        let a = generate_cache(&model, 20, 3, &mut Prng::from_seed(9)).unwrap();
        let b = generate_cache(&model, 20, 3, &mut Prng::from_seed(9)).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn round_trip_and_corruption() {
        let model = desk_model();
        let cache = generate_cache(&model, 5, 2, &mut Prng::from_seed(4)).unwrap();
        let bytes = cache.to_bytes();
        let back = SentinelCache::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.model_hash, model.hash);

        let mut corrupted = bytes.clone();
        corrupted[100] ^= 0x40;
        assert!(matches!(
            SentinelCache::from_bytes(&corrupted),
            Err(Error::Integrity(_))
        ));
        assert!(matches!(
            SentinelCache::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Integrity(_)) | Err(Error::Format(_))
        ));
    }

    #[test]
    fn infeasible_size_rejected() {
        let model = desk_model();
        let mut rng = Prng::from_seed(5);
        assert!(generate_cache(&model, 65, 1, &mut rng).is_err());
        assert!(generate_cache(&model, 64, 1, &mut rng).is_ok());
    }
}
