//! Protocol 1: logit fingerprinting.
//!
//! The user splices K sentinel tokens into the prompt at secret random
//! slots. The 2D attention mask keeps sentinels and prompt mutually
//! invisible while sentinels attend each other causally, so the sentinel
//! logits of an honest forward pass equal a precomputed public cache entry
//! bit-for-bit and the prompt's own logits are untouched.

mod cache;
mod noninteractive;
mod request;
mod verify;

pub use cache::{generate_cache, SentinelCache, CACHE_MAGIC};
pub use noninteractive::{
    generate_with_schedule,
    pregenerate_schedule, verify_greedy_sampling, verify_transcript, GreedyVerdict,
    PositionSchedule, TranscriptStep, TranscriptVerdict,
};
pub use request::{build_request, build_request_at, AugmentedRequest};
pub use verify::{verify, VerificationResult};

use crate::error::{Error, Result};
use crate::model::{forward_causal, ModelParams};
use crate::numerics::Tensor;

/// A short sequence of sentinel token ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SentinelSequence(pub Vec<u32>);

impl SentinelSequence {
    pub fn new(tokens: Vec<u32>, vocab: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("sentinel sequence is empty".into()));
        }
        if tokens.iter().any(|&t| t as usize >= vocab) {
            return Err(Error::InvalidArgument(
                "sentinel token outside vocabulary".into(),
            ));
        }
        Ok(SentinelSequence(tokens))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }
}

/// Logit fingerprint of `sequence` under `model`: the concatenated
/// next-token logit rows of a standalone causal run at positions 1..K.
pub fn fingerprint(model: &ModelParams, sequence: &SentinelSequence) -> Result<Tensor> {
    let out = forward_causal(model, sequence.tokens())?;
    let k = sequence.len();
    let v = model.config.vocab_size;
    let flat = out.logits.reshaped(vec![k * v])?;
    Ok(flat)
}

/// L1 distance over the leading min(len) coordinates; fingerprints from
/// models with different vocabularies compare on the shared prefix.
pub fn fingerprint_distance(f1: &Tensor, f2: &Tensor) -> f64 {
    f1.l1_distance(f2)
}
