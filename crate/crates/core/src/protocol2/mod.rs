//! Protocol 2: logit fingerprinting with injected, predictable noise.
//!
//! Sentinels work exactly as in Protocol 1. Every non-sentinel token
//! embedding is additionally pushed through a learned noise embedder keyed
//! by a secret noise id; a lightweight linear predictor recovers the id from
//! the provider's returned hidden states. Verification is the conjunction
//! of the sentinel check and an exact id match at every non-sentinel slot,
//! which is what defeats subsetting attacks.

mod modules;
mod request;
mod train;
mod verify;

pub use modules::{
    embed_noise, embed_noise_rows, init_modules, predict_noise, read_modules_from_path,
    write_modules_to_dir, NoiseEmbedderParams, NoiseModules, NoisePredictorParams, NOISE_MAGIC,
};
pub use request::{build_noisy_request, build_noisy_request_at, NoiseMode, NoisyRequest};
pub use train::{
    evaluate_modules, gradient_check, train_modules, EvalStats, NoiseTrainOptions, TrainMetrics,
};
pub use verify::{verify_noisy, NoisyVerificationResult};

use crate::error::{Error, Result};

/// Discrete noise sample space; ids run 0..size-1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseSet {
    size: usize,
}

impl NoiseSet {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidArgument(
                "noise set needs at least two ids".into(),
            ));
        }
        Ok(NoiseSet { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn contains(&self, id: u32) -> bool {
        (id as usize) < self.size
    }

    pub fn draw(&self, rng: &mut crate::numerics::Prng) -> u32 {
        rng.below(self.size as u64) as u32
    }
}

/// Probability an honest provider is rejected: 1 - prod(acc_n).
pub fn completeness_bound(accuracies: &[f64]) -> Result<f64> {
    if accuracies.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::InvalidArgument(
            "accuracies must lie in [0, 1]".into(),
        ));
    }
    Ok(1.0 - accuracies.iter().product::<f64>())
}

/// Per-position success bound for a provider ignorant of the noise id.
pub fn soundness_bound(noise_set: &NoiseSet) -> f64 {
    1.0 / noise_set.size() as f64
}
