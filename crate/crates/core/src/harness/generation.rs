//! Generation-time experiments: batch transcript verification and the
//! greedy-sampling argmax check against tampering providers.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::experiment::trial_seed;
use crate::model::ModelParams;
use crate::numerics::Prng;
use crate::privacy::build_strategy;
use crate::protocol1::{
    generate_cache, generate_with_schedule, pregenerate_schedule, verify_greedy_sampling,
    verify_transcript,
};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerationSpec {
    pub trials: u64,
    pub prompt_len: usize,
    pub gen_steps: usize,
    pub k: usize,
    pub cache_size: usize,
    pub strategy: String,
    pub master_seed: u64,
    pub tolerance: f64,
    pub workers: usize,
}

impl Default for GenerationSpec {
    fn default() -> Self {
        GenerationSpec {
            trials: 100,
            prompt_len: 8,
            gen_steps: 10,
            k: 3,
            cache_size: 16,
            strategy: "honest".into(),
            master_seed: 0,
            tolerance: 1e-9,
            workers: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GenerationReport {
    pub spec: GenerationSpec,
    pub trials: u64,
    pub transcript_pass_rate: f64,
    pub greedy_pass_rate: f64,
    /// Trials whose claimed tokens deviated from the honest argmax stream.
    pub tampered_trials: u64,
    /// Tampered trials where the greedy check flagged exactly the tampered
    /// step as the first failure.
    pub detected_at_tampered_step: u64,
    pub wall_clock_ms: u64,
}

/// Per trial: pre-generate a schedule, run the honest augmented generation,
/// let the strategy claim its tokens, then verify the transcript and the
/// claimed tokens as a batch.
pub fn run_generation_experiment(
    model: &ModelParams,
    spec: &GenerationSpec,
) -> Result<GenerationReport> {
    if spec.trials == 0 || spec.gen_steps == 0 || spec.prompt_len == 0 {
        return Err(Error::InvalidArgument("empty generation spec".into()));
    }
    let start = Instant::now();
    let cache = generate_cache(
        model,
        spec.cache_size,
        spec.k,
        &mut Prng::from_seed(spec.master_seed ^ 0xCAC8E),
    )?;
    let strategy = build_strategy(&spec.strategy, model)?;

    struct TrialOutcome {
        transcript_ok: bool,
        greedy_ok: bool,
        tampered_step: Option<usize>,
        first_greedy_failure: Option<usize>,
    }

    let trial = |index: u64| -> Result<TrialOutcome> {
        let mut rng = Prng::from_seed(trial_seed(spec.master_seed, index));
        let prompt = rng.tokens(spec.prompt_len, model.config.vocab_size as u32);
        let schedule = pregenerate_schedule(spec.prompt_len, spec.k, spec.gen_steps, &mut rng)?;
        let (transcript, honest_tokens) =
            generate_with_schedule(model, &cache, &prompt, &schedule, spec.gen_steps, &mut rng)?;
        let claimed = strategy.claim_tokens(&transcript, &honest_tokens, &mut rng);
        let tampered_step = claimed
            .iter()
            .zip(&honest_tokens)
            .position(|(c, h)| c != h)
            .map(|i| i + 1);
        let transcript_verdict = verify_transcript(&transcript, &schedule, &cache, spec.tolerance)?;
        let greedy_verdict = verify_greedy_sampling(&transcript, &claimed)?;
        Ok(TrialOutcome {
            transcript_ok: transcript_verdict.verified,
            greedy_ok: greedy_verdict.verified,
            tampered_step,
            first_greedy_failure: greedy_verdict.first_failure,
        })
    };

    let run = || {
        (0..spec.trials)
            .into_par_iter()
            .map(trial)
            .collect::<Result<Vec<_>>>()
    };
    let outcomes = if spec.workers == 0 {
        run()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(spec.workers)
            .build()
            .map_err(|e| Error::Numeric(format!("thread pool: {e}")))?
            .install(run)?
    };

    let transcript_passes = outcomes.iter().filter(|o| o.transcript_ok).count() as u64;
    let greedy_passes = outcomes.iter().filter(|o| o.greedy_ok).count() as u64;
    let tampered: Vec<_> = outcomes
        .iter()
        .filter(|o| o.tampered_step.is_some())
        .collect();
    let detected_at = tampered
        .iter()
        .filter(|o| o.first_greedy_failure == o.tampered_step)
        .count() as u64;
    Ok(GenerationReport {
        spec: spec.clone(),
        trials: spec.trials,
        transcript_pass_rate: transcript_passes as f64 / spec.trials as f64,
        greedy_pass_rate: greedy_passes as f64 / spec.trials as f64,
        tampered_trials: tampered.len() as u64,
        detected_at_tampered_step: detected_at,
        wall_clock_ms: start.elapsed().as_millis() as u64,
    })
}
