//! Monte Carlo attack experiments: per-trial seeding, parallel trial
//! execution with worker-count-independent results, and 3-sigma comparison
//! against the analytic bounds.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::bounds::{analytic_attack_probability, BoundKind};
use crate::harness::stats::{standard_error, standard_error_band};
use crate::model::ModelParams;
use crate::numerics::{Prng, Tensor};
use crate::privacy::{
    build_strategy, make_view, run_provider, PrivacyMode, PublicContext, RequestPayload,
    SealedRequest, SentinelPlacement,
};
use crate::protocol1::{build_request, build_request_at, generate_cache, verify};
use crate::protocol2::{
    build_noisy_request_at, predict_noise, verify_noisy, NoiseMode, NoiseModules,
};

/// Seed for trial `index`: SHA-256(master || index) truncated to 64 bits.
/// Order-free, so trials can run on any worker without changing results.
pub fn trial_seed(master: u64, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Runs `f` over 0..trials on a dedicated pool ordered by trial index.
fn run_trials<F>(trials: u64, workers: usize, f: F) -> Result<Vec<bool>>
where
    F: Fn(u64) -> Result<bool> + Sync,
{
    let run = || (0..trials).into_par_iter().map(|i| f(i)).collect();
    if workers == 0 {
        run()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Numeric(format!("thread pool: {e}")))?;
        pool.install(run)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub protocol: u8,
    pub strategy: String,
    pub mode: PrivacyMode,
    pub n: usize,
    pub k: usize,
    pub cache_size: usize,
    pub noise_set: usize,
    pub trials: u64,
    pub master_seed: u64,
    pub tolerance: f64,
    pub placement: SentinelPlacement,
    /// 0 means the global rayon default; results are identical either way.
    pub workers: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            protocol: 1,
            strategy: "honest".into(),
            mode: PrivacyMode::Structural,
            n: 14,
            k: 3,
            cache_size: 100,
            noise_set: 16,
            trials: 1000,
            master_seed: 0,
            tolerance: 1e-9,
            placement: SentinelPlacement::Random,
            workers: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentReport {
    pub spec: ExperimentSpec,
    pub successes: u64,
    pub trials: u64,
    pub empirical_rate: f64,
    pub empirical_se: f64,
    pub analytic_bound: f64,
    pub analytic_formula: String,
    pub within_3_sigma: bool,
    pub wall_clock_ms: u64,
}

impl ExperimentReport {
    /// JSON with the wall clock zeroed, for determinism comparisons.
    pub fn deterministic_json(&self) -> String {
        let mut clone = self.clone();
        clone.wall_clock_ms = 0;
        serde_json::to_string_pretty(&clone).expect("report serializes")
    }
}

/// The analytic success probability a strategy is compared against.
fn analytic_for(spec: &ExperimentSpec) -> Result<(f64, String)> {
    let name = spec.strategy.split(':').next().unwrap_or("");
    Ok(match name {
        "honest" | "sampling-tamper" => (1.0, "honest-completeness".into()),
        "substitute" | "random-outputs" => (0.0, "fingerprint-separation".into()),
        "position-guess" => {
            let p = analytic_attack_probability(BoundKind::PositionGuess {
                n: spec.n as u64,
                k: spec.k as u64,
            })?;
            (p.value(), format!("1/C({},{})", spec.n + spec.k, spec.k))
        }
        "cache-guess" => {
            let p = analytic_attack_probability(BoundKind::CacheGuess {
                cache_size: spec.cache_size as u64,
            })?;
            (p.value(), format!("1/{}", spec.cache_size))
        }
        "subset-drop" => {
            let drop: u64 = spec
                .strategy
                .split(':')
                .nth(1)
                .map(|v| v.parse())
                .unwrap_or(Ok(1))
                .map_err(|_| Error::InvalidArgument("bad drop count".into()))?;
            let p = analytic_attack_probability(BoundKind::SubsetDrop {
                n: spec.n as u64,
                k: spec.k as u64,
                drop,
            })?;
            (
                p.value(),
                format!("C({},{drop})/C({},{drop})", spec.n, spec.n + spec.k),
            )
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "no analytic bound for strategy `{other}`"
            )))
        }
    })
}

/// One full verification game per trial: fresh request, provider response
/// under the chosen strategy, then verification. Success means the
/// response verified. Protocol 2 requires trained (or synthetic) modules.
pub fn run_attack_experiment(
    model: &ModelParams,
    modules: Option<&NoiseModules>,
    spec: &ExperimentSpec,
) -> Result<ExperimentReport> {
    if spec.trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    let start = Instant::now();
    let cache = generate_cache(
        model,
        spec.cache_size,
        spec.k,
        &mut Prng::from_seed(spec.master_seed ^ 0xCAC8E),
    )?;
    let strategy = build_strategy(&spec.strategy, model)?;
    let ctx = PublicContext {
        model,
        cache: &cache,
        placement: spec.placement,
    };
    if spec.protocol == 2 && modules.is_none() {
        return Err(Error::InvalidArgument(
            "protocol 2 experiments need noise modules".into(),
        ));
    }

    let trial = |index: u64| -> Result<bool> {
        let mut rng = Prng::from_seed(trial_seed(spec.master_seed, index));
        let prompt = rng.tokens(spec.n, model.config.vocab_size as u32);
        let sequence = cache.draw(&mut rng).clone();
        let payload = match spec.protocol {
            1 => {
                let req = match spec.placement {
                    SentinelPlacement::Random => build_request(&prompt, &sequence, &mut rng)?,
                    SentinelPlacement::Appended => {
                        let slots: Vec<usize> = (spec.n + 1..=spec.n + spec.k).collect();
                        build_request_at(&prompt, &sequence, &slots)?
                    }
                };
                RequestPayload::Plain(req)
            }
            2 => {
                let m = modules.unwrap();
                let slots = match spec.placement {
                    SentinelPlacement::Random => {
                        rng.sample_without_replacement(spec.n + spec.k, spec.k)?
                    }
                    SentinelPlacement::Appended => (spec.n + 1..=spec.n + spec.k).collect(),
                };
                let req = build_noisy_request_at(
                    model,
                    &prompt,
                    &sequence,
                    &m.noise_set,
                    m,
                    &slots,
                    &mut rng,
                    NoiseMode::Shared,
                )?;
                RequestPayload::Noisy(req)
            }
            p => return Err(Error::InvalidArgument(format!("unknown protocol {p}"))),
        };
        let view = make_view(&payload, spec.mode);
        let sealed = SealedRequest::new(&payload);
        let response = run_provider(strategy.as_ref(), &ctx, &view, &sealed, &mut rng)?;
        match &payload {
            RequestPayload::Plain(req) => {
                Ok(verify(&response.rows, req, &cache, spec.tolerance)?.verified)
            }
            RequestPayload::Noisy(req) => Ok(verify_noisy(
                &response.rows,
                req,
                &cache,
                modules.unwrap(),
                model,
                spec.tolerance,
            )?
            .verified),
        }
    };

    let outcomes = run_trials(spec.trials, spec.workers, trial)?;
    let successes = outcomes.iter().filter(|&&s| s).count() as u64;
    let empirical_rate = successes as f64 / spec.trials as f64;
    let (analytic_bound, analytic_formula) = analytic_for(spec)?;
    Ok(ExperimentReport {
        spec: spec.clone(),
        successes,
        trials: spec.trials,
        empirical_rate,
        empirical_se: standard_error(empirical_rate, spec.trials),
        analytic_bound,
        analytic_formula,
        within_3_sigma: standard_error_band(empirical_rate, spec.trials, analytic_bound, 3.0),
        wall_clock_ms: start.elapsed().as_millis() as u64,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseSoundnessSpec {
    pub sequences: u64,
    pub sequence_len: usize,
    pub master_seed: u64,
    pub workers: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct NoiseSoundnessReport {
    pub positions: u64,
    pub per_position_rate: f64,
    pub per_position_bound: f64,
    pub within_3_sigma: bool,
    pub sequences: u64,
    pub sequence_pass_rate: f64,
    pub sequence_rate_cap: f64,
    pub sequence_rate_within_cap: bool,
    pub wall_clock_ms: u64,
}

/// Random-hidden-state adversary against the noise check: every position
/// gets an i.i.d. random hidden row while the verifier's noise ids are
/// drawn independently per position, so the per-position match rate is
/// exactly 1/|B| in expectation no matter what the predictor looks like.
pub fn run_noise_soundness(
    modules: &NoiseModules,
    hidden_dim: usize,
    spec: &NoiseSoundnessSpec,
) -> Result<NoiseSoundnessReport> {
    if spec.sequences == 0 || spec.sequence_len == 0 {
        return Err(Error::InvalidArgument(
            "need sequences, sequence_len >= 1".into(),
        ));
    }
    let start = Instant::now();
    let per_seq = |index: u64| -> Result<(u64, bool)> {
        let mut rng = Prng::from_seed(trial_seed(spec.master_seed, index));
        let mut matches = 0u64;
        for _ in 0..spec.sequence_len {
            let h: Vec<f64> = (0..hidden_dim).map(|_| rng.normal(0.0, 1.0)).collect();
            let b = modules.noise_set.draw(&mut rng);
            if predict_noise(&modules.predictor, &h)? == b {
                matches += 1;
            }
        }
        Ok((matches, matches == spec.sequence_len as u64))
    };
    let outcomes: Result<Vec<(u64, bool)>> = if spec.workers == 0 {
        (0..spec.sequences).into_par_iter().map(per_seq).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(spec.workers)
            .build()
            .map_err(|e| Error::Numeric(format!("thread pool: {e}")))?;
        pool.install(|| (0..spec.sequences).into_par_iter().map(per_seq).collect())
    };
    let outcomes = outcomes?;
    let positions = spec.sequences * spec.sequence_len as u64;
    let matches: u64 = outcomes.iter().map(|&(m, _)| m).sum();
    let seq_passes = outcomes.iter().filter(|&&(_, all)| all).count() as u64;
    let per_position_rate = matches as f64 / positions as f64;
    let bound = 1.0 / modules.noise_set.size() as f64;
    let cap = (bound + 3.0 * standard_error(bound, positions)).powi(spec.sequence_len as i32);
    let sequence_pass_rate = seq_passes as f64 / spec.sequences as f64;
    Ok(NoiseSoundnessReport {
        positions,
        per_position_rate,
        per_position_bound: bound,
        within_3_sigma: standard_error_band(per_position_rate, positions, bound, 3.0),
        sequences: spec.sequences,
        sequence_pass_rate,
        sequence_rate_cap: cap,
        sequence_rate_within_cap: sequence_pass_rate <= cap,
        wall_clock_ms: start.elapsed().as_millis() as u64,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseCompletenessSpec {
    pub sequences: u64,
    /// Non-sentinel positions per sequence.
    pub sequence_len: usize,
    pub k: usize,
    pub cache_size: usize,
    pub mode: NoiseMode,
    /// Independent sequences used to estimate per-position accuracy.
    pub accuracy_sequences: u64,
    pub corpus_seed: u64,
    pub master_seed: u64,
    pub tolerance: f64,
    pub workers: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct NoiseCompletenessReport {
    pub sequences: u64,
    pub measured_accuracy: f64,
    pub predicted_rejection: f64,
    pub empirical_rejection: f64,
    pub within_3_sigma: bool,
    pub per_position_mismatch_rate: f64,
    pub wall_clock_ms: u64,
}

/// Honest-provider runs through the full noisy pipeline. Per-position
/// accuracy is measured on an independent batch of sequences, the product
/// formula predicts the sequence rejection rate, and the main batch checks
/// the prediction to 3 sigma. Prompts come from the training-time Markov
/// source so accuracy is measured on-distribution.
pub fn run_noise_completeness(
    model: &ModelParams,
    modules: &NoiseModules,
    spec: &NoiseCompletenessSpec,
) -> Result<NoiseCompletenessReport> {
    if spec.sequences == 0 || spec.accuracy_sequences == 0 || spec.sequence_len == 0 {
        return Err(Error::InvalidArgument("empty completeness spec".into()));
    }
    let start = Instant::now();
    let cache = generate_cache(
        model,
        spec.cache_size,
        spec.k,
        &mut Prng::from_seed(spec.master_seed ^ 0xCAC8E),
    )?;
    let source = crate::model::MarkovSource::new(model.config.vocab_size as u32, spec.corpus_seed);

    // (mismatched positions, rejected) for one honest sequence.
    let run_one = |seed: u64| -> Result<(u64, bool)> {
        let mut rng = Prng::from_seed(seed);
        let prompt = source.generate(spec.sequence_len, &mut rng);
        let sequence = cache.draw(&mut rng).clone();
        let req = crate::protocol2::build_noisy_request(
            model,
            &prompt,
            &sequence,
            &modules.noise_set,
            modules,
            &mut rng,
            spec.mode,
        )?;
        let out = crate::model::forward(
            model,
            crate::model::ForwardInput::Embeddings(&req.embeddings),
            &req.base.mask2d,
            &req.base.position_ids,
        )?;
        let result = verify_noisy(&out.hidden, &req, &cache, modules, model, spec.tolerance)?;
        if !result.sentinel_check.verified {
            return Err(Error::Numeric(
                "honest sentinel check failed; determinism broken".into(),
            ));
        }
        let mismatches = result.noise_matches.iter().filter(|&&(_, ok)| !ok).count() as u64;
        Ok((mismatches, !result.verified))
    };

    let acc_runs: Result<Vec<(u64, bool)>> = (0..spec.accuracy_sequences)
        .into_par_iter()
        .map(|i| run_one(trial_seed(spec.master_seed ^ 0xACC, i)))
        .collect();
    let acc_runs = acc_runs?;
    let acc_positions = spec.accuracy_sequences * spec.sequence_len as u64;
    let acc_mismatches: u64 = acc_runs.iter().map(|&(m, _)| m).sum();
    let measured_accuracy = 1.0 - acc_mismatches as f64 / acc_positions as f64;

    let main_runs: Result<Vec<(u64, bool)>> = (0..spec.sequences)
        .into_par_iter()
        .map(|i| run_one(trial_seed(spec.master_seed, i)))
        .collect();
    let main_runs = main_runs?;
    let rejected = main_runs.iter().filter(|&&(_, r)| r).count() as u64;
    let mismatches: u64 = main_runs.iter().map(|&(m, _)| m).sum();
    let empirical_rejection = rejected as f64 / spec.sequences as f64;
    let predicted_rejection = 1.0 - measured_accuracy.powi(spec.sequence_len as i32);

    Ok(NoiseCompletenessReport {
        sequences: spec.sequences,
        measured_accuracy,
        predicted_rejection,
        empirical_rejection,
        within_3_sigma: standard_error_band(
            empirical_rejection,
            spec.sequences,
            predicted_rejection,
            3.0,
        ),
        per_position_mismatch_rate: mismatches as f64
            / (spec.sequences * spec.sequence_len as u64) as f64,
        wall_clock_ms: start.elapsed().as_millis() as u64,
    })
}

/// Convenience used by study code and tests: honest logits for a request.
pub fn honest_logits(model: &ModelParams, payload: &RequestPayload) -> Result<Tensor> {
    SealedRequest::new(payload).forward_with(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::protocol2::{init_modules, NoiseSet};

    fn model() -> ModelParams {
        init_params(&ModelConfig::desk(), 150).unwrap()
    }

    #[test]
    fn trial_seed_is_stable_and_spread() {
        let a = trial_seed(1, 0);
        let b = trial_seed(1, 1);
        let c = trial_seed(2, 0);
        assert_eq!(a, trial_seed(1, 0));
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn honest_strategy_always_passes() {
        let model = model();
        let spec = ExperimentSpec {
            trials: 50,
            n: 6,
            cache_size: 10,
            master_seed: 3,
            ..Default::default()
        };
        let report = run_attack_experiment(&model, None, &spec).unwrap();
        assert_eq!(report.successes, 50);
        assert!(report.within_3_sigma);
    }

    #[test]
    fn report_identical_across_worker_counts() {
        let model = model();
        let spec1 = ExperimentSpec {
            strategy: "cache-guess".into(),
            placement: SentinelPlacement::Appended,
            trials: 2000,
            n: 6,
            cache_size: 20,
            master_seed: 5,
            workers: 1,
            ..Default::default()
        };
        let spec8 = ExperimentSpec {
            workers: 8,
            ..spec1.clone()
        };
        let r1 = run_attack_experiment(&model, None, &spec1).unwrap();
        let r8 = run_attack_experiment(&model, None, &spec8).unwrap();
        assert_eq!(r1.successes, r8.successes);
        // Full reports match except wall clock and the worker knob.
        let mut a = r1.clone();
        let mut b = r8.clone();
        a.spec.workers = 0;
        b.spec.workers = 0;
        assert_eq!(a.deterministic_json(), b.deterministic_json());
    }

    #[test]
    fn cache_guess_rate_near_reciprocal_cache_size() {
        let model = model();
        let spec = ExperimentSpec {
            strategy: "cache-guess".into(),
            placement: SentinelPlacement::Appended,
            trials: 5000,
            n: 6,
            cache_size: 10,
            master_seed: 7,
            ..Default::default()
        };
        let report = run_attack_experiment(&model, None, &spec).unwrap();
        assert_eq!(report.analytic_bound, 0.1);
        assert!(report.within_3_sigma, "{report:?}");
    }

    #[test]
    fn random_outputs_never_pass() {
        let model = model();
        let spec = ExperimentSpec {
            strategy: "random-outputs".into(),
            trials: 300,
            n: 5,
            cache_size: 8,
            tolerance: 1e-6,
            master_seed: 9,
            ..Default::default()
        };
        let report = run_attack_experiment(&model, None, &spec).unwrap();
        assert_eq!(report.successes, 0);
        assert!(report.within_3_sigma);
    }

    #[test]
    fn noise_soundness_hits_chance_rate() {
        let model = model();
        let modules = init_modules(&model, NoiseSet::new(16).unwrap(), 11).unwrap();
        let spec = NoiseSoundnessSpec {
            sequences: 1250,
            sequence_len: 8,
            master_seed: 13,
            workers: 0,
        };
        let report = run_noise_soundness(&modules, 64, &spec).unwrap();
        assert_eq!(report.positions, 10_000);
        assert!(report.within_3_sigma, "{report:?}");
        assert!(report.sequence_rate_within_cap);
    }

    #[test]
    fn protocol2_requires_modules() {
        let model = model();
        let spec = ExperimentSpec {
            protocol: 2,
            trials: 1,
            ..Default::default()
        };
        assert!(run_attack_experiment(&model, None, &spec).is_err());
    }
}
