//! Non-interactive extension: pre-generated per-step sentinel positions,
//! batch transcript verification, and the greedy-sampling argmax check.

use crate::error::{Error, Result};
use crate::numerics::kernels::argmax;
use crate::numerics::{Prng, Tensor};
use crate::protocol1::{verify, AugmentedRequest, SentinelCache, SentinelSequence};

/// Sentinel slots for each of M future generation steps. At step i the
/// prompt has grown to N_i = N + i - 1 tokens, so slots are drawn from
/// [1, N_i + K].
#[derive(Clone, Debug, PartialEq)]
pub struct PositionSchedule {
    pub n0: usize,
    pub k: usize,
    pub steps: Vec<Vec<usize>>,
}

impl PositionSchedule {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

pub fn pregenerate_schedule(
    n: usize,
    k: usize,
    m: usize,
    rng: &mut Prng,
) -> Result<PositionSchedule> {
    if n == 0 || k == 0 || m == 0 {
        return Err(Error::InvalidArgument(
            "schedule requires N, K, M all >= 1".into(),
        ));
    }
    let mut steps = Vec::with_capacity(m);
    for i in 1..=m {
        let n_i = n + i - 1;
        steps.push(rng.sample_without_replacement(n_i + k, k)?);
    }
    Ok(PositionSchedule { n0: n, k, steps })
}

/// Verifier-side record of one generation step.
#[derive(Clone, Debug)]
pub struct TranscriptStep {
    /// Full logit matrix of the augmented forward pass at this step.
    pub logits: Tensor,
    /// The augmented request the step was built from.
    pub request: AugmentedRequest,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct TranscriptVerdict {
    pub verified: bool,
    /// 1-based step of the first sentinel-check failure.
    pub first_failure: Option<usize>,
    pub per_step_max_l1: Vec<f64>,
}

/// Runs the sentinel check for every step against the pre-generated
/// schedule. A step whose request deviates from the schedule fails
/// verification outright. An empty transcript is vacuously verified.
pub fn verify_transcript(
    transcript: &[TranscriptStep],
    schedule: &PositionSchedule,
    cache: &SentinelCache,
    tolerance: f64,
) -> Result<TranscriptVerdict> {
    if transcript.len() > schedule.len() {
        return Err(Error::InvalidArgument(format!(
            "transcript has {} steps but the schedule only covers {}",
            transcript.len(),
            schedule.len()
        )));
    }
    let mut first_failure = None;
    let mut per_step_max_l1 = Vec::with_capacity(transcript.len());
    for (i, step) in transcript.iter().enumerate() {
        let scheduled = &schedule.steps[i];
        let ok = if &step.request.sentinel_positions != scheduled {
            per_step_max_l1.push(f64::INFINITY);
            false
        } else {
            let result = verify(&step.logits, &step.request, cache, tolerance)?;
            per_step_max_l1.push(
                result
                    .per_sentinel_l1
                    .iter()
                    .cloned()
                    .fold(0.0f64, f64::max),
            );
            result.verified
        };
        if !ok && first_failure.is_none() {
            first_failure = Some(i + 1);
        }
    }
    Ok(TranscriptVerdict {
        verified: first_failure.is_none(),
        first_failure,
        per_step_max_l1,
    })
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct GreedyVerdict {
    pub verified: bool,
    /// 1-based step of the first argmax mismatch.
    pub first_failure: Option<usize>,
}

/// Checks that each claimed token is the argmax (ties to the lowest index)
/// of the logit row at the last original slot of its step.
pub fn verify_greedy_sampling(
    transcript: &[TranscriptStep],
    claimed_tokens: &[u32],
) -> Result<GreedyVerdict> {
    if transcript.len() != claimed_tokens.len() {
        return Err(Error::InvalidArgument(format!(
            "{} transcript steps vs {} claimed tokens",
            transcript.len(),
            claimed_tokens.len()
        )));
    }
    let mut first_failure = None;
    for (i, (step, &claimed)) in transcript.iter().zip(claimed_tokens).enumerate() {
        let row = step.request.last_original_slot() - 1;
        let expected = argmax(step.logits.row(row)) as u32;
        if expected != claimed {
            first_failure = Some(i + 1);
            break;
        }
    }
    Ok(GreedyVerdict {
        verified: first_failure.is_none(),
        first_failure,
    })
}

/// Runs an honest augmented generation: at each step the context is spliced
/// with a fresh cache sequence at the scheduled slots, forwarded, and the
/// next token taken greedily from the last original slot. Returns the
/// transcript and the emitted tokens.
pub fn generate_with_schedule(
    model: &crate::model::ModelParams,
    cache: &SentinelCache,
    prompt: &[u32],
    schedule: &PositionSchedule,
    steps: usize,
    rng: &mut Prng,
) -> Result<(Vec<TranscriptStep>, Vec<u32>)> {
    if steps > schedule.len() {
        return Err(Error::InvalidArgument(format!(
            "{steps} steps exceed schedule of {}",
            schedule.len()
        )));
    }
    let mut context = prompt.to_vec();
    let mut transcript = Vec::with_capacity(steps);
    let mut emitted = Vec::with_capacity(steps);
    for i in 0..steps {
        let sequence: SentinelSequence = cache.draw(rng).clone();
        let request =
            crate::protocol1::build_request_at(&context, &sequence, &schedule.steps[i])?;
        let out = crate::model::forward(
            model,
            crate::model::ForwardInput::Tokens(&request.tokens),
            &request.mask2d,
            &request.position_ids,
        )?;
        let row = request.last_original_slot() - 1;
        let token = argmax(out.logits.row(row)) as u32;
        transcript.push(TranscriptStep {
            logits: out.logits,
            request,
        });
        emitted.push(token);
        context.push(token);
    }
    Ok((transcript, emitted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_greedy, init_params, ModelConfig, ModelParams};
    use crate::protocol1::generate_cache;

    fn setup() -> (ModelParams, SentinelCache) {
        let model = init_params(&ModelConfig::desk(), 80).unwrap();
        let cache = generate_cache(&model, 8, 3, &mut Prng::from_seed(1)).unwrap();
        (model, cache)
    }

    #[test]
    fn schedule_ranges_and_determinism() {
        let mut rng = Prng::from_seed(2);
        let schedule = pregenerate_schedule(5, 3, 12, &mut rng).unwrap();
        assert_eq!(schedule.len(), 12);
        for (i, step) in schedule.steps.iter().enumerate() {
            let bound = 5 + i + 3;
            assert!(step.iter().all(|&p| p >= 1 && p <= bound));
            assert_eq!(step.len(), 3);
        }
        let again = pregenerate_schedule(5, 3, 12, &mut Prng::from_seed(2)).unwrap();
        assert_eq!(schedule, again);
    }

    #[test]
    fn honest_transcript_verifies_and_matches_plain_greedy() {
        let (model, cache) = setup();
        let prompt = [3u32, 41, 7, 20];
        let schedule = pregenerate_schedule(prompt.len(), 3, 10, &mut Prng::from_seed(3)).unwrap();
        let (transcript, emitted) = generate_with_schedule(
            &model,
            &cache,
            &prompt,
            &schedule,
            10,
            &mut Prng::from_seed(4),
        )
        .unwrap();
        let verdict = verify_transcript(&transcript, &schedule, &cache, 1e-9).unwrap();
        assert!(verdict.verified, "{verdict:?}");
        let greedy = verify_greedy_sampling(&transcript, &emitted).unwrap();
        assert!(greedy.verified);
        // Sentinels never disturb generation: plain greedy agrees.
        let (plain_tokens, _) = generate_greedy(&model, &prompt, 10).unwrap();
        assert_eq!(emitted, plain_tokens);
    }

    #[test]
    fn tampered_step_detected_at_its_index() {
        let (model, cache) = setup();
        let prompt = [9u32, 2, 55];
        let schedule = pregenerate_schedule(prompt.len(), 3, 8, &mut Prng::from_seed(5)).unwrap();
        let (mut transcript, emitted) = generate_with_schedule(
            &model,
            &cache,
            &prompt,
            &schedule,
            8,
            &mut Prng::from_seed(6),
        )
        .unwrap();
        // Corrupt the sentinel rows of step 7.
        let step = &mut transcript[6];
        for &slot in step.request.sentinel_positions.clone().iter() {
            for v in step.logits.row_mut(slot - 1) {
                *v += 1.0;
            }
        }
        let verdict = verify_transcript(&transcript, &schedule, &cache, 1e-9).unwrap();
        assert!(!verdict.verified);
        assert_eq!(verdict.first_failure, Some(7));
        // Greedy check still passes; only sentinels were touched.
        assert!(verify_greedy_sampling(&transcript, &emitted).unwrap().verified);
    }

    #[test]
    fn empty_transcript_vacuously_verified() {
        let (_, cache) = setup();
        let schedule = pregenerate_schedule(4, 3, 2, &mut Prng::from_seed(7)).unwrap();
        let verdict = verify_transcript(&[], &schedule, &cache, 1e-9).unwrap();
        assert!(verdict.verified);
        assert_eq!(verdict.first_failure, None);
    }

    #[test]
    fn transcript_longer_than_schedule_rejected() {
        let (model, cache) = setup();
        let prompt = [1u32, 2, 3];
        let schedule = pregenerate_schedule(prompt.len(), 3, 4, &mut Prng::from_seed(8)).unwrap();
        let (transcript, _) = generate_with_schedule(
            &model,
            &cache,
            &prompt,
            &schedule,
            4,
            &mut Prng::from_seed(9),
        )
        .unwrap();
        let short = pregenerate_schedule(prompt.len(), 3, 2, &mut Prng::from_seed(8)).unwrap();
        assert!(verify_transcript(&transcript, &short, &cache, 1e-9).is_err());
    }

    #[test]
    fn greedy_check_catches_second_best_swap() {
        let (model, cache) = setup();
        let prompt = [17u32, 30];
        let schedule = pregenerate_schedule(prompt.len(), 3, 5, &mut Prng::from_seed(10)).unwrap();
        let (transcript, mut emitted) = generate_with_schedule(
            &model,
            &cache,
            &prompt,
            &schedule,
            5,
            &mut Prng::from_seed(11),
        )
        .unwrap();
        let row = transcript[2].request.last_original_slot() - 1;
        let second = crate::numerics::kernels::second_argmax(transcript[2].logits.row(row));
        emitted[2] = second as u32;
        let verdict = verify_greedy_sampling(&transcript, &emitted).unwrap();
        assert!(!verdict.verified);
        assert_eq!(verdict.first_failure, Some(3));
    }

    #[test]
    fn exact_tie_accepts_lowest_index() {
        let (_, cache) = setup();
        let schedule = pregenerate_schedule(1, 3, 1, &mut Prng::from_seed(12)).unwrap();
        // Hand-built step: two-way tie in the generation row.
        let sequence = cache.sequence(0).clone();
        let request =
            crate::protocol1::build_request_at(&[5], &sequence, &schedule.steps[0]).unwrap();
        let mut logits = Tensor::zeros(vec![request.len(), 64]);
        let row = request.last_original_slot() - 1;
        logits.row_mut(row)[10] = 3.0;
        logits.row_mut(row)[11] = 3.0;
        let step = TranscriptStep { logits, request };
        assert!(verify_greedy_sampling(&[step.clone()], &[10]).unwrap().verified);
        assert!(!verify_greedy_sampling(&[step], &[11]).unwrap().verified);
    }

    #[test]
    fn schedule_mismatch_fails_verification() {
        let (model, cache) = setup();
        let prompt = [1u32, 2, 3, 4];
        let schedule = pregenerate_schedule(prompt.len(), 3, 3, &mut Prng::from_seed(13)).unwrap();
        let (transcript, _) = generate_with_schedule(
            &model,
            &cache,
            &prompt,
            &schedule,
            3,
            &mut Prng::from_seed(14),
        )
        .unwrap();
        let mut other = schedule.clone();
        // Shift step 2's scheduled slots to something else.
        other.steps[1] = if other.steps[1][0] == 1 {
            vec![2, 3, 4]
        } else {
            vec![1, 2, 3]
        };
        if other.steps[1] != schedule.steps[1] {
            let verdict = verify_transcript(&transcript, &other, &cache, 1e-9).unwrap();
            assert!(!verdict.verified);
            assert_eq!(verdict.first_failure, Some(2));
        }
    }
}
