//! Fingerprint-separability study: how far perturbed models sit from the
//! base model under the L1 fingerprint distance, versus the intra-model
//! nearest-neighbor distance across distinct sequences.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::{Prng, Tensor};
use crate::protocol1::{fingerprint, fingerprint_distance, SentinelSequence};

#[derive(Clone, Debug, Serialize)]
pub struct StudyRow {
    pub label: String,
    pub min_distance: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct StudyReport {
    pub sequences: usize,
    pub k: usize,
    /// Same model, same sequence; exactly zero on a deterministic core.
    pub honest_max_distance: f64,
    /// Same model, nearest pair of distinct sequences.
    pub intra_model_min_nn: f64,
    pub rows: Vec<StudyRow>,
    pub wall_clock_ms: u64,
}

/// Compares the base model's fingerprints against each perturbed model
/// over `n_sequences` distinct random sentinel sequences.
pub fn fingerprint_study(
    base: &ModelParams,
    perturbations: &[(String, ModelParams)],
    n_sequences: usize,
    k: usize,
    rng: &mut Prng,
) -> Result<StudyReport> {
    if n_sequences == 0 || k == 0 {
        return Err(Error::InvalidArgument("need sequences, K >= 1".into()));
    }
    let start = Instant::now();
    let vocab = base.config.vocab_size as u32;

    let mut seen = std::collections::HashSet::new();
    let mut sequences = Vec::with_capacity(n_sequences);
    while sequences.len() < n_sequences {
        let tokens = rng.tokens(k, vocab);
        if seen.insert(tokens.clone()) {
            sequences.push(SentinelSequence(tokens));
        }
    }

    let base_fps: Result<Vec<Tensor>> = sequences
        .par_iter()
        .map(|s| fingerprint(base, s))
        .collect();
    let base_fps = base_fps?;

    // Honest distance: same model, same sequence.
    let honest_max_distance = base_fps
        .iter()
        .map(|f| fingerprint_distance(f, f))
        .fold(0.0f64, f64::max);

    // Intra-model nearest neighbor across distinct sequences.
    let intra_model_min_nn = (0..base_fps.len())
        .into_par_iter()
        .map(|i| {
            let mut min = f64::INFINITY;
            for j in (i + 1)..base_fps.len() {
                min = min.min(fingerprint_distance(&base_fps[i], &base_fps[j]));
            }
            min
        })
        .reduce(|| f64::INFINITY, f64::min);

    let mut rows = Vec::with_capacity(perturbations.len());
    for (label, perturbed) in perturbations {
        let min: Result<f64> = sequences
            .par_iter()
            .zip(&base_fps)
            .map(|(s, base_fp)| Ok(fingerprint_distance(base_fp, &fingerprint(perturbed, s)?)))
            .try_reduce(|| f64::INFINITY, |a, b| Ok(a.min(b)));
        rows.push(StudyRow {
            label: label.clone(),
            min_distance: min?,
        });
    }

    Ok(StudyReport {
        sequences: n_sequences,
        k,
        honest_max_distance,
        intra_model_min_nn,
        rows,
        wall_clock_ms: start.elapsed().as_millis() as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, perturb_low_rank, ModelConfig};

    #[test]
    fn study_reports_zero_honest_and_positive_perturbed() {
        let base = init_params(&ModelConfig::desk(), 170).unwrap();
        let perturbations = vec![
            ("low-rank:63".to_string(), perturb_low_rank(&base, 63).unwrap()),
            ("reseed".to_string(), init_params(&ModelConfig::desk(), 171).unwrap()),
        ];
        let mut rng = Prng::from_seed(1);
        let report = fingerprint_study(&base, &perturbations, 64, 3, &mut rng).unwrap();
        assert_eq!(report.honest_max_distance, 0.0);
        assert!(report.intra_model_min_nn > 0.0);
        for row in &report.rows {
            assert!(row.min_distance > 0.0, "{row:?}");
        }
    }
}
