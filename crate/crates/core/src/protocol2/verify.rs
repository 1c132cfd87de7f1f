use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::Tensor;
use crate::protocol1::{SentinelCache, VerificationResult};
use crate::protocol2::{predict_noise, NoiseModules, NoisyRequest};

/// Conjunction of the sentinel logit check and the per-slot noise match.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct NoisyVerificationResult {
    pub sentinel_check: VerificationResult,
    /// (slot, predicted == sampled) for every non-sentinel slot.
    pub noise_matches: Vec<(usize, bool)>,
    pub verified: bool,
}

/// Verifies returned hidden states: sentinel rows are projected to logits
/// through the public unembedding and matched against the cache, every
/// non-sentinel row must yield the sampled noise id, and both checks must
/// pass. Modules trained against a different base model are rejected.
pub fn verify_noisy(
    hidden: &Tensor,
    request: &NoisyRequest,
    cache: &SentinelCache,
    modules: &NoiseModules,
    model: &ModelParams,
    tolerance: f64,
) -> Result<NoisyVerificationResult> {
    if modules.base_model_hash != model.hash {
        return Err(Error::Integrity(
            "noise modules were trained against a different base model".into(),
        ));
    }
    if tolerance < 0.0 {
        return Err(Error::InvalidArgument("tolerance must be >= 0".into()));
    }
    if hidden.rank() != 2
        || hidden.rows() != request.base.len()
        || hidden.cols() != model.config.hidden_dim
    {
        return Err(Error::ShapeMismatch(format!(
            "hidden {:?} for request of length {}",
            hidden.shape(),
            request.base.len()
        )));
    }
    let entry = cache
        .lookup(&request.base.sentinel_sequence)
        .ok_or(Error::CacheMiss)?;

    // Sentinel rows: logit projection then the Protocol 1 distance check.
    let mut per_sentinel_l1 = Vec::with_capacity(request.base.k());
    for (i, &slot) in request.base.sentinel_positions.iter().enumerate() {
        let row = Tensor::new(
            vec![1, hidden.cols()],
            hidden.row(slot - 1).to_vec(),
        )?;
        let logits = crate::numerics::kernels::matmul(&row, &model.unembedding)?;
        let mut dist = 0.0;
        for (a, b) in logits.data().iter().zip(entry.row(i)) {
            dist += (a - b).abs();
        }
        per_sentinel_l1.push(dist);
    }
    let sentinel_verified = per_sentinel_l1.iter().all(|&d| d <= tolerance);
    let sentinel_check = VerificationResult {
        verified: sentinel_verified,
        per_sentinel_l1,
        tolerance,
    };

    let mut noise_matches = Vec::with_capacity(request.noise_ids.len());
    for &(slot, id) in &request.noise_ids {
        let predicted = predict_noise(&modules.predictor, hidden.row(slot - 1))?;
        noise_matches.push((slot, predicted == id));
    }

    let verified = sentinel_check.verified && noise_matches.iter().all(|&(_, ok)| ok);
    Ok(NoisyVerificationResult {
        sentinel_check,
        noise_matches,
        verified,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_params, ForwardInput, ModelConfig};
    use crate::numerics::Prng;
    use crate::protocol1::generate_cache;
    use crate::protocol2::{build_noisy_request, init_modules, NoiseMode, NoiseSet};

    struct Fixture {
        model: ModelParams,
        cache: SentinelCache,
        modules: NoiseModules,
        noise_set: NoiseSet,
    }

    fn fixture() -> Fixture {
        let model = init_params(&ModelConfig::desk(), 100).unwrap();
        let cache = generate_cache(&model, 6, 3, &mut Prng::from_seed(1)).unwrap();
        let noise_set = NoiseSet::new(8).unwrap();
        let modules = init_modules(&model, noise_set, 2).unwrap();
        Fixture {
            model,
            cache,
            modules,
            noise_set,
        }
    }

    fn honest_hidden(f: &Fixture, req: &NoisyRequest) -> Tensor {
        forward(
            &f.model,
            ForwardInput::Embeddings(&req.embeddings),
            &req.base.mask2d,
            &req.base.position_ids,
        )
        .unwrap()
        .hidden
    }

    /// Overwrites non-sentinel hidden rows with one-hot codes of the noise
    /// id and aims an identity-block predictor at them.
    fn make_noise_check_perfect(f: &mut Fixture, req: &NoisyRequest, hidden: &mut Tensor) {
        let b = f.noise_set.size();
        let mut weight = Tensor::zeros(vec![f.model.config.hidden_dim, b]);
        for i in 0..b {
            weight.set(i, i, 1.0);
        }
        f.modules.predictor.weight = weight;
        f.modules.predictor.bias = Tensor::vector(vec![0.0; b]);
        for &(slot, id) in &req.noise_ids {
            let row = hidden.row_mut(slot - 1);
            row.fill(0.0);
            row[id as usize] = 1.0;
        }
    }

    #[test]
    fn honest_sentinels_with_perfect_noise_modules_verify() {
        let mut f = fixture();
        let mut rng = Prng::from_seed(3);
        let seq = f.cache.draw(&mut rng).clone();
        let req = build_noisy_request(
            &f.model,
            &[4, 9, 2, 7],
            &seq,
            &f.noise_set,
            &f.modules,
            &mut rng,
            NoiseMode::Shared,
        )
        .unwrap();
        let mut hidden = honest_hidden(&f, &req);
        make_noise_check_perfect(&mut f, &req, &mut hidden);
        let result = verify_noisy(&hidden, &req, &f.cache, &f.modules, &f.model, 1e-9).unwrap();
        assert!(result.sentinel_check.verified);
        assert!(result.sentinel_check.per_sentinel_l1.iter().all(|&d| d == 0.0));
        assert!(result.noise_matches.iter().all(|&(_, ok)| ok));
        assert!(result.verified);
    }

    #[test]
    fn random_hidden_rows_match_at_roughly_chance_rate() {
        let f = fixture();
        let mut rng = Prng::from_seed(4);
        let trials = 20_000;
        let mut matches = 0usize;
        for _ in 0..trials {
            let h: Vec<f64> = (0..64).map(|_| rng.normal(0.0, 1.0)).collect();
            let b = f.noise_set.draw(&mut rng);
            if predict_noise(&f.modules.predictor, &h).unwrap() == b {
                matches += 1;
            }
        }
        let rate = matches as f64 / trials as f64;
        let p = 1.0 / 8.0;
        let se = (p * (1.0 - p) / trials as f64).sqrt();
        assert!((rate - p).abs() <= 3.0 * se, "rate {rate} vs {p} +- {se}");
    }

    #[test]
    fn tampered_sentinel_row_fails_despite_noise_matches() {
        let mut f = fixture();
        let mut rng = Prng::from_seed(5);
        let seq = f.cache.draw(&mut rng).clone();
        let req = build_noisy_request(
            &f.model,
            &[1, 2, 3],
            &seq,
            &f.noise_set,
            &f.modules,
            &mut rng,
            NoiseMode::Shared,
        )
        .unwrap();
        let mut hidden = honest_hidden(&f, &req);
        make_noise_check_perfect(&mut f, &req, &mut hidden);
        let slot = req.base.sentinel_positions[1];
        hidden.row_mut(slot - 1)[0] += 0.5;
        let result = verify_noisy(&hidden, &req, &f.cache, &f.modules, &f.model, 1e-9).unwrap();
        assert!(!result.sentinel_check.verified);
        assert!(result.noise_matches.iter().all(|&(_, ok)| ok));
        assert!(!result.verified);
    }

    #[test]
    fn single_noise_mismatch_fails_despite_honest_sentinels() {
        let mut f = fixture();
        let mut rng = Prng::from_seed(6);
        let seq = f.cache.draw(&mut rng).clone();
        let req = build_noisy_request(
            &f.model,
            &[8, 8, 8],
            &seq,
            &f.noise_set,
            &f.modules,
            &mut rng,
            NoiseMode::PerPosition,
        )
        .unwrap();
        let mut hidden = honest_hidden(&f, &req);
        make_noise_check_perfect(&mut f, &req, &mut hidden);
        // Flip one non-sentinel row to encode the wrong id.
        let (slot, id) = req.noise_ids[1];
        let wrong = (id + 1) % f.noise_set.size() as u32;
        let row = hidden.row_mut(slot - 1);
        row.fill(0.0);
        row[wrong as usize] = 1.0;
        let result = verify_noisy(&hidden, &req, &f.cache, &f.modules, &f.model, 1e-9).unwrap();
        assert!(result.sentinel_check.verified);
        assert!(!result.verified);
        assert_eq!(
            result
                .noise_matches
                .iter()
                .filter(|&&(_, ok)| !ok)
                .count(),
            1
        );
    }

    #[test]
    fn base_hash_mismatch_rejected() {
        let f = fixture();
        let other = init_params(&ModelConfig::desk(), 999).unwrap();
        let mut rng = Prng::from_seed(7);
        let seq = f.cache.draw(&mut rng).clone();
        let req = build_noisy_request(
            &f.model,
            &[1, 2],
            &seq,
            &f.noise_set,
            &f.modules,
            &mut rng,
            NoiseMode::Shared,
        )
        .unwrap();
        let hidden = honest_hidden(&f, &req);
        assert!(matches!(
            verify_noisy(&hidden, &req, &f.cache, &f.modules, &other, 1e-9),
            Err(Error::Integrity(_))
        ));
    }
}
