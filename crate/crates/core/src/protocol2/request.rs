use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::{Prng, Tensor};
use crate::protocol1::{build_request_at, AugmentedRequest, SentinelSequence};
use crate::protocol2::{embed_noise_rows, NoiseModules, NoiseSet};

/// How noise ids are assigned across non-sentinel slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum NoiseMode {
    /// One id shared by every non-sentinel slot (the training regime).
    Shared,
    /// A fresh id per non-sentinel slot.
    PerPosition,
}

/// Sentinel-augmented request whose non-sentinel embeddings carry injected
/// noise. Sentinel slots hold the raw sentinel token embeddings, untouched
/// by any noise, so the Protocol 1 cache check applies to them unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyRequest {
    pub base: AugmentedRequest,
    /// (N+K) x d_e input embeddings actually sent to the provider.
    pub embeddings: Tensor,
    /// (slot, noise id) for every non-sentinel slot, ascending by slot.
    pub noise_ids: Vec<(usize, u32)>,
    pub mode: NoiseMode,
}

impl NoisyRequest {
    pub fn noise_id_at(&self, slot: usize) -> Option<u32> {
        self.noise_ids
            .binary_search_by_key(&slot, |&(s, _)| s)
            .ok()
            .map(|i| self.noise_ids[i].1)
    }
}

/// Noisy request with sampled sentinel slots (Protocol 1 construction) and
/// freshly drawn noise ids.
pub fn build_noisy_request(
    model: &ModelParams,
    prompt: &[u32],
    sentinel_sequence: &SentinelSequence,
    noise_set: &NoiseSet,
    modules: &NoiseModules,
    rng: &mut Prng,
    mode: NoiseMode,
) -> Result<NoisyRequest> {
    let n = prompt.len();
    let k = sentinel_sequence.len();
    if n == 0 {
        return Err(Error::InvalidArgument("prompt must be nonempty".into()));
    }
    let positions = rng.sample_without_replacement(n + k, k)?;
    build_noisy_request_at(
        model,
        prompt,
        sentinel_sequence,
        noise_set,
        modules,
        &positions,
        rng,
        mode,
    )
}

/// Same with caller-chosen sentinel slots.
#[allow(clippy::too_many_arguments)]
pub fn build_noisy_request_at(
    model: &ModelParams,
    prompt: &[u32],
    sentinel_sequence: &SentinelSequence,
    noise_set: &NoiseSet,
    modules: &NoiseModules,
    positions: &[usize],
    rng: &mut Prng,
    mode: NoiseMode,
) -> Result<NoisyRequest> {
    let base = build_request_at(prompt, sentinel_sequence, positions)?;
    let d = model.config.embed_dim;

    // Noise ids for non-sentinel slots, in slot order.
    let original_slots = base.original_slots();
    let shared = noise_set.draw(rng);
    let noise_ids: Vec<(usize, u32)> = original_slots
        .iter()
        .map(|&slot| {
            let id = match mode {
                NoiseMode::Shared => shared,
                NoiseMode::PerPosition => noise_set.draw(rng),
            };
            (slot, id)
        })
        .collect();

    // Raw token embeddings for every slot.
    let mut raw = Vec::with_capacity(base.len() * d);
    for &t in &base.tokens {
        if t as usize >= model.config.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "token id {t} outside vocabulary"
            )));
        }
        raw.extend_from_slice(model.token_embedding.row(t as usize));
    }
    let raw = Tensor::new(vec![base.len(), d], raw)?;

    // Noise the original rows in one batched pass; splice results back so
    // sentinel rows stay byte-identical to the raw embeddings.
    let mut originals = Vec::with_capacity(original_slots.len() * d);
    for &slot in &original_slots {
        originals.extend_from_slice(raw.row(slot - 1));
    }
    let originals = Tensor::new(vec![original_slots.len(), d], originals)?;
    let ids: Vec<u32> = noise_ids.iter().map(|&(_, id)| id).collect();
    let noised = embed_noise_rows(&modules.embedder, &originals, &ids)?;

    let mut embeddings = raw;
    for (row, &slot) in original_slots.iter().enumerate() {
        embeddings.row_mut(slot - 1).copy_from_slice(noised.row(row));
    }

    Ok(NoisyRequest {
        base,
        embeddings,
        noise_ids,
        mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::protocol2::init_modules;

    fn setup() -> (ModelParams, NoiseModules, NoiseSet) {
        let model = init_params(&ModelConfig::desk(), 90).unwrap();
        let noise_set = NoiseSet::new(16).unwrap();
        let modules = init_modules(&model, noise_set, 91).unwrap();
        (model, modules, noise_set)
    }

    fn seq(tokens: &[u32]) -> SentinelSequence {
        SentinelSequence::new(tokens.to_vec(), 64).unwrap()
    }

    #[test]
    fn shared_mode_uses_one_id() {
        let (model, modules, noise_set) = setup();
        let mut rng = Prng::from_seed(1);
        let req = build_noisy_request(
            &model,
            &[5, 6, 7, 8],
            &seq(&[1, 2, 3]),
            &noise_set,
            &modules,
            &mut rng,
            NoiseMode::Shared,
        )
        .unwrap();
        assert_eq!(req.noise_ids.len(), 4);
        let first = req.noise_ids[0].1;
        assert!(req.noise_ids.iter().all(|&(_, id)| id == first));
    }

    #[test]
    fn sentinel_rows_are_raw_token_embeddings() {
        let (model, modules, noise_set) = setup();
        let mut rng = Prng::from_seed(2);
        let sentinels = seq(&[10, 20, 30]);
        let req = build_noisy_request(
            &model,
            &[1, 2, 3, 4, 5],
            &sentinels,
            &noise_set,
            &modules,
            &mut rng,
            NoiseMode::PerPosition,
        )
        .unwrap();
        for (i, &slot) in req.base.sentinel_positions.iter().enumerate() {
            let expected = model.token_embedding.row(sentinels.tokens()[i] as usize);
            let got = req.embeddings.row(slot - 1);
            assert_eq!(
                got.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                expected.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
            assert_eq!(req.noise_id_at(slot), None);
        }
    }

    #[test]
    fn pass_through_combiner_leaves_embeddings_unnoised() {
        let (model, mut modules, noise_set) = setup();
        let d = model.config.embed_dim;
        let mut combiner = Tensor::zeros(vec![2 * d, d]);
        for i in 0..d {
            combiner.set(i, i, 1.0);
        }
        modules.embedder.combiner = combiner;
        modules.embedder.combiner_bias = Tensor::vector(vec![0.0; d]);
        let mut rng = Prng::from_seed(3);
        let req = build_noisy_request(
            &model,
            &[7, 8, 9],
            &seq(&[1, 2]),
            &noise_set,
            &modules,
            &mut rng,
            NoiseMode::Shared,
        )
        .unwrap();
        for (i, &t) in req.base.tokens.iter().enumerate() {
            assert_eq!(req.embeddings.row(i), model.token_embedding.row(t as usize));
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let (model, modules, noise_set) = setup();
        let build = |seed: u64| {
            build_noisy_request(
                &model,
                &[4, 5, 6],
                &seq(&[9, 9]),
                &noise_set,
                &modules,
                &mut Prng::from_seed(seed),
                NoiseMode::PerPosition,
            )
            .unwrap()
        };
        assert_eq!(build(77), build(77));
    }
}
