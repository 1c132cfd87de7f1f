use crate::error::{Error, Result};
use crate::model::{forward, ForwardInput, ModelParams};
use crate::numerics::Tensor;
use crate::protocol1::AugmentedRequest;
use crate::protocol2::NoisyRequest;

/// A request in either protocol's shape.
#[derive(Clone, Debug)]
pub enum RequestPayload {
    Plain(AugmentedRequest),
    Noisy(NoisyRequest),
}

impl RequestPayload {
    pub fn len(&self) -> usize {
        match self {
            RequestPayload::Plain(r) => r.len(),
            RequestPayload::Noisy(r) => r.base.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn protocol(&self) -> u8 {
        match self {
            RequestPayload::Plain(_) => 1,
            RequestPayload::Noisy(_) => 2,
        }
    }

    pub fn base(&self) -> &AugmentedRequest {
        match self {
            RequestPayload::Plain(r) => r,
            RequestPayload::Noisy(r) => &r.base,
        }
    }
}

/// Conceptually encrypted request handle.
///
/// Strategies hold the plaintext only through this wrapper and may evaluate
/// it with the operations below — exactly the computations a provider could
/// run homomorphically: full forward passes, forward passes on slot
/// subsets (structural privacy keeps tensor layout addressable), and
/// standalone forward passes treating chosen slots as a fresh sequence.
/// None of the operations reveal token values, the mask, positions, or
/// noise ids to the caller.
pub struct SealedRequest<'a> {
    payload: &'a RequestPayload,
}

impl<'a> SealedRequest<'a> {
    pub fn new(payload: &'a RequestPayload) -> Self {
        SealedRequest { payload }
    }

    pub fn len(&self) -> usize {
        self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }

    pub fn protocol(&self) -> u8 {
        self.payload.protocol()
    }

    /// Width of the row matrix this request's protocol returns.
    pub fn response_width(&self, params: &ModelParams) -> usize {
        match self.payload {
            RequestPayload::Plain(_) => params.config.vocab_size,
            RequestPayload::Noisy(_) => params.config.hidden_dim,
        }
    }

    /// Full forward pass under the given weights; logits for Protocol 1,
    /// final hidden states for Protocol 2.
    pub fn forward_with(&self, params: &ModelParams) -> Result<Tensor> {
        match self.payload {
            RequestPayload::Plain(r) => {
                let out = forward(
                    params,
                    ForwardInput::Tokens(&r.tokens),
                    &r.mask2d,
                    &r.position_ids,
                )?;
                Ok(out.logits)
            }
            RequestPayload::Noisy(r) => {
                let out = forward(
                    params,
                    ForwardInput::Embeddings(&r.embeddings),
                    &r.base.mask2d,
                    &r.base.position_ids,
                )?;
                Ok(out.hidden)
            }
        }
    }

    /// Forward pass restricted to the kept slots (sorted, 1-based): inputs,
    /// mask, and position ids are all sliced to the kept set. Rows of the
    /// result land back at their original slot indices; dropped rows are
    /// zero and the caller is expected to overwrite them.
    pub fn forward_subset(&self, params: &ModelParams, kept: &[usize]) -> Result<Tensor> {
        let total = self.len();
        if kept.is_empty()
            || kept.windows(2).any(|w| w[0] >= w[1])
            || kept.iter().any(|&s| s == 0 || s > total)
        {
            return Err(Error::InvalidArgument(format!(
                "kept slots {kept:?} must be sorted, distinct, within [1, {total}]"
            )));
        }
        let base = self.payload.base();
        let m = kept.len();
        let mut mask = Tensor::zeros(vec![m, m]);
        for (i, &r) in kept.iter().enumerate() {
            for (j, &c) in kept.iter().enumerate() {
                mask.set(i, j, base.mask2d.at(r - 1, c - 1));
            }
        }
        let ids: Vec<u32> = kept.iter().map(|&s| base.position_ids[s - 1]).collect();
        let rows = match self.payload {
            RequestPayload::Plain(r) => {
                let tokens: Vec<u32> = kept.iter().map(|&s| r.tokens[s - 1]).collect();
                forward(params, ForwardInput::Tokens(&tokens), &mask, &ids)?.logits
            }
            RequestPayload::Noisy(r) => {
                let d = r.embeddings.cols();
                let mut data = Vec::with_capacity(m * d);
                for &s in kept {
                    data.extend_from_slice(r.embeddings.row(s - 1));
                }
                let emb = Tensor::new(vec![m, d], data)?;
                forward(params, ForwardInput::Embeddings(&emb), &mask, &ids)?.hidden
            }
        };
        let mut out = Tensor::zeros(vec![total, rows.cols()]);
        for (i, &s) in kept.iter().enumerate() {
            out.row_mut(s - 1).copy_from_slice(rows.row(i));
        }
        Ok(out)
    }

    /// Treats the chosen slots (sorted, 1-based) as a fresh causal sequence
    /// at positions 1..k and forwards it standalone. Row i of the result
    /// corresponds to the i-th chosen slot.
    pub fn forward_standalone(&self, params: &ModelParams, slots: &[usize]) -> Result<Tensor> {
        let total = self.len();
        if slots.is_empty()
            || slots.windows(2).any(|w| w[0] >= w[1])
            || slots.iter().any(|&s| s == 0 || s > total)
        {
            return Err(Error::InvalidArgument(format!(
                "slots {slots:?} must be sorted, distinct, within [1, {total}]"
            )));
        }
        let k = slots.len();
        let mask = crate::model::causal_mask(k);
        let ids: Vec<u32> = (1..=k as u32).collect();
        match self.payload {
            RequestPayload::Plain(r) => {
                let tokens: Vec<u32> = slots.iter().map(|&s| r.tokens[s - 1]).collect();
                Ok(forward(params, ForwardInput::Tokens(&tokens), &mask, &ids)?.logits)
            }
            RequestPayload::Noisy(r) => {
                let d = r.embeddings.cols();
                let mut data = Vec::with_capacity(k * d);
                for &s in slots {
                    data.extend_from_slice(r.embeddings.row(s - 1));
                }
                let emb = Tensor::new(vec![k, d], data)?;
                Ok(forward(params, ForwardInput::Embeddings(&emb), &mask, &ids)?.hidden)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::numerics::Prng;
    use crate::protocol1::{build_request, generate_cache, SentinelSequence};

    #[test]
    fn subset_of_everything_equals_full_forward() {
        let model = init_params(&ModelConfig::desk(), 130).unwrap();
        let mut rng = Prng::from_seed(1);
        let prompt = rng.tokens(5, 64);
        let seq = SentinelSequence::new(vec![3, 4], 64).unwrap();
        let req = build_request(&prompt, &seq, &mut rng).unwrap();
        let payload = RequestPayload::Plain(req);
        let sealed = SealedRequest::new(&payload);
        let full = sealed.forward_with(&model).unwrap();
        let all: Vec<usize> = (1..=payload.len()).collect();
        let subset = sealed.forward_subset(&model, &all).unwrap();
        assert!(full.bit_eq(&subset));
    }

    #[test]
    fn standalone_on_true_sentinel_slots_reproduces_cache_entry() {
        let model = init_params(&ModelConfig::desk(), 131).unwrap();
        let cache = generate_cache(&model, 4, 3, &mut Prng::from_seed(2)).unwrap();
        let mut rng = Prng::from_seed(3);
        let prompt = rng.tokens(6, 64);
        let seq = cache.sequence(1).clone();
        let req = build_request(&prompt, &seq, &mut rng).unwrap();
        let slots = req.sentinel_positions.clone();
        let payload = RequestPayload::Plain(req);
        let sealed = SealedRequest::new(&payload);
        let rows = sealed.forward_standalone(&model, &slots).unwrap();
        assert!(rows.bit_eq(cache.entry(1)));
    }

    #[test]
    fn dropping_last_original_keeps_other_rows_bit_exact() {
        // The kept set is prefix-closed under the block mask, so every kept
        // row must match the honest full run exactly.
        let model = init_params(&ModelConfig::desk(), 132).unwrap();
        let mut rng = Prng::from_seed(4);
        let prompt = rng.tokens(5, 64);
        let seq = SentinelSequence::new(vec![7, 8, 9], 64).unwrap();
        let req = build_request(&prompt, &seq, &mut rng).unwrap();
        let last_original = req.last_original_slot();
        let kept: Vec<usize> = (1..=req.len()).filter(|&s| s != last_original).collect();
        let payload = RequestPayload::Plain(req);
        let sealed = SealedRequest::new(&payload);
        let full = sealed.forward_with(&model).unwrap();
        let subset = sealed.forward_subset(&model, &kept).unwrap();
        for &s in &kept {
            assert_eq!(
                subset.row(s - 1).iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                full.row(s - 1).iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "slot {s}"
            );
        }
    }

    #[test]
    fn dropping_a_sentinel_corrupts_later_sentinels_only() {
        let model = init_params(&ModelConfig::desk(), 133).unwrap();
        let cache = generate_cache(&model, 3, 3, &mut Prng::from_seed(5)).unwrap();
        let mut rng = Prng::from_seed(6);
        let prompt = rng.tokens(4, 64);
        let seq = cache.sequence(0).clone();
        let req = build_request(&prompt, &seq, &mut rng).unwrap();
        let positions = req.sentinel_positions.clone();
        let dropped = positions[1]; // middle sentinel
        let kept: Vec<usize> = (1..=req.len()).filter(|&s| s != dropped).collect();
        let payload = RequestPayload::Plain(req);
        let sealed = SealedRequest::new(&payload);
        let subset = sealed.forward_subset(&model, &kept).unwrap();
        let entry = cache.entry(0);
        // Sentinel 1 sits before the dropped one: still exact.
        let s1 = positions[0];
        assert_eq!(subset.row(s1 - 1), entry.row(0));
        // Sentinel 3 lost an attended token: must deviate.
        let s3 = positions[2];
        let dist: f64 = subset
            .row(s3 - 1)
            .iter()
            .zip(entry.row(2))
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(dist > 0.0);
    }
}
