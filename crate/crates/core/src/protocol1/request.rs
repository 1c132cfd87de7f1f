use crate::error::{Error, Result};
use crate::numerics::{Prng, Tensor};
use crate::protocol1::SentinelSequence;

/// Sentinel-augmented request: the length-(N+K) token sequence, the spliced
/// 2D attention mask, per-slot position identifiers, and the secret sentinel
/// slots.
///
/// Slots are numbered 1..=N+K throughout, matching the sampling range of the
/// position draw; subtract one when indexing into tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedRequest {
    pub tokens: Vec<u32>,
    pub mask2d: Tensor,
    pub position_ids: Vec<u32>,
    /// Sorted ascending; sentinel i of the sequence occupies slot
    /// `sentinel_positions[i]`.
    pub sentinel_positions: Vec<usize>,
    pub sentinel_sequence: SentinelSequence,
    pub n_original: usize,
}

impl AugmentedRequest {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn k(&self) -> usize {
        self.sentinel_positions.len()
    }

    pub fn is_sentinel_slot(&self, slot: usize) -> bool {
        self.sentinel_positions.binary_search(&slot).is_ok()
    }

    /// Slots holding original prompt tokens, ascending.
    pub fn original_slots(&self) -> Vec<usize> {
        (1..=self.len())
            .filter(|&s| !self.is_sentinel_slot(s))
            .collect()
    }

    /// Slot of the last original token; the greedy sampling row.
    pub fn last_original_slot(&self) -> usize {
        (1..=self.len())
            .rev()
            .find(|&s| !self.is_sentinel_slot(s))
            .expect("request holds at least one original token")
    }
}

/// Builds the augmented request with slots drawn uniformly without
/// replacement from [1, N+K]; sentinels land in drawn sorted order.
pub fn build_request(
    prompt: &[u32],
    sentinel_sequence: &SentinelSequence,
    rng: &mut Prng,
) -> Result<AugmentedRequest> {
    let n = prompt.len();
    let k = sentinel_sequence.len();
    if n == 0 {
        return Err(Error::InvalidArgument("prompt must be nonempty".into()));
    }
    let positions = rng.sample_without_replacement(n + k, k)?;
    build_request_at(prompt, sentinel_sequence, &positions)
}

/// Same construction with caller-chosen sentinel slots (sorted, distinct,
/// within [1, N+K]). `{N+1..N+K}` appends all sentinels after the prompt.
pub fn build_request_at(
    prompt: &[u32],
    sentinel_sequence: &SentinelSequence,
    positions: &[usize],
) -> Result<AugmentedRequest> {
    let n = prompt.len();
    let k = sentinel_sequence.len();
    if n == 0 {
        return Err(Error::InvalidArgument("prompt must be nonempty".into()));
    }
    if positions.len() != k {
        return Err(Error::InvalidArgument(format!(
            "{} positions for {k} sentinels",
            positions.len()
        )));
    }
    let total = n + k;
    if positions.windows(2).any(|w| w[0] >= w[1])
        || positions.iter().any(|&p| p == 0 || p > total)
    {
        return Err(Error::InvalidArgument(format!(
            "sentinel positions {positions:?} must be sorted, distinct, within [1, {total}]"
        )));
    }

    // Interleave: slot s gets the next sentinel when s is drawn, otherwise
    // the next original token; relative orders are preserved.
    let mut tokens = Vec::with_capacity(total);
    let mut position_ids = Vec::with_capacity(total);
    let mut next_sentinel = 0usize;
    let mut next_original = 0usize;
    let mut kind = Vec::with_capacity(total); // true = sentinel
    for slot in 1..=total {
        if next_sentinel < k && positions[next_sentinel] == slot {
            tokens.push(sentinel_sequence.tokens()[next_sentinel]);
            position_ids.push((next_sentinel + 1) as u32);
            kind.push(true);
            next_sentinel += 1;
        } else {
            tokens.push(prompt[next_original]);
            position_ids.push((next_original + 1) as u32);
            kind.push(false);
            next_original += 1;
        }
    }

    // Causal within each block, zero across blocks: the prompt keeps its
    // causal mask re-indexed, sentinels attend each other autoregressively.
    let mut mask = Tensor::zeros(vec![total, total]);
    for r in 0..total {
        for c in 0..=r {
            if kind[r] == kind[c] {
                mask.set(r, c, 1.0);
            }
        }
    }

    Ok(AugmentedRequest {
        tokens,
        mask2d: mask,
        position_ids,
        sentinel_positions: positions.to_vec(),
        sentinel_sequence: sentinel_sequence.clone(),
        n_original: n,
    })
}
