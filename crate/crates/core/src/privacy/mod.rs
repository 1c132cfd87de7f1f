//! Simulated privacy gadget and the provider-strategy suite.
//!
//! No real encryption runs here. Secrecy is an information-flow contract:
//! a strategy conditions only on its [`AdversaryView`] (plus public
//! artifacts) and may evaluate the hidden request solely through the
//! [`SealedRequest`] surface, which mimics what a homomorphic scheme would
//! let a provider compute. A paired-request test asserts that strategies
//! make identical decisions for requests with identical views.

mod sealed;
mod strategy;

pub use sealed::{RequestPayload, SealedRequest};
pub use strategy::{
    available_strategies, build_strategy, run_provider, strategy_names, PerturbationSpec,
    ProviderStrategy, PublicContext, SentinelPlacement,
};

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

/// What the privacy mechanism leaks about tensor layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrivacyMode {
    /// SMPC-like: tensor shapes and slot positions visible, values hidden.
    Structural,
    /// FHE-like: only the total input length is visible.
    Opaque,
}

impl std::fmt::Display for PrivacyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PrivacyMode::Structural => write!(f, "structural"),
            PrivacyMode::Opaque => write!(f, "opaque"),
        }
    }
}

/// Everything a dishonest provider may condition on: the total length, the
/// privacy mode, and which protocol is in use. Token values, sentinel
/// positions, noise ids, and mask contents are exactly the fields this
/// projection loses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdversaryView {
    pub total_length: usize,
    pub mode: PrivacyMode,
    pub protocol: u8,
}

impl AdversaryView {
    /// Structural mode lets the provider address individual slots.
    pub fn can_address_slots(&self) -> bool {
        self.mode == PrivacyMode::Structural
    }
}

/// Pure projection of a request to its adversary-visible part.
pub fn make_view(request: &RequestPayload, mode: PrivacyMode) -> AdversaryView {
    AdversaryView {
        total_length: request.len(),
        mode,
        protocol: request.protocol(),
    }
}

/// What the provider hands back: logits (Protocol 1) or final hidden states
/// (Protocol 2) for every slot, and for bookkeeping the strategy label and
/// the discrete decisions it took. Verifier logic never reads the label or
/// the decisions.
#[derive(Clone, Debug)]
pub struct ProviderResponse {
    pub rows: Tensor,
    pub strategy: String,
    /// Flattened record of the strategy's discrete choices (guessed slots,
    /// cache index, dropped slots). Used by the view-indistinguishability
    /// test only.
    pub decisions: Vec<u64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::numerics::Prng;
    use crate::protocol1::{build_request, SentinelSequence};

    #[test]
    fn views_forget_everything_but_length_mode_protocol() {
        let model = init_params(&ModelConfig::desk(), 120).unwrap();
        let mut rng = Prng::from_seed(1);
        let seq_a = SentinelSequence::new(vec![1, 2, 3], 64).unwrap();
        let seq_b = SentinelSequence::new(vec![60, 61, 62], 64).unwrap();
        let prompt_a = rng.tokens(5, 64);
        let prompt_b = rng.tokens(5, 64);
        let ra = build_request(&prompt_a, &seq_a, &mut rng).unwrap();
        let rb = build_request(&prompt_b, &seq_b, &mut rng).unwrap();
        let va = make_view(&RequestPayload::Plain(ra), PrivacyMode::Structural);
        let vb = make_view(&RequestPayload::Plain(rb), PrivacyMode::Structural);
        assert_eq!(va, vb);
        let _ = model;
    }

    #[test]
    fn structural_exposes_slot_addressing() {
        let model = init_params(&ModelConfig::desk(), 121).unwrap();
        let mut rng = Prng::from_seed(2);
        let seq = SentinelSequence::new(vec![1, 2], 64).unwrap();
        let prompt = rng.tokens(4, 64);
        let req = build_request(&prompt, &seq, &mut rng).unwrap();
        let payload = RequestPayload::Plain(req);
        let structural = make_view(&payload, PrivacyMode::Structural);
        let opaque = make_view(&payload, PrivacyMode::Opaque);
        assert!(structural.can_address_slots());
        assert!(!opaque.can_address_slots());
        assert_eq!(structural.total_length, opaque.total_length);
        let _ = model;
    }
}
