//! Verified LLM inference over a simulated privacy gadget.
//!
//! Two prover-verifier protocols turn a privacy-preserving inference channel
//! into a verified-inference channel at desk scale:
//!
//! * **Protocol 1 — logit fingerprinting.** The user splices sentinel tokens
//!   into the prompt at secret positions, isolates them with a 2D attention
//!   mask, and checks the returned sentinel logits against a precomputed
//!   public cache.
//! * **Protocol 2 — fingerprinting with noise.** Every non-sentinel token
//!   embedding additionally carries a predictable injected noise id, which a
//!   lightweight predictor recovers from the returned hidden states.
//!
//! Everything runs over a deterministic tiny decoder-only transformer, so an
//! honest provider matches the verifier bit-for-bit. A provider-strategy
//! suite plays the attacks from the accompanying security analysis and a
//! Monte Carlo harness checks the analytic bounds.

pub(crate) mod blobio;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod privacy;
pub mod protocol1;
pub mod protocol2;
pub mod records;

pub use error::{Error, Result};
