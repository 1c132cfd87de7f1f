//! Deterministic dense linear algebra, seeded randomness, truncated SVD,
//! and tape-based reverse-mode differentiation.

pub mod kernels;
mod rng;
mod svd;
pub mod tape;
mod tensor;

pub use rng::Prng;
pub use svd::truncated_svd;
pub use tape::{finite_difference_check, GradTape, Gradients, NodeId};
pub use tensor::Tensor;
