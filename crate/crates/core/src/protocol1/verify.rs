use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::protocol1::{AugmentedRequest, SentinelCache};

/// Outcome of the sentinel logit check.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct VerificationResult {
    pub verified: bool,
    pub per_sentinel_l1: Vec<f64>,
    pub tolerance: f64,
}

/// Compares the returned logits at each sentinel slot against the cached
/// standalone logits under L1 distance; verified iff every distance is
/// within tolerance.
pub fn verify(
    logits: &Tensor,
    request: &AugmentedRequest,
    cache: &SentinelCache,
    tolerance: f64,
) -> Result<VerificationResult> {
    if tolerance < 0.0 {
        return Err(Error::InvalidArgument("tolerance must be >= 0".into()));
    }
    if logits.rank() != 2 || logits.rows() != request.len() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} for a request of length {}",
            logits.shape(),
            request.len()
        )));
    }
    let entry = cache
        .lookup(&request.sentinel_sequence)
        .ok_or(Error::CacheMiss)?;
    if logits.cols() != entry.cols() {
        return Err(Error::ShapeMismatch(format!(
            "logit width {} vs cache width {}",
            logits.cols(),
            entry.cols()
        )));
    }
    let mut per_sentinel_l1 = Vec::with_capacity(request.k());
    for (i, &slot) in request.sentinel_positions.iter().enumerate() {
        let mut dist = 0.0;
        for (a, b) in logits.row(slot - 1).iter().zip(entry.row(i)) {
            dist += (a - b).abs();
        }
        per_sentinel_l1.push(dist);
    }
    let verified = per_sentinel_l1.iter().all(|&d| d <= tolerance);
    Ok(VerificationResult {
        verified,
        per_sentinel_l1,
        tolerance,
    })
}
