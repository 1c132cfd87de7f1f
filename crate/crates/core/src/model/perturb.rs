//! Model perturbations for the fingerprint-separability studies: low-rank
//! factorization of the linear layers, symmetric quantization, and a single
//! step of fine-tuning.

use crate::error::{Error, Result};
use crate::model::train::{next_token_gradients, sgd_apply};
use crate::model::ModelParams;
use crate::numerics::kernels::matmul;
use crate::numerics::truncated_svd;

/// Replaces each attention/MLP weight matrix with its best rank-r
/// approximation U V^T. Embeddings, norms, and the unembedding are left
/// untouched.
pub fn perturb_low_rank(params: &ModelParams, r: usize) -> Result<ModelParams> {
    let mut out = params.clone();
    for layer in &mut out.layers {
        for w in [
            &mut layer.wq,
            &mut layer.wk,
            &mut layer.wv,
            &mut layer.wo,
            &mut layer.w_up,
            &mut layer.w_down,
        ] {
            let min_dim = w.shape()[0].min(w.shape()[1]);
            if r == 0 || r > min_dim {
                return Err(Error::InvalidArgument(format!(
                    "rank {r} out of range for {:?}",
                    w.shape()
                )));
            }
            let (u, v) = truncated_svd(w, r)?;
            *w = matmul(&u, &v.transpose())?;
        }
    }
    out.rehash();
    Ok(out)
}

/// Per-tensor symmetric quantization: scale = max|w| / (2^(bits-1) - 1),
/// w -> round(w / scale) * scale. All-zero tensors pass through unchanged.
pub fn perturb_quantize(params: &ModelParams, bits: u32) -> Result<ModelParams> {
    if !(2..=16).contains(&bits) {
        return Err(Error::InvalidArgument(format!(
            "quantization bits {bits} outside [2, 16]"
        )));
    }
    let levels = ((1u32 << (bits - 1)) - 1) as f64;
    let mut out = params.clone();
    let names: Vec<String> = out.named_tensors().iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let t = out.tensor_mut(&name).unwrap();
        let max = t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max == 0.0 {
            continue;
        }
        let scale = max / levels;
        for v in t.data_mut() {
            *v = (*v / scale).round() * scale;
        }
    }
    out.rehash();
    Ok(out)
}

/// One plain SGD step on next-token cross-entropy over the batch.
pub fn perturb_finetune_step(
    params: &ModelParams,
    batch: &[Vec<u32>],
    lr: f64,
) -> Result<ModelParams> {
    if lr < 0.0 {
        return Err(Error::InvalidArgument("learning rate must be >= 0".into()));
    }
    let grads = next_token_gradients(params, batch)?;
    let mut out = params.clone();
    sgd_apply(&mut out, &grads, lr);
    out.rehash();
    Ok(out)
}
