use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::kernels::{
    add, argmax, matmul, rms_norm_rows, row_softmax_masked, scale, silu,
};
use crate::numerics::Tensor;

/// Prompt either as token ids or as precomputed input embeddings.
#[derive(Clone, Debug)]
pub enum ForwardInput<'a> {
    Tokens(&'a [u32]),
    Embeddings(&'a Tensor),
}

/// Final hidden states and the logit matrix at every position.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub hidden: Tensor,
    pub logits: Tensor,
}

/// Lower-triangular LxL mask.
pub fn causal_mask(len: usize) -> Tensor {
    let mut mask = Tensor::zeros(vec![len, len]);
    for i in 0..len {
        for j in 0..=i {
            mask.set(i, j, 1.0);
        }
    }
    mask
}

fn slice_cols(t: &Tensor, start: usize, len: usize) -> Tensor {
    let rows = t.rows();
    let mut data = Vec::with_capacity(rows * len);
    for i in 0..rows {
        data.extend_from_slice(&t.row(i)[start..start + len]);
    }
    Tensor::new(vec![rows, len], data).unwrap()
}

fn concat_cols(parts: &[Tensor]) -> Tensor {
    let rows = parts[0].rows();
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows * total);
    for i in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Tensor::new(vec![rows, total], data).unwrap()
}

fn validate_inputs(
    params: &ModelParams,
    len: usize,
    mask2d: &Tensor,
    position_ids: &[u32],
) -> Result<()> {
    if len == 0 {
        return Err(Error::InvalidArgument("empty input".into()));
    }
    if mask2d.shape() != [len, len] {
        return Err(Error::ShapeMismatch(format!(
            "mask shape {:?} does not match sequence length {len}",
            mask2d.shape()
        )));
    }
    if mask2d.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument("mask entries must be 0 or 1".into()));
    }
    for i in 0..len {
        if !mask2d.row(i).iter().any(|&v| v == 1.0) {
            return Err(Error::DegenerateMaskRow(i));
        }
    }
    if position_ids.len() != len {
        return Err(Error::ShapeMismatch(format!(
            "{} position ids for {len} inputs",
            position_ids.len()
        )));
    }
    let max = params.config.max_positions as u32;
    for &id in position_ids {
        if id == 0 || id > max {
            return Err(Error::InvalidArgument(format!(
                "position id {id} outside [1, {max}]"
            )));
        }
    }
    Ok(())
}

/// Pre-norm decoder forward pass.
///
/// Position embeddings are looked up by the *given* identifiers, not by
/// array index, which is what lets a sentinel block carry positions 1..K
/// while sitting interleaved inside a longer sequence.
pub fn forward(
    params: &ModelParams,
    inputs: ForwardInput,
    mask2d: &Tensor,
    position_ids: &[u32],
) -> Result<ForwardOutput> {
    let cfg = &params.config;
    let d = cfg.embed_dim;
    let input_embeddings = match inputs {
        ForwardInput::Tokens(tokens) => {
            validate_inputs(params, tokens.len(), mask2d, position_ids)?;
            let mut data = Vec::with_capacity(tokens.len() * d);
            for &t in tokens {
                if t as usize >= cfg.vocab_size {
                    return Err(Error::InvalidArgument(format!(
                        "token id {t} outside vocabulary of {}",
                        cfg.vocab_size
                    )));
                }
                data.extend_from_slice(params.token_embedding.row(t as usize));
            }
            Tensor::new(vec![tokens.len(), d], data)?
        }
        ForwardInput::Embeddings(e) => {
            if e.rank() != 2 || e.cols() != d {
                return Err(Error::ShapeMismatch(format!(
                    "input embeddings {:?} must be Lx{d}",
                    e.shape()
                )));
            }
            validate_inputs(params, e.rows(), mask2d, position_ids)?;
            e.clone()
        }
    };
    let len = input_embeddings.rows();

    let mut pos = Vec::with_capacity(len * d);
    for &id in position_ids {
        pos.extend_from_slice(params.position_embedding.row(id as usize - 1));
    }
    let pos = Tensor::new(vec![len, d], pos)?;
    let mut x = add(&input_embeddings, &pos)?;

    let head_dim = cfg.head_dim();
    let inv_sqrt = 1.0 / (head_dim as f64).sqrt();
    for layer in &params.layers {
        let xn = rms_norm_rows(&x, &layer.attn_norm, cfg.eps)?;
        let q = matmul(&xn, &layer.wq)?;
        let k = matmul(&xn, &layer.wk)?;
        let v = matmul(&xn, &layer.wv)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = slice_cols(&q, h * head_dim, head_dim);
            let kh = slice_cols(&k, h * head_dim, head_dim);
            let vh = slice_cols(&v, h * head_dim, head_dim);
            let scores = matmul(&qh, &kh.transpose())?;
            let scaled = scale(&scores, inv_sqrt);
            let probs = row_softmax_masked(&scaled, mask2d)?;
            heads.push(matmul(&probs, &vh)?);
        }
        let attn = matmul(&concat_cols(&heads), &layer.wo)?;
        x = add(&x, &attn)?;

        let xn2 = rms_norm_rows(&x, &layer.mlp_norm, cfg.eps)?;
        let up = matmul(&xn2, &layer.w_up)?;
        let act = silu(&up);
        let down = matmul(&act, &layer.w_down)?;
        x = add(&x, &down)?;
    }

    let hidden = rms_norm_rows(&x, &params.final_norm, cfg.eps)?;
    let logits = matmul(&hidden, &params.unembedding)?;
    Ok(ForwardOutput { hidden, logits })
}

/// Plain causal forward over a token sequence at positions 1..L.
pub fn forward_causal(params: &ModelParams, tokens: &[u32]) -> Result<ForwardOutput> {
    let mask = causal_mask(tokens.len());
    let ids: Vec<u32> = (1..=tokens.len() as u32).collect();
    forward(params, ForwardInput::Tokens(tokens), &mask, &ids)
}

/// Greedy decoding; each emitted token is the argmax of the last-position
/// logit row, ties resolving to the lowest token index. The per-step
/// forward outputs are retained so verification can replay each step.
pub fn generate_greedy(
    params: &ModelParams,
    prompt: &[u32],
    n_steps: usize,
) -> Result<(Vec<u32>, Vec<ForwardOutput>)> {
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("prompt must be nonempty".into()));
    }
    if n_steps == 0 {
        return Err(Error::InvalidArgument("n_steps must be >= 1".into()));
    }
    if prompt.len() + n_steps - 1 > params.config.max_positions {
        return Err(Error::InvalidArgument(format!(
            "context of {} exceeds max positions {}",
            prompt.len() + n_steps - 1,
            params.config.max_positions
        )));
    }
    let mut context = prompt.to_vec();
    let mut emitted = Vec::with_capacity(n_steps);
    let mut transcript = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        let out = forward_causal(params, &context)?;
        let last = out.logits.row(context.len() - 1);
        let token = argmax(last) as u32;
        emitted.push(token);
        context.push(token);
        transcript.push(out);
    }
    Ok((emitted, transcript))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::numerics::Prng;

    fn desk_model() -> ModelParams {
        init_params(&ModelConfig::desk(), 42).unwrap()
    }

    #[test]
    fn logits_are_hidden_times_unembedding() {
        let p = desk_model();
        let out = forward_causal(&p, &[3, 17, 9]).unwrap();
        let recomputed = matmul(&out.hidden, &p.unembedding).unwrap();
        assert!(out.logits.bit_eq(&recomputed));
    }

    #[test]
    fn single_token_forward() {
        let p = desk_model();
        let mask = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let out = forward(&p, ForwardInput::Tokens(&[5]), &mask, &[1]).unwrap();
        assert_eq!(out.logits.shape(), &[1, 64]);
        assert_eq!(out.hidden.shape(), &[1, 64]);
    }

    #[test]
    fn forward_is_deterministic() {
        let p = desk_model();
        let a = forward_causal(&p, &[1, 2, 3, 4]).unwrap();
        let b = forward_causal(&p, &[1, 2, 3, 4]).unwrap();
        assert!(a.logits.bit_eq(&b.logits));
        assert!(a.hidden.bit_eq(&b.hidden));
    }

    #[test]
    fn embeddings_input_matches_token_input() {
        let p = desk_model();
        let tokens = [7u32, 0, 63];
        let mut data = Vec::new();
        for &t in &tokens {
            data.extend_from_slice(p.token_embedding.row(t as usize));
        }
        let emb = Tensor::new(vec![3, 64], data).unwrap();
        let mask = causal_mask(3);
        let ids = [1, 2, 3];
        let a = forward(&p, ForwardInput::Tokens(&tokens), &mask, &ids).unwrap();
        let b = forward(&p, ForwardInput::Embeddings(&emb), &mask, &ids).unwrap();
        assert!(a.logits.bit_eq(&b.logits));
    }

    #[test]
    fn block_diagonal_mask_isolates_blocks() {
        // Positions {0,1} and {2} see only their own block; the singleton
        // block must equal a standalone run at its position id.
        let p = desk_model();
        let tokens = [11u32, 22, 33];
        let mut mask = Tensor::zeros(vec![3, 3]);
        mask.set(0, 0, 1.0);
        mask.set(1, 0, 1.0);
        mask.set(1, 1, 1.0);
        mask.set(2, 2, 1.0);
        let out = forward(&p, ForwardInput::Tokens(&tokens), &mask, &[1, 2, 5]).unwrap();

        let solo_mask = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let solo = forward(&p, ForwardInput::Tokens(&[33]), &solo_mask, &[5]).unwrap();
        assert_eq!(out.logits.row(2), solo.logits.row(0));
        assert_eq!(
            out.logits.row(2).iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            solo.logits.row(0).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );

        let pair_mask = causal_mask(2);
        let pair = forward(&p, ForwardInput::Tokens(&[11, 22]), &pair_mask, &[1, 2]).unwrap();
        for i in 0..2 {
            assert_eq!(
                out.logits.row(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                pair.logits.row(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn position_id_out_of_range_rejected() {
        let p = desk_model();
        let mask = causal_mask(2);
        assert!(forward(&p, ForwardInput::Tokens(&[1, 2]), &mask, &[1, 513]).is_err());
        assert!(forward(&p, ForwardInput::Tokens(&[1, 2]), &mask, &[0, 1]).is_err());
    }

    #[test]
    fn bad_mask_shape_rejected() {
        let p = desk_model();
        let mask = causal_mask(3);
        assert!(forward(&p, ForwardInput::Tokens(&[1, 2]), &mask, &[1, 2]).is_err());
    }

    #[test]
    fn greedy_emits_constant_under_forced_argmax() {
        let mut p = desk_model();
        // Bias the unembedding so column 7 dominates every row.
        for i in 0..p.unembedding.rows() {
            p.unembedding.set(i, 7, p.unembedding.at(i, 7) + 1000.0);
        }
        p.rehash();
        let (tokens, transcript) = generate_greedy(&p, &[1, 2], 4).unwrap();
        assert_eq!(tokens, vec![7, 7, 7, 7]);
        assert_eq!(transcript.len(), 4);
    }

    #[test]
    fn greedy_single_step_bookkeeping() {
        let p = desk_model();
        let (tokens, transcript) = generate_greedy(&p, &[9], 1).unwrap();
        assert_eq!(tokens.len(), 1);
        assert_eq!(transcript.len(), 1);
    }

    #[test]
    fn greedy_transcript_replays_bit_exactly() {
        let p = desk_model();
        let mut rng = Prng::from_seed(3);
        let prompt = rng.tokens(5, 64);
        let (tokens, transcript) = generate_greedy(&p, &prompt, 6).unwrap();
        let mut context = prompt.clone();
        for (step, out) in transcript.iter().enumerate() {
            let replay = forward_causal(&p, &context).unwrap();
            assert!(replay.logits.bit_eq(&out.logits), "step {step}");
            context.push(tokens[step]);
        }
    }

    #[test]
    fn greedy_overflow_rejected() {
        let mut cfg = ModelConfig::desk();
        cfg.max_positions = 8;
        let p = init_params(&cfg, 1).unwrap();
        assert!(generate_greedy(&p, &[1, 2, 3], 7).is_err());
        assert!(generate_greedy(&p, &[1, 2, 3], 6).is_ok());
    }
}
