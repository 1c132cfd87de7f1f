//! Training paths: the tape-recorded forward pass, AdamW, next-token
//! pretraining on the Markov corpus, and the SGD step used by the
//! fine-tuning perturbation.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{causal_mask, forward_causal, ModelConfig, ModelParams};
use crate::numerics::tape::{GradTape, Gradients, NodeId};
use crate::numerics::{Prng, Tensor};

/// Node ids of every model weight registered on a tape.
pub struct TapeModel {
    pub config: ModelConfig,
    pub token_embedding: NodeId,
    pub position_embedding: NodeId,
    pub layers: Vec<TapeLayer>,
    pub final_norm: NodeId,
    pub unembedding: NodeId,
}

pub struct TapeLayer {
    pub attn_norm: NodeId,
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
    pub mlp_norm: NodeId,
    pub w_up: NodeId,
    pub w_down: NodeId,
}

fn register(tape: &mut GradTape, params: &ModelParams, trainable: bool) -> TapeModel {
    let mut reg = |name: &str, t: &Tensor| -> NodeId {
        if trainable {
            tape.param(name, t.clone())
        } else {
            tape.leaf(t.clone())
        }
    };
    let token_embedding = reg("token_embedding", &params.token_embedding);
    let position_embedding = reg("position_embedding", &params.position_embedding);
    let mut layers = Vec::with_capacity(params.layers.len());
    for (i, l) in params.layers.iter().enumerate() {
        layers.push(TapeLayer {
            attn_norm: reg(&format!("layers.{i}.attn_norm"), &l.attn_norm),
            wq: reg(&format!("layers.{i}.wq"), &l.wq),
            wk: reg(&format!("layers.{i}.wk"), &l.wk),
            wv: reg(&format!("layers.{i}.wv"), &l.wv),
            wo: reg(&format!("layers.{i}.wo"), &l.wo),
            mlp_norm: reg(&format!("layers.{i}.mlp_norm"), &l.mlp_norm),
            w_up: reg(&format!("layers.{i}.w_up"), &l.w_up),
            w_down: reg(&format!("layers.{i}.w_down"), &l.w_down),
        });
    }
    let final_norm = reg("final_norm", &params.final_norm);
    let unembedding = reg("unembedding", &params.unembedding);
    TapeModel {
        config: params.config.clone(),
        token_embedding,
        position_embedding,
        layers,
        final_norm,
        unembedding,
    }
}

/// Registers all weights as gradient targets.
pub fn register_trainable(tape: &mut GradTape, params: &ModelParams) -> TapeModel {
    register(tape, params, true)
}

/// Registers all weights as constants; adjoints flow through them so that
/// upstream modules (such as the noise embedder) can still train.
pub fn register_frozen(tape: &mut GradTape, params: &ModelParams) -> TapeModel {
    register(tape, params, false)
}

/// Tape twin of `model::forward`, applied to already-embedded inputs.
/// Op-for-op identical to the plain path, so values agree bit-exactly.
pub fn model_tape_forward(
    tape: &mut GradTape,
    model: &TapeModel,
    input_embeddings: NodeId,
    mask2d: &Tensor,
    position_ids: &[u32],
) -> Result<(NodeId, NodeId)> {
    let cfg = &model.config;
    let pos_rows: Vec<usize> = position_ids.iter().map(|&id| id as usize - 1).collect();
    let pos = tape.gather_rows(model.position_embedding, &pos_rows)?;
    let mut x = tape.add(input_embeddings, pos)?;

    let head_dim = cfg.head_dim();
    let inv_sqrt = 1.0 / (head_dim as f64).sqrt();
    for layer in &model.layers {
        let xn = tape.rms_norm_rows(x, layer.attn_norm, cfg.eps)?;
        let q = tape.matmul(xn, layer.wq)?;
        let k = tape.matmul(xn, layer.wk)?;
        let v = tape.matmul(xn, layer.wv)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
            let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
            let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
            let kht = tape.transpose(kh);
            let scores = tape.matmul(qh, kht)?;
            let scaled = tape.scale(scores, inv_sqrt);
            let probs = tape.softmax_masked(scaled, mask2d)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let merged = tape.concat_cols(&heads)?;
        let attn = tape.matmul(merged, layer.wo)?;
        x = tape.add(x, attn)?;

        let xn2 = tape.rms_norm_rows(x, layer.mlp_norm, cfg.eps)?;
        let up = tape.matmul(xn2, layer.w_up)?;
        let act = tape.silu(up);
        let down = tape.matmul(act, layer.w_down)?;
        x = tape.add(x, down)?;
    }

    let hidden = tape.rms_norm_rows(x, model.final_norm, cfg.eps)?;
    let logits = tape.matmul(hidden, model.unembedding)?;
    Ok((hidden, logits))
}

/// Mean next-token cross-entropy loss node over one token window. An
/// optional constant offset is added to every input embedding; pretraining
/// uses this as augmentation so the base model tolerates the embedding
/// translations the noise channel later rides on.
fn window_loss(
    tape: &mut GradTape,
    model: &TapeModel,
    window: &[u32],
    offset: Option<&Tensor>,
) -> Result<NodeId> {
    let seq = window.len() - 1;
    let ids: Vec<usize> = window[..seq].iter().map(|&t| t as usize).collect();
    let mut emb = tape.gather_rows(model.token_embedding, &ids)?;
    if let Some(offset) = offset {
        let off = tape.leaf(offset.clone());
        emb = tape.add_row(emb, off)?;
    }
    let mask = causal_mask(seq);
    let pos: Vec<u32> = (1..=seq as u32).collect();
    let (_, logits) = model_tape_forward(tape, model, emb, &mask, &pos)?;
    let pairs: Vec<(usize, u32)> = (0..seq).map(|i| (i, window[i + 1])).collect();
    tape.cross_entropy(logits, &pairs)
}

/// Gradients of mean next-token cross-entropy over a batch of sequences.
pub fn next_token_gradients(params: &ModelParams, batch: &[Vec<u32>]) -> Result<Gradients> {
    if batch.is_empty() || batch.iter().any(|s| s.len() < 2) {
        return Err(Error::InvalidArgument(
            "batch must hold sequences of at least two tokens".into(),
        ));
    }
    let mut tape = GradTape::new();
    let model = register_trainable(&mut tape, params);
    let mut total: Option<NodeId> = None;
    for seq in batch {
        let loss = window_loss(&mut tape, &model, seq, None)?;
        total = Some(match total {
            None => loss,
            Some(t) => tape.scalar_add(t, loss)?,
        });
    }
    let loss = tape.scale(total.unwrap(), 1.0 / batch.len() as f64);
    tape.reverse_gradients(loss)
}

/// w -= lr * g for every tensor with a recorded gradient.
pub fn sgd_apply(params: &mut ModelParams, grads: &Gradients, lr: f64) {
    for (name, g) in grads {
        if let Some(t) = params.tensor_mut(name) {
            for (w, gv) in t.data_mut().iter_mut().zip(g.data()) {
                *w -= lr * gv;
            }
        }
    }
}

/// Mutable named access for optimizer updates.
pub trait ParamStore {
    fn param_names(&self) -> Vec<String>;
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor>;
}

impl ParamStore for ModelParams {
    fn param_names(&self) -> Vec<String> {
        self.named_tensors().iter().map(|(n, _)| n.clone()).collect()
    }
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensor_mut(name)
    }
}

impl ParamStore for BTreeMap<String, Tensor> {
    fn param_names(&self) -> Vec<String> {
        self.keys().cloned().collect()
    }
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.get_mut(name)
    }
}

/// AdamW moment estimates, keyed like the gradients.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const ADAM_WEIGHT_DECAY: f64 = 0.01;

/// One decoupled-weight-decay Adam update over every gradient entry.
pub fn adamw_step<S: ParamStore>(
    store: &mut S,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) {
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for (name, g) in grads {
        let Some(w) = store.param_mut(name) else {
            continue;
        };
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        for i in 0..g.numel() {
            let gi = g.data()[i];
            let mi = ADAM_BETA1 * m.data()[i] + (1.0 - ADAM_BETA1) * gi;
            let vi = ADAM_BETA2 * v.data()[i] + (1.0 - ADAM_BETA2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            let wi = &mut w.data_mut()[i];
            *wi -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + weight_decay * *wi);
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub seed: u64,
    /// Std of the random constant embedding offset added per training
    /// sequence; zero disables the augmentation.
    pub offset_aug_std: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 200,
            batch: 16,
            seq_len: 32,
            lr: 1e-3,
            seed: 0,
            offset_aug_std: 0.0,
        }
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct PretrainMetrics {
    pub steps: usize,
    pub final_train_loss: f64,
    pub heldout_loss: f64,
    pub uniform_baseline: f64,
}

/// Mean next-token log-loss over consecutive windows of `tokens`, using the
/// plain forward path.
pub fn heldout_log_loss(params: &ModelParams, tokens: &[u32], seq_len: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    let mut start = 0;
    while start + seq_len + 1 <= tokens.len() {
        let window = &tokens[start..start + seq_len + 1];
        let out = forward_causal(params, &window[..seq_len])?;
        for i in 0..seq_len {
            total += -log_softmax_prob(out.logits.row(i), window[i + 1] as usize);
            count += 1;
        }
        start += seq_len;
    }
    if count == 0 {
        return Err(Error::InvalidArgument("held-out corpus too short".into()));
    }
    Ok(total / count as f64)
}

fn log_softmax_prob(row: &[f64], idx: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for &v in row {
        denom += (v - max).exp();
    }
    (row[idx] - max) - denom.ln()
}

/// AdamW pretraining on next-token cross-entropy. Deterministic in
/// (options.seed, corpus, hyperparameters); steps = 0 returns the input
/// unchanged, hash included.
pub fn pretrain(
    params: &ModelParams,
    train_corpus: &[u32],
    eval_corpus: &[u32],
    opts: &TrainOptions,
) -> Result<(ModelParams, PretrainMetrics)> {
    if train_corpus.len() < opts.seq_len + 2 {
        return Err(Error::InvalidArgument("training corpus too short".into()));
    }
    let mut out = params.clone();
    let mut rng = Prng::from_seed(opts.seed);
    let mut adam = AdamState::default();
    let mut last_loss = f64::NAN;
    for _ in 0..opts.steps {
        let mut batch = Vec::with_capacity(opts.batch);
        for _ in 0..opts.batch {
            let start = rng.below((train_corpus.len() - opts.seq_len - 1) as u64) as usize;
            let window = train_corpus[start..start + opts.seq_len + 1].to_vec();
            let offset = if opts.offset_aug_std > 0.0 {
                let d = out.config.embed_dim;
                Some(Tensor::vector(
                    (0..d).map(|_| rng.normal(0.0, opts.offset_aug_std)).collect(),
                ))
            } else {
                None
            };
            batch.push((window, offset));
        }
        let mut tape = GradTape::new();
        let model = register_trainable(&mut tape, &out);
        let mut total: Option<NodeId> = None;
        for (seq, offset) in &batch {
            let loss = window_loss(&mut tape, &model, seq, offset.as_ref())?;
            total = Some(match total {
                None => loss,
                Some(t) => tape.scalar_add(t, loss)?,
            });
        }
        let loss = tape.scale(total.unwrap(), 1.0 / opts.batch as f64);
        last_loss = tape.value(loss).data()[0];
        if !last_loss.is_finite() {
            return Err(Error::Training(format!("loss diverged to {last_loss}")));
        }
        let grads = tape.reverse_gradients(loss)?;
        adamw_step(&mut out, &grads, &mut adam, opts.lr, ADAM_WEIGHT_DECAY);
    }
    if opts.steps > 0 {
        out.rehash();
    }
    let heldout = heldout_log_loss(&out, eval_corpus, opts.seq_len)?;
    Ok((
        out,
        PretrainMetrics {
            steps: opts.steps,
            final_train_loss: last_loss,
            heldout_loss: heldout,
            uniform_baseline: (params.config.vocab_size as f64).ln(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_params, markov_corpus, ForwardInput, ModelConfig};

    #[test]
    fn tape_forward_matches_plain_forward_bitwise() {
        let params = init_params(&ModelConfig::desk(), 31).unwrap();
        let tokens = [4u32, 9, 61, 30, 2];
        let mask = causal_mask(5);
        let pos: Vec<u32> = (1..=5).collect();
        let plain = forward(&params, ForwardInput::Tokens(&tokens), &mask, &pos).unwrap();

        let mut tape = GradTape::new();
        let model = register_frozen(&mut tape, &params);
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let emb = tape.gather_rows(model.token_embedding, &ids).unwrap();
        let (hidden, logits) = model_tape_forward(&mut tape, &model, emb, &mask, &pos).unwrap();
        assert!(tape.value(logits).bit_eq(&plain.logits));
        assert!(tape.value(hidden).bit_eq(&plain.hidden));
        assert!(tape.replay_matches());
    }

    #[test]
    fn pretrain_zero_steps_is_identity() {
        let params = init_params(&ModelConfig::desk(), 32).unwrap();
        let (train, eval) = markov_corpus(64, 5, 2048, 256);
        let opts = TrainOptions {
            steps: 0,
            ..Default::default()
        };
        let (out, metrics) = pretrain(&params, &train, &eval, &opts).unwrap();
        assert_eq!(out.hash, params.hash);
        assert_eq!(metrics.steps, 0);
    }

    #[test]
    fn pretrain_reduces_loss_and_is_deterministic() {
        let params = init_params(&ModelConfig::desk(), 33).unwrap();
        let (train, eval) = markov_corpus(64, 6, 4096, 512);
        let before = heldout_log_loss(&params, &eval, 32).unwrap();
        let opts = TrainOptions {
            steps: 25,
            batch: 8,
            seq_len: 32,
            lr: 1e-3,
            seed: 7,
        };
        let (a, metrics_a) = pretrain(&params, &train, &eval, &opts).unwrap();
        let (b, metrics_b) = pretrain(&params, &train, &eval, &opts).unwrap();
        assert_eq!(a.hash, b.hash);
        assert_eq!(
            metrics_a.heldout_loss.to_bits(),
            metrics_b.heldout_loss.to_bits()
        );
        assert!(
            metrics_a.heldout_loss < before,
            "no improvement: {} -> {}",
            before,
            metrics_a.heldout_loss
        );
    }

    #[test]
    fn adamw_moves_weights() {
        let params = init_params(&ModelConfig::tiny(16), 34).unwrap();
        let batch = vec![vec![1u32, 2, 3, 4, 5]];
        let grads = next_token_gradients(&params, &batch).unwrap();
        let mut updated = params.clone();
        let mut state = AdamState::default();
        adamw_step(&mut updated, &grads, &mut state, 1e-3, ADAM_WEIGHT_DECAY);
        assert!(!updated.bit_equal(&params));
    }
}
