//! Joint training of the noise embedder and predictor against a frozen
//! base model: language-modeling cross-entropy plus lambda-weighted noise
//! classification cross-entropy, optimized with AdamW. Noise is sampled
//! fresh per batch element and shared across its positions.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{
    adamw_step, causal_mask, forward, heldout_log_loss, model_tape_forward, register_frozen,
    AdamState, ForwardInput, ModelParams, ADAM_WEIGHT_DECAY,
};
use crate::numerics::tape::{GradTape, NodeId};
use crate::numerics::{Prng, Tensor};
use crate::protocol2::{embed_noise_rows, predict_noise, NoiseMode, NoiseModules};

#[derive(Clone, Debug)]
pub struct NoiseTrainOptions {
    pub lambda: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for NoiseTrainOptions {
    fn default() -> Self {
        NoiseTrainOptions {
            lambda: 3.5,
            lr: 5e-4,
            steps: 300,
            batch: 8,
            seq_len: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct TrainMetrics {
    pub steps: usize,
    pub final_train_loss: f64,
    pub heldout_noise_accuracy: f64,
    pub heldout_log_loss: f64,
    pub noiseless_base_log_loss: f64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct EvalStats {
    pub noise_accuracy: f64,
    pub log_loss: f64,
    pub positions: usize,
}

/// One training step's loss node over a batch of windows.
fn batch_loss(
    tape: &mut GradTape,
    model: &ModelParams,
    module_nodes: &ModuleNodes,
    windows: &[(Vec<u32>, u32)],
    lambda: f64,
) -> Result<NodeId> {
    let frozen = register_frozen_base(tape, model, module_nodes);
    let mut total: Option<NodeId> = None;
    for (window, noise_id) in windows {
        let seq = window.len() - 1;
        let token_rows: Vec<usize> = window[..seq].iter().map(|&t| t as usize).collect();
        let tok = tape.gather_rows(frozen.token_embedding, &token_rows)?;
        let noise_rows = vec![*noise_id as usize; seq];
        let noise = tape.gather_rows(module_nodes.noise_embedding, &noise_rows)?;
        let concat = tape.concat_cols(&[tok, noise])?;
        let mixed = tape.matmul(concat, module_nodes.combiner)?;
        let noised = tape.add_row(mixed, module_nodes.combiner_bias)?;

        let mask = causal_mask(seq);
        let pos: Vec<u32> = (1..=seq as u32).collect();
        let (hidden, logits) = model_tape_forward(tape, &frozen.tape_model, noised, &mask, &pos)?;

        let lm_pairs: Vec<(usize, u32)> = (0..seq).map(|i| (i, window[i + 1])).collect();
        let lm = tape.cross_entropy(logits, &lm_pairs)?;

        let np_raw = tape.matmul(hidden, module_nodes.predictor_weight)?;
        let np_logits = tape.add_row(np_raw, module_nodes.predictor_bias)?;
        let np_pairs: Vec<(usize, u32)> = (0..seq).map(|i| (i, *noise_id)).collect();
        let np = tape.cross_entropy(np_logits, &np_pairs)?;
        let np_scaled = tape.scale(np, lambda);

        let elem = tape.scalar_add(lm, np_scaled)?;
        total = Some(match total {
            None => elem,
            Some(t) => tape.scalar_add(t, elem)?,
        });
    }
    Ok(tape.scale(total.unwrap(), 1.0 / windows.len() as f64))
}

struct ModuleNodes {
    noise_embedding: NodeId,
    combiner: NodeId,
    combiner_bias: NodeId,
    predictor_weight: NodeId,
    predictor_bias: NodeId,
}

struct FrozenBase {
    tape_model: crate::model::TapeModel,
    token_embedding: NodeId,
}

fn register_frozen_base(
    tape: &mut GradTape,
    model: &ModelParams,
    _modules: &ModuleNodes,
) -> FrozenBase {
    let tape_model = register_frozen(tape, model);
    let token_embedding = tape_model.token_embedding;
    FrozenBase {
        tape_model,
        token_embedding,
    }
}

fn register_modules(tape: &mut GradTape, modules: &NoiseModules) -> ModuleNodes {
    ModuleNodes {
        noise_embedding: tape.param("noise.embedding", modules.embedder.noise_embedding.clone()),
        combiner: tape.param("noise.combiner", modules.embedder.combiner.clone()),
        combiner_bias: tape.param(
            "noise.combiner_bias",
            modules.embedder.combiner_bias.clone(),
        ),
        predictor_weight: tape.param("predictor.weight", modules.predictor.weight.clone()),
        predictor_bias: tape.param("predictor.bias", modules.predictor.bias.clone()),
    }
}

/// Builds the training objective on a fresh tape; shared with the gradient
/// check, which re-evaluates it at perturbed module parameters.
pub(crate) fn objective_tape(
    model: &ModelParams,
    module_tensors: &BTreeMap<String, Tensor>,
    windows: &[(Vec<u32>, u32)],
    lambda: f64,
) -> Result<(GradTape, NodeId)> {
    let mut tape = GradTape::new();
    let nodes = ModuleNodes {
        noise_embedding: tape.param("noise.embedding", module_tensors["noise.embedding"].clone()),
        combiner: tape.param("noise.combiner", module_tensors["noise.combiner"].clone()),
        combiner_bias: tape.param(
            "noise.combiner_bias",
            module_tensors["noise.combiner_bias"].clone(),
        ),
        predictor_weight: tape.param(
            "predictor.weight",
            module_tensors["predictor.weight"].clone(),
        ),
        predictor_bias: tape.param("predictor.bias", module_tensors["predictor.bias"].clone()),
    };
    let loss = batch_loss(&mut tape, model, &nodes, windows, lambda)?;
    Ok((tape, loss))
}

/// Validates the reverse-mode gradients of the training objective against
/// central finite differences over sampled module coordinates; returns the
/// maximum relative deviation.
pub fn gradient_check(
    model: &ModelParams,
    modules: &NoiseModules,
    windows: &[(Vec<u32>, u32)],
    lambda: f64,
    step: f64,
    max_coords: usize,
    rng: &mut Prng,
) -> Result<f64> {
    let params: BTreeMap<String, Tensor> = modules
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let build = |ps: &BTreeMap<String, Tensor>| objective_tape(model, ps, windows, lambda);
    crate::numerics::finite_difference_check(&build, &params, step, max_coords, rng)
}

/// Held-out evaluation with the training-time noising protocol: consecutive
/// windows, one shared noise id per window (or per-position ids), plain
/// forward passes.
pub fn evaluate_modules(
    model: &ModelParams,
    modules: &NoiseModules,
    eval_corpus: &[u32],
    seq_len: usize,
    max_windows: usize,
    mode: NoiseMode,
    seed: u64,
) -> Result<EvalStats> {
    let mut rng = Prng::from_seed(seed);
    let mut correct = 0usize;
    let mut positions = 0usize;
    let mut loss_total = 0.0;
    let mut windows = 0usize;
    let mut start = 0usize;
    while start + seq_len + 1 <= eval_corpus.len() && windows < max_windows {
        let window = &eval_corpus[start..start + seq_len + 1];
        let ids: Vec<u32> = match mode {
            NoiseMode::Shared => vec![modules.noise_set.draw(&mut rng); seq_len],
            NoiseMode::PerPosition => (0..seq_len)
                .map(|_| modules.noise_set.draw(&mut rng))
                .collect(),
        };
        let mut raw = Vec::with_capacity(seq_len * model.config.embed_dim);
        for &t in &window[..seq_len] {
            raw.extend_from_slice(model.token_embedding.row(t as usize));
        }
        let raw = Tensor::new(vec![seq_len, model.config.embed_dim], raw)?;
        let noised = embed_noise_rows(&modules.embedder, &raw, &ids)?;
        let mask = causal_mask(seq_len);
        let pos: Vec<u32> = (1..=seq_len as u32).collect();
        let out = forward(model, ForwardInput::Embeddings(&noised), &mask, &pos)?;
        for i in 0..seq_len {
            if predict_noise(&modules.predictor, out.hidden.row(i))? == ids[i] {
                correct += 1;
            }
            loss_total += -log_softmax_prob(out.logits.row(i), window[i + 1] as usize);
            positions += 1;
        }
        windows += 1;
        start += seq_len;
    }
    if positions == 0 {
        return Err(Error::InvalidArgument("eval corpus too short".into()));
    }
    Ok(EvalStats {
        noise_accuracy: correct as f64 / positions as f64,
        log_loss: loss_total / positions as f64,
        positions,
    })
}

fn log_softmax_prob(row: &[f64], idx: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for &v in row {
        denom += (v - max).exp();
    }
    (row[idx] - max) - denom.ln()
}

/// Optimizes the module parameters with the base model frozen. Gradients
/// flow through the base into the embedder; the base weights themselves
/// never move.
pub fn train_modules(
    model: &ModelParams,
    modules: &NoiseModules,
    train_corpus: &[u32],
    eval_corpus: &[u32],
    opts: &NoiseTrainOptions,
) -> Result<(NoiseModules, TrainMetrics)> {
    if opts.lambda < 0.0 {
        return Err(Error::InvalidArgument("lambda must be >= 0".into()));
    }
    if train_corpus.len() < opts.seq_len + 2 {
        return Err(Error::InvalidArgument("training corpus too short".into()));
    }
    if modules.base_model_hash != model.hash {
        return Err(Error::Integrity(
            "modules are bound to a different base model".into(),
        ));
    }
    let mut out = modules.clone();
    let mut rng = Prng::from_seed(opts.seed);
    let mut adam = AdamState::default();
    let mut last_loss = f64::NAN;

    for _ in 0..opts.steps {
        let mut windows = Vec::with_capacity(opts.batch);
        for _ in 0..opts.batch {
            let start = rng.below((train_corpus.len() - opts.seq_len - 1) as u64) as usize;
            let window = train_corpus[start..start + opts.seq_len + 1].to_vec();
            let noise_id = out.noise_set.draw(&mut rng);
            windows.push((window, noise_id));
        }
        let mut tape = GradTape::new();
        let nodes = register_modules(&mut tape, &out);
        let loss = batch_loss(&mut tape, model, &nodes, &windows, opts.lambda)?;
        last_loss = tape.value(loss).data()[0];
        if !last_loss.is_finite() {
            return Err(Error::Training(format!("loss diverged to {last_loss}")));
        }
        let grads = tape.reverse_gradients(loss)?;
        let mut store: BTreeMap<String, Tensor> = out
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        adamw_step(&mut store, &grads, &mut adam, opts.lr, ADAM_WEIGHT_DECAY);
        for (name, tensor) in store {
            *out.tensor_mut(&name).unwrap() = tensor;
        }
    }

    let eval = evaluate_modules(
        model,
        &out,
        eval_corpus,
        opts.seq_len,
        usize::MAX,
        NoiseMode::Shared,
        opts.seed ^ 0xE7A1,
    )?;
    let base_loss = heldout_log_loss(model, eval_corpus, opts.seq_len)?;
    Ok((
        out,
        TrainMetrics {
            steps: opts.steps,
            final_train_loss: last_loss,
            heldout_noise_accuracy: eval.noise_accuracy,
            heldout_log_loss: eval.log_loss,
            noiseless_base_log_loss: base_loss,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, markov_corpus, ModelConfig};
    use crate::protocol2::{init_modules, NoiseSet};

    fn tiny_setup() -> (ModelParams, NoiseModules, Vec<u32>, Vec<u32>) {
        let model = init_params(&ModelConfig::tiny(16), 110).unwrap();
        let modules = init_modules(&model, NoiseSet::new(4).unwrap(), 111).unwrap();
        let (train, eval) = markov_corpus(16, 112, 4096, 512);
        (model, modules, train, eval)
    }

    #[test]
    fn zero_steps_returns_modules_unchanged() {
        let (model, modules, train, eval) = tiny_setup();
        let opts = NoiseTrainOptions {
            steps: 0,
            seq_len: 16,
            batch: 2,
            ..Default::default()
        };
        let (out, _) = train_modules(&model, &modules, &train, &eval, &opts).unwrap();
        assert_eq!(out, modules);
    }

    #[test]
    fn lambda_zero_leaves_predictor_at_chance() {
        let (model, modules, train, eval) = tiny_setup();
        let opts = NoiseTrainOptions {
            lambda: 0.0,
            lr: 3e-3,
            steps: 40,
            batch: 4,
            seq_len: 16,
            seed: 1,
        };
        let (out, metrics) = train_modules(&model, &modules, &train, &eval, &opts).unwrap();
        // No gradient reaches the predictor through the absent CE term;
        // accuracy stays near 1/|B| = 0.25.
        assert!(
            (metrics.heldout_noise_accuracy - 0.25).abs() < 0.15,
            "accuracy {}",
            metrics.heldout_noise_accuracy
        );
        // Weight decay may shrink the predictor, but its argmax pattern
        // cannot have been trained toward the noise.
        assert_eq!(out.noise_set.size(), 4);
    }

    #[test]
    fn training_lifts_noise_accuracy_above_chance() {
        let (model, modules, train, eval) = tiny_setup();
        let opts = NoiseTrainOptions {
            lambda: 3.5,
            lr: 3e-3,
            steps: 150,
            batch: 4,
            seq_len: 16,
            seed: 2,
        };
        let before = evaluate_modules(
            &model,
            &modules,
            &eval,
            16,
            usize::MAX,
            NoiseMode::Shared,
            99,
        )
        .unwrap();
        let (_, metrics) = train_modules(&model, &modules, &train, &eval, &opts).unwrap();
        assert!(
            metrics.heldout_noise_accuracy > before.noise_accuracy + 0.2,
            "before {} after {}",
            before.noise_accuracy,
            metrics.heldout_noise_accuracy
        );
        assert!(metrics.final_train_loss.is_finite());
    }

    #[test]
    fn frozen_base_hash_unchanged_and_training_deterministic() {
        let (model, modules, train, eval) = tiny_setup();
        let hash_before = model.hash;
        let opts = NoiseTrainOptions {
            steps: 10,
            batch: 2,
            seq_len: 16,
            lr: 1e-3,
            lambda: 3.5,
            seed: 3,
        };
        let (a, _) = train_modules(&model, &modules, &train, &eval, &opts).unwrap();
        let (b, _) = train_modules(&model, &modules, &train, &eval, &opts).unwrap();
        assert_eq!(model.hash, hash_before);
        assert_eq!(a, b);
        assert_ne!(a, modules);
    }
}
