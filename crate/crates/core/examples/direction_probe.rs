//! Does the desk model have embedding-offset directions that are cheap for
//! the language model? Probe LM loss under fixed offsets of varying
//! direction and magnitude.

use priveri_core::model::{heldout_log_loss, init_params, markov_corpus, pretrain, ModelConfig, TrainOptions};
use priveri_core::model::{causal_mask, forward, ForwardInput};
use priveri_core::numerics::{Prng, Tensor};

fn lm_with_offset(model: &priveri_core::model::ModelParams, eval: &[u32], offset: &[f64]) -> f64 {
    let seq = 32usize;
    let d = 64usize;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut start = 0;
    while start + seq + 1 <= eval.len() {
        let window = &eval[start..start + seq + 1];
        let mut data = Vec::with_capacity(seq * d);
        for &t in &window[..seq] {
            for (j, &v) in model.token_embedding.row(t as usize).iter().enumerate() {
                data.push(v + offset[j]);
            }
        }
        let emb = Tensor::new(vec![seq, d], data).unwrap();
        let mask = causal_mask(seq);
        let pos: Vec<u32> = (1..=seq as u32).collect();
        let out = forward(model, ForwardInput::Embeddings(&emb), &mask, &pos).unwrap();
        for i in 0..seq {
            let row = out.logits.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            total += -(row[window[i + 1] as usize] - max - denom.ln());
            count += 1;
        }
        start += seq;
    }
    total / count as f64
}

fn main() {
    let cfg = ModelConfig::desk();
    let raw = init_params(&cfg, 7).unwrap();
    let (train_c, eval_c) = markov_corpus(64, 42 ^ 0xC0, 65536, 8192);
    let opts = TrainOptions { steps: 200, batch: 16, seq_len: 32, lr: 1e-3, seed: 42, offset_aug_std: 0.0 };
    let (base, pm) = pretrain(&raw, &train_c, &eval_c, &opts).unwrap();
    println!("base {:.4}", pm.heldout_loss);
    let eval_small = &eval_c[..2048];

    let mut rng = Prng::from_seed(3);
    for norm in [0.1, 0.3] {
        let mut worst: f64 = 0.0;
        let mut best = f64::INFINITY;
        for _ in 0..24 {
            let mut u: Vec<f64> = (0..64).map(|_| rng.normal(0.0, 1.0)).collect();
            let n: f64 = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in &mut u { *v *= norm / n; }
            let loss = lm_with_offset(&base, eval_small, &u);
            worst = worst.max(loss);
            best = best.min(loss);
        }
        println!("norm {norm}: random dirs best {best:.4} worst {worst:.4}");
    }
    // Greedy coordinate descent for a cheap direction at norm 0.3.
    let mut u = vec![0.0f64; 64];
    u[0] = 0.3;
    let mut cur = lm_with_offset(&base, eval_small, &u);
    for _pass in 0..3 {
        for i in 0..64 {
            for delta in [0.15f64, -0.15, 0.075, -0.075] {
                let mut cand = u.clone();
                cand[i] += delta;
                let n: f64 = cand.iter().map(|v| v * v).sum::<f64>().sqrt();
                for v in &mut cand { *v *= 0.3 / n; }
                let loss = lm_with_offset(&base, eval_small, &cand);
                if loss < cur {
                    cur = loss;
                    u = cand;
                }
            }
        }
    }
    println!("greedy-optimized direction at norm 0.3: {cur:.4}");
}
