//! Diagnostic: where does the LM damage of noise training live?

use priveri_core::model::{heldout_log_loss, init_params, markov_corpus, pretrain, ModelConfig, TrainOptions};
use priveri_core::numerics::{Prng, Tensor};
use priveri_core::protocol2::{evaluate_modules, init_modules, train_modules, NoiseMode, NoiseSet, NoiseTrainOptions};

fn main() {
    let cfg = ModelConfig::desk();
    let raw = init_params(&cfg, 7).unwrap();
    let (train, eval) = markov_corpus(64, 1234 ^ 0x5EED_C0DE ^ 0, 65536, 8192);
    let (train_c, eval_c) = markov_corpus(64, 42 ^ 0xC0, 65536, 8192);
    let _ = (train, eval);
    let opts = TrainOptions { steps: 200, batch: 16, seq_len: 32, lr: 1e-3, seed: 42, offset_aug_std: 0.0 };
    let (base, pm) = pretrain(&raw, &train_c, &eval_c, &opts).unwrap();
    println!("base heldout {:.4}", pm.heldout_loss);

    let modules0 = init_modules(&base, NoiseSet::new(16).unwrap(), 42 ^ 0x11).unwrap();
    let nopts = NoiseTrainOptions { lambda: 3.5, lr: 5e-4, steps: 300, batch: 8, seq_len: 32, seed: 42 };
    let (tm, metrics) = train_modules(&base, &modules0, &train_c, &eval_c, &nopts).unwrap();
    println!("trained: acc {:.4} lm {:.4} (ratio {:.3})", metrics.heldout_noise_accuracy, metrics.heldout_log_loss, metrics.heldout_log_loss / pm.heldout_loss);

    // Clean-path damage: zero the noise table, keep trained combiner.
    let mut clean = tm.clone();
    clean.embedder.noise_embedding = Tensor::zeros(vec![16, 64]);
    let stats = evaluate_modules(&base, &clean, &eval_c, 32, usize::MAX, NoiseMode::Shared, 99).unwrap();
    println!("clean-path-only lm {:.4} (ratio {:.3})", stats.log_loss, stats.log_loss / pm.heldout_loss);

    // Per-id damage: fix b, measure lm.
    for b in [0u32, 5, 13] {
        let mut one = tm.clone();
        // Make every row of the noise table equal row b: any drawn id acts like b.
        let row: Vec<f64> = one.embedder.noise_embedding.row(b as usize).to_vec();
        for i in 0..16 { one.embedder.noise_embedding.row_mut(i).copy_from_slice(&row); }
        let stats = evaluate_modules(&base, &one, &eval_c, 32, usize::MAX, NoiseMode::Shared, 99).unwrap();
        println!("fixed-id {b} lm {:.4}", stats.log_loss);
    }
    // Offset norms
    let e = &tm.embedder.noise_embedding;
    let norms: Vec<f64> = (0..16).map(|i| e.row(i).iter().map(|v| v*v).sum::<f64>().sqrt()).collect();
    println!("noise row norms: {:?}", norms.iter().map(|v| (v*100.0).round()/100.0).collect::<Vec<_>>());
    let mut rng = Prng::from_seed(1);
    let _ = rng.next_u64();
    let tok_norms: Vec<f64> = (0..5).map(|i| base.token_embedding.row(i).iter().map(|v| v*v).sum::<f64>().sqrt()).collect();
    println!("token emb norms (first 5): {:?}", tok_norms.iter().map(|v| (v*100.0).round()/100.0).collect::<Vec<_>>());
}
