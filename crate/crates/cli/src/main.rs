//! Operator surface for the verification protocols: model/cache/module
//! generation, request/respond/verify round trips, augmented greedy
//! generation with batch verification, noise-module training, attack
//! experiments, analytic bounds, and the fingerprint study.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage/format error.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use priveri_core::harness::{
    analytic_attack_probability, comm_overhead_bytes, fingerprint_study, run_attack_experiment,
    run_generation_experiment, BoundKind, ExperimentSpec, GenerationSpec,
};
use priveri_core::model::{
    self, init_params, markov_corpus, ModelConfig, ModelParams, TrainOptions,
};
use priveri_core::numerics::Prng;
use priveri_core::privacy::{
    available_strategies, build_strategy, make_view, run_provider, PrivacyMode, PublicContext,
    RequestPayload, SealedRequest, SentinelPlacement,
};
use priveri_core::protocol1::{
    build_request, generate_cache, generate_with_schedule, pregenerate_schedule, verify,
    verify_greedy_sampling, verify_transcript, SentinelCache,
};
use priveri_core::protocol2::{
    build_noisy_request, completeness_bound, init_modules, read_modules_from_path, train_modules,
    verify_noisy, write_modules_to_dir, NoiseMode, NoiseSet, NoiseTrainOptions,
};
use priveri_core::records::{
    read_request, read_response, write_request, write_response, RequestRecord, ResponseRecord,
};

use config::{load_config, pick, require, RunConfig};

#[derive(Parser)]
#[command(name = "priveri", about = "Sentinel-fingerprint verified inference at desk scale")]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct CommonOpts {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    noise_params: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw fresh model weights and write the manifest+blob pair.
    GenModel {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        embed_dim: Option<usize>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        max_positions: Option<usize>,
    },
    /// AdamW next-token pretraining on the seeded Markov corpus.
    Pretrain {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        corpus_seed: Option<u64>,
        /// Std of the constant embedding-offset augmentation.
        #[arg(long)]
        offset_aug: Option<f64>,
    },
    /// Precompute the public sentinel logit cache.
    GenCache {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        cache_size: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Build a sentinel-augmented (optionally noised) request record.
    Request {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        protocol: Option<u8>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        /// Comma-separated token ids; overrides --n.
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        noise_mode: Option<String>,
    },
    /// Play a provider strategy against a request record.
    Respond {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        request: PathBuf,
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Verify a response record against the cache (and noise ids).
    Verify {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        request: PathBuf,
        #[arg(long)]
        response: PathBuf,
    },
    /// Augmented greedy generation plus batch transcript and sampling checks.
    Generate {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Train the noise embedder/predictor against a frozen base model.
    TrainNoise {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        noise_set: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long)]
        corpus_seed: Option<u64>,
    },
    /// Monte Carlo attack experiment with 3-sigma bound comparison.
    Attack {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        protocol: Option<u8>,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        placement: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        cache_size: Option<usize>,
        #[arg(long)]
        noise_set: Option<usize>,
        #[arg(long)]
        trials: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        /// Run the generation-time experiment instead of single requests.
        #[arg(long, default_value_t = false)]
        generation: bool,
        #[arg(long)]
        gen_steps: Option<usize>,
    },
    /// Analytic probabilities and the communication-footprint formula.
    Bounds {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        n: Option<u64>,
        #[arg(long)]
        k: Option<u64>,
        #[arg(long)]
        cache_size: Option<u64>,
        #[arg(long)]
        noise_set: Option<u64>,
        #[arg(long)]
        drop: Option<u64>,
        #[arg(long)]
        len: Option<u64>,
        #[arg(long)]
        bytes: Option<u64>,
        /// Per-position accuracy for the completeness formula.
        #[arg(long)]
        acc: Option<f64>,
        #[arg(long)]
        positions: Option<u32>,
    },
    /// Fingerprint-separability study over perturbed models.
    FingerprintStudy {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        sequences: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        /// Comma-separated low-rank ranks.
        #[arg(long)]
        ranks: Option<String>,
        #[arg(long)]
        quant_bits: Option<u32>,
        #[arg(long)]
        finetune_lr: Option<f64>,
        #[arg(long)]
        reseed: Option<u64>,
    },
    /// List provider strategies available under a privacy mode.
    Strategies {
        #[arg(long)]
        mode: Option<String>,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn resolve_seed(flag: Option<u64>, cfg: &RunConfig) -> u64 {
    flag.or(cfg.seed)
        .or_else(|| {
            std::env::var("PRIVERI_SEED")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(0)
}

fn parse_mode(s: &str) -> Result<PrivacyMode> {
    match s {
        "structural" => Ok(PrivacyMode::Structural),
        "opaque" => Ok(PrivacyMode::Opaque),
        other => bail!("unknown privacy mode `{other}` (structural|opaque)"),
    }
}

fn parse_placement(s: &str) -> Result<SentinelPlacement> {
    match s {
        "random" => Ok(SentinelPlacement::Random),
        "appended" => Ok(SentinelPlacement::Appended),
        other => bail!("unknown placement `{other}` (random|appended)"),
    }
}

fn parse_noise_mode(s: &str) -> Result<NoiseMode> {
    match s {
        "shared" => Ok(NoiseMode::Shared),
        "per-position" => Ok(NoiseMode::PerPosition),
        other => bail!("unknown noise mode `{other}` (shared|per-position)"),
    }
}

fn parse_token_list(s: &str) -> Result<Vec<u32>> {
    s.split(',')
        .map(|t| t.trim().parse::<u32>().map_err(|_| anyhow!("bad token id `{t}`")))
        .collect()
}

fn load_model(path: &Path) -> Result<ModelParams> {
    model::read_from_path(path).with_context(|| format!("loading model {}", path.display()))
}

fn load_cache(path: &Path) -> Result<SentinelCache> {
    let bytes =
        std::fs::read(path).with_context(|| format!("loading cache {}", path.display()))?;
    Ok(SentinelCache::from_bytes(&bytes)?)
}

fn emit(report: &serde_json::Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    if let Some(path) = out {
        std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{text}");
    Ok(())
}

fn run() -> Result<u8> {
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };

    match cli.command {
        Command::GenModel {
            common,
            vocab_size,
            embed_dim,
            layers,
            heads,
            max_positions,
        } => {
            let seed = resolve_seed(common.seed, &cfg);
            let mut config = ModelConfig::desk();
            if let Some(v) = vocab_size {
                config.vocab_size = v;
            }
            if let Some(d) = embed_dim {
                config.embed_dim = d;
                config.hidden_dim = d;
            }
            if let Some(l) = layers {
                config.n_layers = l;
            }
            if let Some(h) = heads {
                config.n_heads = h;
            }
            if let Some(m) = max_positions {
                config.max_positions = m;
            }
            let params = init_params(&config, seed)?;
            let out = require(common.out, cfg.out, "out")?;
            model::write_to_dir(&params, &out)?;
            emit(
                &json!({"written": out, "seed": seed, "hash": params.hash_hex()}),
                None,
            )?;
            Ok(0)
        }

        Command::Pretrain {
            common,
            steps,
            batch,
            seq_len,
            lr,
            corpus_seed,
            offset_aug,
        } => {
            let model_path = require(common.model, cfg.model.clone(), "model")?;
            let params = load_model(&model_path)?;
            let seed = resolve_seed(common.seed, &cfg);
            let opts = TrainOptions {
                steps: pick(steps, cfg.steps, 200),
                batch: pick(batch, cfg.batch, 16),
                seq_len: pick(seq_len, cfg.seq_len, 32),
                lr: pick(lr, cfg.lr, 1e-3),
                seed,
                offset_aug_std: offset_aug.unwrap_or(0.0),
            };
            let corpus_seed = pick(corpus_seed, cfg.corpus_seed, seed ^ 0xC0);
            let (train, eval) =
                markov_corpus(params.config.vocab_size as u32, corpus_seed, 65_536, 8_192);
            let (trained, metrics) = model::pretrain(&params, &train, &eval, &opts)?;
            let out = require(common.out, cfg.out, "out")?;
            model::write_to_dir(&trained, &out)?;
            emit(
                &json!({
                    "written": out,
                    "hash": trained.hash_hex(),
                    "metrics": metrics,
                }),
                None,
            )?;
            Ok(0)
        }

        Command::GenCache {
            common,
            cache_size,
            k,
        } => {
            let model_path = require(common.model, cfg.model.clone(), "model")?;
            let params = load_model(&model_path)?;
            let seed = resolve_seed(common.seed, &cfg);
            let cache = generate_cache(
                &params,
                pick(cache_size, cfg.cache_size, 100),
                pick(k, cfg.k, 3),
                &mut Prng::from_seed(seed),
            )?;
            let out = require(common.out, cfg.out, "out")?;
            std::fs::write(&out, cache.to_bytes())?;
            emit(
                &json!({"written": out, "entries": cache.len(), "k": cache.k, "seed": seed}),
                None,
            )?;
            Ok(0)
        }

        Command::Request {
            common,
            protocol,
            mode,
            n,
            prompt,
            noise_mode,
        } => {
            let model_path = require(common.model, cfg.model.clone(), "model")?;
            let params = load_model(&model_path)?;
            let cache_path = require(common.cache, cfg.cache.clone(), "cache")?;
            let cache = load_cache(&cache_path)?;
            if cache.model_hash != params.hash {
                bail!("cache was generated for a different model");
            }
            let seed = resolve_seed(common.seed, &cfg);
            let mut rng = Prng::from_seed(seed);
            let prompt_tokens = match prompt {
                Some(ref s) => parse_token_list(s)?,
                None => {
                    let len = pick(n, cfg.n, 14);
                    rng.tokens(len, params.config.vocab_size as u32)
                }
            };
            let protocol = pick(protocol, cfg.protocol, 1);
            let privacy_mode = parse_mode(&pick(mode, cfg.mode.clone(), "structural".into()))?;
            let sequence = cache.draw(&mut rng).clone();
            let payload = match protocol {
                1 => RequestPayload::Plain(build_request(&prompt_tokens, &sequence, &mut rng)?),
                2 => {
                    let np_path =
                        require(common.noise_params, cfg.noise_params.clone(), "noise-params")?;
                    let modules = read_modules_from_path(&np_path)?;
                    if modules.base_model_hash != params.hash {
                        bail!("noise modules belong to a different model");
                    }
                    let nm = parse_noise_mode(&noise_mode.unwrap_or_else(|| "shared".into()))?;
                    RequestPayload::Noisy(build_noisy_request(
                        &params,
                        &prompt_tokens,
                        &sequence,
                        &modules.noise_set.clone(),
                        &modules,
                        &mut rng,
                        nm,
                    )?)
                }
                p => bail!("unknown protocol {p}"),
            };
            let record = RequestRecord {
                payload,
                mode: privacy_mode,
                model_hash: params.hash,
            };
            let out = require(common.out, cfg.out, "out")?;
            write_request(&record, &out)?;
            emit(
                &json!({
                    "written": out,
                    "protocol": protocol,
                    "n": record.payload.base().n_original,
                    "k": record.payload.base().k(),
                    "seed": seed,
                }),
                None,
            )?;
            Ok(0)
        }

        Command::Respond {
            common,
            request,
            strategy,
        } => {
            let model_path = require(common.model, cfg.model.clone(), "model")?;
            let params = load_model(&model_path)?;
            let cache_path = require(common.cache, cfg.cache.clone(), "cache")?;
            let cache = load_cache(&cache_path)?;
            let record = read_request(&request)?;
            if record.model_hash != params.hash {
                bail!("request targets a different model");
            }
            let seed = resolve_seed(common.seed, &cfg);
            let spec = pick(strategy, cfg.strategy.clone(), "honest".into());
            let strategy = build_strategy(&spec, &params)?;
            let ctx = PublicContext {
                model: &params,
                cache: &cache,
                placement: SentinelPlacement::Random,
            };
            let view = make_view(&record.payload, record.mode);
            let sealed = SealedRequest::new(&record.payload);
            let response =
                run_provider(strategy.as_ref(), &ctx, &view, &sealed, &mut Prng::from_seed(seed))?;
            let out = require(common.out, cfg.out, "out")?;
            let resp_record = ResponseRecord::from_response(
                &response,
                record.payload.protocol(),
                params.hash,
            );
            write_response(&resp_record, &out)?;
            emit(
                &json!({"written": out, "strategy": response.strategy, "seed": seed}),
                None,
            )?;
            Ok(0)
        }

        Command::Verify {
            common,
            request,
            response,
        } => {
            let model_path = require(common.model, cfg.model.clone(), "model")?;
            let params = load_model(&model_path)?;
            let cache_path = require(common.cache, cfg.cache.clone(), "cache")?;
            let cache = load_cache(&cache_path)?;
            let req = read_request(&request)?;
            let resp = read_response(&response)?;
            if req.model_hash != params.hash {
                bail!("request targets a different model");
            }
            let tol = pick(common.tol, cfg.tol, 1e-9);
            let (verified, detail) = match &req.payload {
                RequestPayload::Plain(r) => {
                    let result = verify(&resp.rows, r, &cache, tol)?;
                    (result.verified, serde_json::to_value(&result)?)
                }
                RequestPayload::Noisy(r) => {
                    let np_path =
                        require(common.noise_params, cfg.noise_params.clone(), "noise-params")?;
                    let modules = read_modules_from_path(&np_path)?;
                    let result = verify_noisy(&resp.rows, r, &cache, &modules, &params, tol)?;
                    (result.verified, serde_json::to_value(&result)?)
                }
            };
            emit(
                &json!({
                    "verified": verified,
                    "tolerance": tol,
                    "strategy": resp.strategy,
                    "detail": detail,
                }),
                common.out.or(cfg.out).as_deref(),
            )?;
            Ok(if verified { 0 } else { 1 })
        }

        Command::Generate {
            common,
            n,
            prompt,
            steps,
            k,
            strategy,
        } => {
            let model_path = require(common.model, cfg.model.clone(), "model")?;
            let params = load_model(&model_path)?;
            let cache_path = require(common.cache, cfg.cache.clone(), "cache")?;
            let cache = load_cache(&cache_path)?;
            if cache.model_hash != params.hash {
                bail!("cache was generated for a different model");
            }
            let seed = resolve_seed(common.seed, &cfg);
            let mut rng = Prng::from_seed(seed);
            let prompt_tokens = match prompt {
                Some(ref s) => parse_token_list(s)?,
                None => {
                    let len = pick(n, cfg.n, 8);
                    rng.tokens(len, params.config.vocab_size as u32)
                }
            };
            let gen_steps = pick(steps, cfg.steps, 10);
            let k = pick(k, cfg.k, cache.k);
            let tol = pick(common.tol, cfg.tol, 1e-9);
            let schedule = pregenerate_schedule(prompt_tokens.len(), k, gen_steps, &mut rng)?;
            let (transcript, honest_tokens) = generate_with_schedule(
                &params,
                &cache,
                &prompt_tokens,
                &schedule,
                gen_steps,
                &mut rng,
            )?;
            let spec = pick(strategy, cfg.strategy.clone(), "honest".into());
            let strat = build_strategy(&spec, &params)?;
            let claimed = strat.claim_tokens(&transcript, &honest_tokens, &mut rng);
            let transcript_verdict = verify_transcript(&transcript, &schedule, &cache, tol)?;
            let greedy_verdict = verify_greedy_sampling(&transcript, &claimed)?;
            let verified = transcript_verdict.verified && greedy_verdict.verified;
            emit(
                &json!({
                    "prompt": prompt_tokens,
                    "claimed_tokens": claimed,
                    "strategy": spec,
                    "transcript": transcript_verdict,
                    "greedy": greedy_verdict,
                    "verified": verified,
                    "seed": seed,
                }),
                common.out.or(cfg.out).as_deref(),
            )?;
            Ok(if verified { 0 } else { 1 })
        }

        Command::TrainNoise {
            common,
            noise_set,
            lambda,
            lr,
            steps,
            batch,
            seq_len,
            corpus_seed,
        } => {
            let model_path = require(common.model, cfg.model.clone(), "model")?;
            let params = load_model(&model_path)?;
            let seed = resolve_seed(common.seed, &cfg);
            let opts = NoiseTrainOptions {
                lambda: pick(lambda, cfg.lambda, 3.5),
                lr: pick(lr, cfg.lr, 5e-4),
                steps: pick(steps, cfg.steps, 300),
                batch: pick(batch, cfg.batch, 8),
                seq_len: pick(seq_len, cfg.seq_len, 32),
                seed,
            };
            let noise_set = NoiseSet::new(pick(noise_set, cfg.noise_set, 16))?;
            let corpus_seed = pick(corpus_seed, cfg.corpus_seed, seed ^ 0xC0);
            let (train, eval) =
                markov_corpus(params.config.vocab_size as u32, corpus_seed, 65_536, 8_192);
            let modules = init_modules(&params, noise_set, seed ^ 0x11)?;
            let (trained, metrics) = train_modules(&params, &modules, &train, &eval, &opts)?;
            let out = require(common.out, cfg.out, "out")?;
            write_modules_to_dir(&trained, &out)?;
            emit(&json!({"written": out, "metrics": metrics, "seed": seed}), None)?;
            Ok(0)
        }

        Command::Attack {
            common,
            protocol,
            strategy,
            mode,
            placement,
            n,
            k,
            cache_size,
            noise_set,
            trials,
            workers,
            generation,
            gen_steps,
        } => {
            let model_path = require(common.model, cfg.model.clone(), "model")?;
            let params = load_model(&model_path)?;
            let seed = resolve_seed(common.seed, &cfg);
            let strategy = pick(strategy, cfg.strategy.clone(), "honest".into());
            if generation {
                let spec = GenerationSpec {
                    trials: pick(trials, cfg.trials, 100),
                    prompt_len: pick(n, cfg.n, 8),
                    gen_steps: pick(gen_steps, None, 10),
                    k: pick(k, cfg.k, 3),
                    cache_size: pick(cache_size, cfg.cache_size, 16),
                    strategy,
                    master_seed: seed,
                    tolerance: pick(common.tol, cfg.tol, 1e-9),
                    workers: pick(workers, cfg.workers, 0),
                };
                let report = run_generation_experiment(&params, &spec)?;
                emit(&serde_json::to_value(&report)?, common.out.or(cfg.out).as_deref())?;
                return Ok(0);
            }
            let spec = ExperimentSpec {
                protocol: pick(protocol, cfg.protocol, 1),
                strategy,
                mode: parse_mode(&pick(mode, cfg.mode.clone(), "structural".into()))?,
                n: pick(n, cfg.n, 14),
                k: pick(k, cfg.k, 3),
                cache_size: pick(cache_size, cfg.cache_size, 100),
                noise_set: pick(noise_set, cfg.noise_set, 16),
                trials: pick(trials, cfg.trials, 1000),
                master_seed: seed,
                tolerance: pick(common.tol, cfg.tol, 1e-9),
                placement: parse_placement(&pick(
                    placement,
                    cfg.placement.clone(),
                    "random".into(),
                ))?,
                workers: pick(workers, cfg.workers, 0),
            };
            let modules = match (spec.protocol, &common.noise_params, &cfg.noise_params) {
                (2, flag, file) => {
                    let path = flag.clone().or_else(|| file.clone()).ok_or_else(|| {
                        anyhow!("protocol 2 attack experiments need --noise-params")
                    })?;
                    Some(read_modules_from_path(&path)?)
                }
                _ => None,
            };
            let report = run_attack_experiment(&params, modules.as_ref(), &spec)?;
            emit(&serde_json::to_value(&report)?, common.out.or(cfg.out).as_deref())?;
            Ok(0)
        }

        Command::Bounds {
            kind,
            n,
            k,
            cache_size,
            noise_set,
            drop,
            len,
            bytes,
            acc,
            positions,
        } => {
            let report = match kind.as_str() {
                "position-guess" => {
                    let p = analytic_attack_probability(BoundKind::PositionGuess {
                        n: n.ok_or_else(|| anyhow!("--n required"))?,
                        k: k.ok_or_else(|| anyhow!("--k required"))?,
                    })?;
                    json!({"kind": kind, "numerator": p.numerator.to_string(),
                           "denominator": p.denominator.to_string(), "value": p.value()})
                }
                "cache-guess" => {
                    let p = analytic_attack_probability(BoundKind::CacheGuess {
                        cache_size: cache_size.ok_or_else(|| anyhow!("--cache-size required"))?,
                    })?;
                    json!({"kind": kind, "numerator": p.numerator.to_string(),
                           "denominator": p.denominator.to_string(), "value": p.value()})
                }
                "subset-drop" => {
                    let p = analytic_attack_probability(BoundKind::SubsetDrop {
                        n: n.ok_or_else(|| anyhow!("--n required"))?,
                        k: k.ok_or_else(|| anyhow!("--k required"))?,
                        drop: drop.unwrap_or(1),
                    })?;
                    json!({"kind": kind, "numerator": p.numerator.to_string(),
                           "denominator": p.denominator.to_string(), "value": p.value()})
                }
                "noise-per-position" => {
                    let p = analytic_attack_probability(BoundKind::NoisePerPosition {
                        noise_set: noise_set.ok_or_else(|| anyhow!("--noise-set required"))?,
                    })?;
                    json!({"kind": kind, "numerator": p.numerator.to_string(),
                           "denominator": p.denominator.to_string(), "value": p.value()})
                }
                "completeness" => {
                    let a = acc.ok_or_else(|| anyhow!("--acc required"))?;
                    let m = positions.ok_or_else(|| anyhow!("--positions required"))?;
                    let value = completeness_bound(&vec![a; m as usize])?;
                    json!({"kind": kind, "acc": a, "positions": m, "value": value})
                }
                "comm-overhead" => {
                    let l = len.ok_or_else(|| anyhow!("--len required"))?;
                    let b = bytes.ok_or_else(|| anyhow!("--bytes required"))?;
                    let v = comm_overhead_bytes(l, b)?;
                    json!({"kind": kind, "len": l, "bytes_per_element": b,
                           "value": v.to_string()})
                }
                other => bail!("unknown bound kind `{other}`"),
            };
            emit(&report, None)?;
            Ok(0)
        }

        Command::FingerprintStudy {
            common,
            sequences,
            k,
            ranks,
            quant_bits,
            finetune_lr,
            reseed,
        } => {
            let model_path = require(common.model, cfg.model.clone(), "model")?;
            let params = load_model(&model_path)?;
            let seed = resolve_seed(common.seed, &cfg);
            let ranks: Vec<usize> = match ranks {
                Some(s) => s
                    .split(',')
                    .map(|r| r.trim().parse().map_err(|_| anyhow!("bad rank `{r}`")))
                    .collect::<Result<_>>()?,
                None => vec![1, 32, 63],
            };
            let mut perturbations = Vec::new();
            for r in ranks {
                perturbations.push((
                    format!("low-rank:{r}"),
                    model::perturb_low_rank(&params, r)?,
                ));
            }
            let bits = quant_bits.unwrap_or(8);
            perturbations.push((
                format!("quantize:{bits}"),
                model::perturb_quantize(&params, bits)?,
            ));
            let flr = finetune_lr.unwrap_or(1e-3);
            let mut batch_rng = Prng::from_seed(seed ^ 0xF1E7);
            let batch = vec![batch_rng.tokens(8, params.config.vocab_size as u32)];
            perturbations.push((
                format!("finetune:{flr}"),
                model::perturb_finetune_step(&params, &batch, flr)?,
            ));
            let reseed = reseed.unwrap_or(seed.wrapping_add(1000));
            perturbations.push((
                format!("reseed:{reseed}"),
                init_params(&params.config, reseed)?,
            ));
            let report = fingerprint_study(
                &params,
                &perturbations,
                pick(sequences, cfg.sequences, 1000),
                pick(k, cfg.k, 3),
                &mut Prng::from_seed(seed),
            )?;
            emit(&serde_json::to_value(&report)?, common.out.or(cfg.out).as_deref())?;
            Ok(0)
        }

        Command::Strategies { mode } => {
            let mode = parse_mode(&mode.unwrap_or_else(|| "structural".into()))?;
            emit(&json!({"mode": mode.to_string(), "strategies": available_strategies(mode)}), None)?;
            Ok(0)
        }
    }
}
