//! Provider strategies behind a common trait, registered by name and
//! selected at runtime. `honest` plays the protocol; the rest implement the
//! attack suite from the security analysis.

use crate::error::{Error, Result};
use crate::model::{init_params, perturb_finetune_step, perturb_low_rank, perturb_quantize, ModelParams};
use crate::numerics::kernels::second_argmax;
use crate::numerics::{Prng, Tensor};
use crate::privacy::{AdversaryView, PrivacyMode, ProviderResponse, SealedRequest};
use crate::protocol1::{SentinelCache, TranscriptStep};

/// Whether sentinel slots are drawn at random (the protocol default) or
/// appended after the prompt by public convention. The appended layout is
/// what the cache-guessing experiment uses to isolate the sequence guess.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SentinelPlacement {
    Random,
    Appended,
}

/// Public artifacts every strategy may read: the model weights, the logit
/// cache, and the placement convention.
pub struct PublicContext<'a> {
    pub model: &'a ModelParams,
    pub cache: &'a SentinelCache,
    pub placement: SentinelPlacement,
}

/// One provider behavior. Implementations may read only the view, the
/// public context, and whatever `SealedRequest` exposes.
pub trait ProviderStrategy: Send + Sync {
    fn name(&self) -> &str;

    fn available_in(&self, mode: PrivacyMode) -> bool {
        let _ = mode;
        true
    }

    fn respond(
        &self,
        ctx: &PublicContext,
        view: &AdversaryView,
        sealed: &SealedRequest,
        rng: &mut Prng,
    ) -> Result<ProviderResponse>;

    /// Generation-time hook: the tokens the provider claims to have
    /// sampled. Honest strategies return the honest tokens.
    fn claim_tokens(
        &self,
        transcript: &[TranscriptStep],
        honest_tokens: &[u32],
        rng: &mut Prng,
    ) -> Vec<u32> {
        let _ = (transcript, rng);
        honest_tokens.to_vec()
    }
}

/// Checks mode availability, then runs the strategy.
pub fn run_provider(
    strategy: &dyn ProviderStrategy,
    ctx: &PublicContext,
    view: &AdversaryView,
    sealed: &SealedRequest,
    rng: &mut Prng,
) -> Result<ProviderResponse> {
    if !strategy.available_in(view.mode) {
        return Err(Error::Capability {
            strategy: strategy.name().to_string(),
            mode: view.mode.to_string(),
        });
    }
    strategy.respond(ctx, view, sealed, rng)
}

fn noise_tensor(rows: usize, cols: usize, rng: &mut Prng) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.normal(0.0, 1.0)).collect(),
    )
    .unwrap()
}

fn overwrite_rows_with_noise(t: &mut Tensor, slots: &[usize], rng: &mut Prng) {
    for &s in slots {
        for v in t.row_mut(s - 1) {
            *v = rng.normal(0.0, 1.0);
        }
    }
}

// --- honest -----------------------------------------------------------

pub struct Honest;

impl ProviderStrategy for Honest {
    fn name(&self) -> &str {
        "honest"
    }

    fn respond(
        &self,
        ctx: &PublicContext,
        _view: &AdversaryView,
        sealed: &SealedRequest,
        _rng: &mut Prng,
    ) -> Result<ProviderResponse> {
        Ok(ProviderResponse {
            rows: sealed.forward_with(ctx.model)?,
            strategy: self.name().to_string(),
            decisions: vec![],
        })
    }
}

// --- substitute model --------------------------------------------------

/// Which cheaper replacement the substitute provider runs.
#[derive(Clone, Debug, PartialEq)]
pub enum PerturbationSpec {
    LowRank(usize),
    Quantize(u32),
    FinetuneStep(f64),
    Reseed(u64),
}

impl PerturbationSpec {
    pub fn label(&self) -> String {
        match self {
            PerturbationSpec::LowRank(r) => format!("low-rank:{r}"),
            PerturbationSpec::Quantize(b) => format!("quantize:{b}"),
            PerturbationSpec::FinetuneStep(lr) => format!("finetune:{lr}"),
            PerturbationSpec::Reseed(s) => format!("reseed:{s}"),
        }
    }

    /// Builds the perturbed weights this spec describes.
    pub fn apply(&self, model: &ModelParams) -> Result<ModelParams> {
        match *self {
            PerturbationSpec::LowRank(r) => perturb_low_rank(model, r),
            PerturbationSpec::Quantize(bits) => perturb_quantize(model, bits),
            PerturbationSpec::FinetuneStep(lr) => {
                // Fixed-seed single-sample batch; the spec is deterministic.
                let mut rng = Prng::from_seed(0xF1E7);
                let batch = vec![rng.tokens(8, model.config.vocab_size as u32)];
                perturb_finetune_step(model, &batch, lr)
            }
            PerturbationSpec::Reseed(seed) => init_params(&model.config, seed),
        }
    }
}

pub struct SubstituteModel {
    label: String,
    substitute: ModelParams,
}

impl SubstituteModel {
    pub fn new(model: &ModelParams, spec: PerturbationSpec) -> Result<Self> {
        Ok(SubstituteModel {
            label: format!("substitute:{}", spec.label()),
            substitute: spec.apply(model)?,
        })
    }
}

impl ProviderStrategy for SubstituteModel {
    fn name(&self) -> &str {
        &self.label
    }

    fn respond(
        &self,
        _ctx: &PublicContext,
        _view: &AdversaryView,
        sealed: &SealedRequest,
        _rng: &mut Prng,
    ) -> Result<ProviderResponse> {
        Ok(ProviderResponse {
            rows: sealed.forward_with(&self.substitute)?,
            strategy: self.label.clone(),
            decisions: vec![],
        })
    }
}

// --- position guess ----------------------------------------------------

/// Guesses the K sentinel slots, computes those slots standalone at
/// positions 1..K, and fills everything else with noise. Needs structural
/// privacy to address slots.
pub struct PositionGuess;

impl ProviderStrategy for PositionGuess {
    fn name(&self) -> &str {
        "position-guess"
    }

    fn available_in(&self, mode: PrivacyMode) -> bool {
        mode == PrivacyMode::Structural
    }

    fn respond(
        &self,
        ctx: &PublicContext,
        view: &AdversaryView,
        sealed: &SealedRequest,
        rng: &mut Prng,
    ) -> Result<ProviderResponse> {
        let k = ctx.cache.k;
        let guess = rng.sample_without_replacement(view.total_length, k)?;
        let standalone = sealed.forward_standalone(ctx.model, &guess)?;
        let width = sealed.response_width(ctx.model);
        let mut rows = noise_tensor(view.total_length, width, rng);
        for (i, &slot) in guess.iter().enumerate() {
            rows.row_mut(slot - 1).copy_from_slice(standalone.row(i));
        }
        Ok(ProviderResponse {
            rows,
            strategy: self.name().to_string(),
            decisions: guess.iter().map(|&s| s as u64).collect(),
        })
    }
}

// --- cache guess -------------------------------------------------------

/// Picks a cache entry uniformly and pastes its logits where it believes
/// the sentinels sit: the last K slots under the appended convention,
/// uniformly guessed slots otherwise.
pub struct CacheGuess;

impl ProviderStrategy for CacheGuess {
    fn name(&self) -> &str {
        "cache-guess"
    }

    fn respond(
        &self,
        ctx: &PublicContext,
        view: &AdversaryView,
        sealed: &SealedRequest,
        rng: &mut Prng,
    ) -> Result<ProviderResponse> {
        if sealed.protocol() != 1 {
            return Err(Error::InvalidArgument(
                "cache guessing pastes logits and only applies to protocol 1".into(),
            ));
        }
        let k = ctx.cache.k;
        let entry_idx = rng.below(ctx.cache.len() as u64) as usize;
        let slots: Vec<usize> = match ctx.placement {
            SentinelPlacement::Appended => {
                ((view.total_length - k + 1)..=view.total_length).collect()
            }
            SentinelPlacement::Random => rng.sample_without_replacement(view.total_length, k)?,
        };
        let entry = ctx.cache.entry(entry_idx);
        let mut rows = noise_tensor(view.total_length, entry.cols(), rng);
        for (i, &slot) in slots.iter().enumerate() {
            rows.row_mut(slot - 1).copy_from_slice(entry.row(i));
        }
        let mut decisions = vec![entry_idx as u64];
        decisions.extend(slots.iter().map(|&s| s as u64));
        Ok(ProviderResponse {
            rows,
            strategy: self.name().to_string(),
            decisions,
        })
    }
}

// --- subset drop -------------------------------------------------------

/// Drops `k` uniformly chosen slots, forwards the remaining sub-request
/// under the restricted mask, and fills the dropped rows with noise.
pub struct SubsetDrop {
    pub drop_count: usize,
}

impl ProviderStrategy for SubsetDrop {
    fn name(&self) -> &str {
        "subset-drop"
    }

    fn available_in(&self, mode: PrivacyMode) -> bool {
        mode == PrivacyMode::Structural
    }

    fn respond(
        &self,
        ctx: &PublicContext,
        view: &AdversaryView,
        sealed: &SealedRequest,
        rng: &mut Prng,
    ) -> Result<ProviderResponse> {
        if self.drop_count == 0 || self.drop_count >= view.total_length {
            return Err(Error::InvalidArgument(format!(
                "cannot drop {} of {} slots",
                self.drop_count, view.total_length
            )));
        }
        let dropped = rng.sample_without_replacement(view.total_length, self.drop_count)?;
        let kept: Vec<usize> = (1..=view.total_length)
            .filter(|s| !dropped.contains(s))
            .collect();
        let mut rows = sealed.forward_subset(ctx.model, &kept)?;
        overwrite_rows_with_noise(&mut rows, &dropped, rng);
        Ok(ProviderResponse {
            rows,
            strategy: self.name().to_string(),
            decisions: dropped.iter().map(|&s| s as u64).collect(),
        })
    }
}

// --- random outputs ----------------------------------------------------

pub struct RandomOutputs;

impl ProviderStrategy for RandomOutputs {
    fn name(&self) -> &str {
        "random-outputs"
    }

    fn respond(
        &self,
        ctx: &PublicContext,
        view: &AdversaryView,
        sealed: &SealedRequest,
        rng: &mut Prng,
    ) -> Result<ProviderResponse> {
        let width = sealed.response_width(ctx.model);
        Ok(ProviderResponse {
            rows: noise_tensor(view.total_length, width, rng),
            strategy: self.name().to_string(),
            decisions: vec![],
        })
    }
}

// --- sampling tamper ---------------------------------------------------

/// Computes honestly but swaps one claimed token for the runner-up of its
/// step's generation row; the greedy argmax check is the detection target.
pub struct SamplingTamper;

impl ProviderStrategy for SamplingTamper {
    fn name(&self) -> &str {
        "sampling-tamper"
    }

    fn respond(
        &self,
        ctx: &PublicContext,
        _view: &AdversaryView,
        sealed: &SealedRequest,
        _rng: &mut Prng,
    ) -> Result<ProviderResponse> {
        Ok(ProviderResponse {
            rows: sealed.forward_with(ctx.model)?,
            strategy: self.name().to_string(),
            decisions: vec![],
        })
    }

    fn claim_tokens(
        &self,
        transcript: &[TranscriptStep],
        honest_tokens: &[u32],
        rng: &mut Prng,
    ) -> Vec<u32> {
        let mut claimed = honest_tokens.to_vec();
        if claimed.is_empty() {
            return claimed;
        }
        let step = rng.below(claimed.len() as u64) as usize;
        let row = transcript[step].request.last_original_slot() - 1;
        claimed[step] = second_argmax(transcript[step].logits.row(row)) as u32;
        claimed
    }
}

// --- registry ----------------------------------------------------------

pub const STRATEGY_NAMES: [&str; 7] = [
    "honest",
    "substitute",
    "position-guess",
    "cache-guess",
    "subset-drop",
    "random-outputs",
    "sampling-tamper",
];

pub fn strategy_names() -> &'static [&'static str] {
    &STRATEGY_NAMES
}

/// Strategies runnable under a privacy mode; slot-addressing attacks need
/// structural privacy.
pub fn available_strategies(mode: PrivacyMode) -> Vec<&'static str> {
    STRATEGY_NAMES
        .iter()
        .copied()
        .filter(|name| match *name {
            "position-guess" | "subset-drop" => mode == PrivacyMode::Structural,
            _ => true,
        })
        .collect()
}

/// Builds a strategy from its registry spec, e.g. `honest`,
/// `subset-drop:1`, `substitute:low-rank:63`, `substitute:reseed:9`.
pub fn build_strategy(spec: &str, model: &ModelParams) -> Result<Box<dyn ProviderStrategy>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = |msg: &str| Error::InvalidArgument(format!("strategy `{spec}`: {msg}"));
    match parts[0] {
        "honest" => Ok(Box::new(Honest)),
        "position-guess" => Ok(Box::new(PositionGuess)),
        "cache-guess" => Ok(Box::new(CacheGuess)),
        "random-outputs" => Ok(Box::new(RandomOutputs)),
        "sampling-tamper" => Ok(Box::new(SamplingTamper)),
        "subset-drop" => {
            let k = match parts.get(1) {
                None => 1,
                Some(v) => v.parse().map_err(|_| bad("drop count must be an integer"))?,
            };
            Ok(Box::new(SubsetDrop { drop_count: k }))
        }
        "substitute" => {
            let kind = parts.get(1).ok_or_else(|| bad("missing perturbation"))?;
            let arg = parts.get(2);
            let spec = match *kind {
                "low-rank" => PerturbationSpec::LowRank(
                    arg.ok_or_else(|| bad("missing rank"))?
                        .parse()
                        .map_err(|_| bad("rank must be an integer"))?,
                ),
                "quantize" => PerturbationSpec::Quantize(
                    arg.ok_or_else(|| bad("missing bit width"))?
                        .parse()
                        .map_err(|_| bad("bits must be an integer"))?,
                ),
                "finetune" => PerturbationSpec::FinetuneStep(
                    arg.map(|v| v.parse())
                        .unwrap_or(Ok(1e-3))
                        .map_err(|_| bad("learning rate must be a float"))?,
                ),
                "reseed" => PerturbationSpec::Reseed(
                    arg.ok_or_else(|| bad("missing seed"))?
                        .parse()
                        .map_err(|_| bad("seed must be an integer"))?,
                ),
                other => return Err(bad(&format!("unknown perturbation `{other}`"))),
            };
            Ok(Box::new(SubstituteModel::new(model, spec)?))
        }
        other => Err(bad(&format!("unknown strategy `{other}`"))),
    }
}
