//! Monte Carlo experiment engine, analytic-bound calculators, the
//! fingerprint-separability study, and standard-error comparison machinery.

mod bounds;
mod experiment;
mod generation;
mod stats;
mod study;

pub use bounds::{
    analytic_attack_probability, binomial, comm_overhead_bytes, BoundKind, Probability,
};
pub use experiment::{
    honest_logits, run_attack_experiment, run_noise_completeness, run_noise_soundness,
    trial_seed, ExperimentReport, ExperimentSpec, NoiseCompletenessReport, NoiseCompletenessSpec,
    NoiseSoundnessReport, NoiseSoundnessSpec,
};
pub use generation::{run_generation_experiment, GenerationReport, GenerationSpec};
pub use stats::{standard_error, standard_error_band};
pub use study::{fingerprint_study, StudyReport, StudyRow};
