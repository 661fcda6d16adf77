//! Desk-scale experiments: a shared base, N synthetic "modality"
//! fine-tunes, and the merge / mask / reconstruct pipeline evaluated
//! against the originals.

mod experiment;
pub mod mlp;
mod task;

pub use experiment::{
    evaluate_methods, run_forgetting_experiment, run_forgetting_seed, run_retention_experiment, run_sweep,
    synthesize_models, task_loss, task_score, write_artifacts, Architecture, DareSpec, ExperimentSpec,
    ForgettingOutcome, ForgettingSpec, LossPair, Method, MethodResult, RetentionOutcome, SeedForgetting,
    SeedRetention, Sweep, SweepAxis, SweepRow, Synthesis, MODALITIES,
};
pub use mlp::{Dataset, MlpParams, MlpShape};
pub use task::SyntheticTask;
