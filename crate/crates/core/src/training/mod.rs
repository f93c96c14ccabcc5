//! Simulation-derived training data and the training loops for both
//! assistants.

pub mod context;
pub mod eval;
pub mod examples;
pub mod ia;
pub mod logs;
pub mod pipeline;

pub use context::{evaluate, fit, train_context, ContextTrainConfig, EnsembleReport, Evaluation, FitReport};
pub use eval::{context_accuracy, AccuracyByK, AccuracyConfig};
pub use examples::{
    read_shard, sample_add_examples, sample_relabel_examples, write_shard, ContextExample, ExampleTarget,
    SamplingConfig,
};
pub use ia::{mine_ia_negatives, train_ia, train_ia_with_mining, IaExample, IaTrainConfig};
pub use logs::{generate_episode_logs, EpisodeLog};
pub use pipeline::{train_assistants, PipelineConfig, PipelineReport};
