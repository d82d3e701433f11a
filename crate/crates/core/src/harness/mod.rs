//! Synthetic-transfer training harness: task generation, the training
//! loop for the adapter and its baselines, and the ablation grid.

mod ablate;
mod task;
mod train;

pub use ablate::{ablate, insertion_experiment, CellResult, ComparisonTable};
pub use task::{
    expected_family, generate_task, DomainData, Label, Sample, ShiftParams, TaskData, TaskKind,
    TaskSpec,
};
pub use train::{
    adapter_config_for, evaluate_strategy, final_feature_dim, regulation_tokens_and_dim, train, AdamW, HeadParams,
    Strategy, StrategyKind, TrainConfig, TrainOutcome, Trainables, Warmup,
};
