//! Synthetic suite generation, base-model pretraining and the experiments
//! built on top of them.

use thiserror::Error;

pub mod experiments;
pub mod pretrain;
pub mod suite;

pub use experiments::{
    ablation_csv, adapt_task, adaptation_inputs, default_adapt_config, default_full_finetune_config,
    diff_output_trees, eval_task, run_ablation, run_collapse, run_pipeline, run_pipeline_on, spread_subset,
    AblationRow, AdaptOptions, CollapseReport, CollapseRun, ModeSummary, PipelineConfig, PipelineSummary, Source,
    TaskSummary, SUMMARY_FILE,
};
pub use pretrain::{manifest_path, pretrain, pretrain_to, PretrainAttempt, PretrainConfig, PretrainManifest};
pub use suite::{
    generate_suite, load_suite, subsample, task_dir, CueGroup, GeneratorKind, Shift, SuiteConfig, SuiteManifest,
    TaskDir, TaskSpec, Vocabulary,
};

/// Share of all `N x K` predictions above which a run counts as collapsed.
pub const COLLAPSE_SHARE: f64 = 0.95;

#[derive(Debug, Error)]
pub enum WorkbenchError {
    #[error(transparent)]
    Template(#[from] crate::template::TemplateError),
    #[error(transparent)]
    Scorer(#[from] crate::scorer::ScorerError),
    #[error(transparent)]
    Distill(#[from] crate::distill::DistillError),
    #[error(transparent)]
    Eval(#[from] crate::evalsuite::EvalError),
    #[error(transparent)]
    Agreement(#[from] crate::agreement::AgreementError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("invalid suite: {0}")]
    Spec(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("pretraining gate failed: {0}")]
    Gate(String),
}

#[cfg(test)]
mod tests;
