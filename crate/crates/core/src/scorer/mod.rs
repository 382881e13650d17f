//! Sequence scoring with a micro encoder-decoder and the label distribution
//! induced by a prompt.

mod checkpoint;
mod model;
mod tokenizer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{log_sum_exp, AutodiffError};
use crate::template::{Example, PromptTemplate, TemplateError};

pub use checkpoint::{load_model, model_from_bytes, model_to_bytes, save_model, sha256_hex, MAGIC, VERSION};
pub(crate) use checkpoint::{read_container, write_container, Reader, Writer, KIND_ADAPTER};
pub use model::{ModelConfig, ScorerModel};
pub use tokenizer::{Tokenizer, BOS, EOS, PAD, UNK};

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("sequence of {len} tokens exceeds max_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty target sequence")]
    EmptyTarget,
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("adapter: {0}")]
    Adapter(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Normalised distribution over a label set together with the raw summed
/// log-probabilities it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    pub probs: Vec<f64>,
    pub raw_log_scores: Vec<f64>,
}

impl LabelDistribution {
    pub fn from_raw(raw_log_scores: Vec<f64>) -> Self {
        let z = log_sum_exp(&raw_log_scores);
        let probs = raw_log_scores.iter().map(|&s| (s - z).exp()).collect();
        LabelDistribution { probs, raw_log_scores }
    }

    /// Most probable label; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Index of the largest value, preferring the lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl ScorerModel {
    pub fn label_distribution(&self, prompt: &PromptTemplate, example: &Example) -> Result<LabelDistribution, ScorerError> {
        let input = prompt.render_input(example)?;
        let targets = prompt.render_targets(example)?;
        let refs: Vec<&str> = targets.iter().map(String::as_str).collect();
        Ok(LabelDistribution::from_raw(self.raw_scores(&input, &refs)?))
    }

    pub fn predict(&self, prompt: &PromptTemplate, example: &Example) -> Result<usize, ScorerError> {
        Ok(self.label_distribution(prompt, example)?.argmax())
    }
}
