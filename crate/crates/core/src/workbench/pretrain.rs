//! Multitask prompted pretraining of the base scorer.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::suite::{load_suite, subsample, task_dir, SuiteManifest};
use super::WorkbenchError;
use crate::autodiff::{adam_step, AdamConfig, AdamState, DropoutKey, Graph};
use crate::distill::{lr_at, TrainConfig};
use crate::evalsuite::evaluate;
use crate::scorer::{save_model, ModelConfig, ScorerError, ScorerModel, Tokenizer};
use crate::seed::{derive_seed, rng_for};
use crate::template::{Example, PromptPool};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub max_len: usize,
    pub steps: u64,
    pub batch: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub max_attempts: usize,
    /// Held-out ensemble accuracy must exceed `1/J + gate_margin`.
    pub gate_margin: f64,
    pub gate_examples: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            layers: 2,
            d_model: 32,
            d_ff: 64,
            heads: 2,
            max_len: 128,
            steps: 6000,
            batch: 8,
            peak_lr: 3e-3,
            warmup_steps: 200,
            adam: AdamConfig::default(),
            seed: 0,
            max_attempts: 3,
            gate_margin: 0.05,
            gate_examples: 200,
        }
    }
}

impl PretrainConfig {
    fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            max_len: self.max_len,
            layers: self.layers,
            d_model: self.d_model,
            d_ff: self.d_ff,
            heads: self.heads,
        }
    }

    fn schedule(&self) -> TrainConfig {
        TrainConfig {
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            max_steps: self.steps,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainAttempt {
    pub attempt: usize,
    pub seed: u64,
    pub final_loss: f64,
    pub own_task_accuracy: BTreeMap<String, f64>,
    pub held_out_accuracy: BTreeMap<String, f64>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainManifest {
    pub config: PretrainConfig,
    pub suite_seed: u64,
    pub attempts: Vec<PretrainAttempt>,
    pub selected_attempt: usize,
    pub checkpoint_sha256: String,
    pub wall_clock_seconds: f64,
}

struct TrainingTask {
    pool: PromptPool,
    train: Vec<Example>,
    eval: Vec<Example>,
}

fn load_tasks(suite_dir: &Path, names: &[String], gate_examples: usize, seed: u64) -> Result<Vec<TrainingTask>, WorkbenchError> {
    names
        .iter()
        .map(|name| {
            let dir = task_dir(suite_dir, name);
            Ok(TrainingTask {
                pool: dir.pool()?,
                train: dir.split("train")?,
                eval: subsample(&dir.split("eval")?, gate_examples, seed, &format!("gate:{name}")),
            })
        })
        .collect()
}

/// Mean negative raw log-likelihood of the gold verbalizer over one batch,
/// then one optimizer step.
fn train_model(config: &PretrainConfig, tasks: &[TrainingTask], seed: u64) -> Result<(ScorerModel, f64), WorkbenchError> {
    let tokenizer = Tokenizer::printable_ascii();
    let mut model = ScorerModel::new(config.model_config(tokenizer.vocab_size()), tokenizer, derive_seed(seed, "init"))?;
    let mut rng = rng_for(seed, "batches");
    let dropout_seed = derive_seed(seed, "dropout");
    let schedule = config.schedule();
    let mut adam = AdamState::new();
    let mut last = f64::NAN;
    for step in 1..=config.steps {
        model.params_mut().zero_grad();
        let mut total = 0.0;
        for b in 0..config.batch {
            let task = &tasks[rng.gen_range(0..tasks.len())];
            let ex = &task.train[rng.gen_range(0..task.train.len())];
            let prompt = &task.pool.templates[rng.gen_range(0..task.pool.len())];
            let gold = ex
                .label
                .ok_or_else(|| WorkbenchError::Spec(format!("unlabeled pretraining example in {}", task.pool.task_name)))?;
            let input = prompt.render_input(ex).map_err(ScorerError::from)?;
            let targets = prompt.render_targets(ex).map_err(ScorerError::from)?;
            let key = DropoutKey {
                seed: dropout_seed,
                step: (step - 1) * config.batch as u64 + b as u64,
            };
            let mut g = Graph::training(model.params(), key);
            let score = model.score_targets(&mut g, &input, &[targets[gold].as_str()])?;
            let loss = g.scale(score, -1.0 / config.batch as f64).map_err(ScorerError::from)?;
            total += g.value(loss).item();
            let grads = g.backward(loss).map_err(ScorerError::from)?;
            model.params_mut().accumulate(&grads);
        }
        if !total.is_finite() {
            return Err(WorkbenchError::Divergence(format!(
                "non-finite pretraining loss {total} at step {step} (seed {seed})"
            )));
        }
        last = total;
        let lr = lr_at(step, &schedule);
        if lr > 0.0 {
            adam_step(model.params_mut(), &mut adam, lr, config.adam).map_err(ScorerError::from)?;
        }
    }
    Ok((model, last))
}

fn accuracies(model: &ScorerModel, tasks: &[TrainingTask]) -> Result<BTreeMap<String, f64>, WorkbenchError> {
    tasks
        .iter()
        .map(|t| Ok((t.pool.task_name.clone(), evaluate(model, &t.pool, &t.eval)?.ensemble_accuracy)))
        .collect()
}

/// Trains on every pretraining task of the suite. Attempts are rerolled with
/// a fresh seed until some held-out task clears the gate.
pub fn pretrain(suite_dir: &Path, config: &PretrainConfig) -> Result<(ScorerModel, PretrainManifest), WorkbenchError> {
    let clock = Instant::now();
    let suite: SuiteManifest = load_suite(suite_dir)?;
    if suite.pretraining.is_empty() {
        return Err(WorkbenchError::Spec("suite has no pretraining tasks".into()));
    }
    if config.steps == 0 || config.batch == 0 || config.max_attempts == 0 || config.warmup_steps > config.steps {
        return Err(WorkbenchError::Spec("invalid pretraining config".into()));
    }
    let names = |ts: &[super::suite::TaskSpec]| ts.iter().map(|t| t.name.clone()).collect::<Vec<_>>();
    let own = load_tasks(suite_dir, &names(&suite.pretraining), config.gate_examples, config.seed)?;
    let held = load_tasks(suite_dir, &names(&suite.held_out), config.gate_examples, config.seed)?;
    let mut attempts = Vec::new();
    let mut best: Option<(ScorerModel, usize, f64)> = None;
    for attempt in 0..config.max_attempts {
        let seed = derive_seed(config.seed, &format!("pretrain-attempt:{attempt}"));
        let (model, final_loss) = train_model(config, &own, seed)?;
        let own_task_accuracy = accuracies(&model, &own)?;
        let held_out_accuracy = accuracies(&model, &held)?;
        let mut margin = f64::NEG_INFINITY;
        for t in &held {
            let chance = 1.0 / t.pool.num_labels() as f64;
            margin = margin.max(held_out_accuracy[&t.pool.task_name] - chance - config.gate_margin);
        }
        let passed = margin > 0.0;
        attempts.push(PretrainAttempt {
            attempt,
            seed,
            final_loss,
            own_task_accuracy,
            held_out_accuracy,
            passed,
        });
        if best.as_ref().is_none_or(|b| margin > b.2) {
            best = Some((model, attempt, margin));
        }
        if passed {
            break;
        }
    }
    let (model, selected_attempt, _) = best.expect("at least one attempt");
    if !attempts[selected_attempt].passed {
        return Err(WorkbenchError::Gate(format!(
            "no held-out task above chance after {} attempts: {:?}",
            attempts.len(),
            attempts.iter().map(|a| &a.held_out_accuracy).collect::<Vec<_>>()
        )));
    }
    let bytes = crate::scorer::model_to_bytes(&model)?;
    let manifest = PretrainManifest {
        config: config.clone(),
        suite_seed: suite.master_seed,
        attempts,
        selected_attempt,
        checkpoint_sha256: crate::scorer::sha256_hex(&bytes),
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
    };
    Ok((model, manifest))
}

/// Manifest path written next to a checkpoint.
pub fn manifest_path(checkpoint: &Path) -> std::path::PathBuf {
    checkpoint.with_extension("manifest.json")
}

pub fn pretrain_to(suite_dir: &Path, config: &PretrainConfig, out: &Path) -> Result<PretrainManifest, WorkbenchError> {
    let (model, manifest) = pretrain(suite_dir, config)?;
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_model(&model, out)?;
    std::fs::write(manifest_path(out), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}
