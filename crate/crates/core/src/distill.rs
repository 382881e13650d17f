//! Swarm distillation: each prompt's stop-gradient label distribution
//! supervises the raw verbalizer scores of another prompt.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agreement::{fleiss_kappa, majority_share, AgreementError, KappaTrajectory};
use crate::autodiff::{adam_step, AdamConfig, AdamState, DropoutKey, Graph, Matrix, NodeId, ParamGrads};
use crate::lora::LoraConfig;
use crate::scorer::{LabelDistribution, ScorerError, ScorerModel};
use crate::seed::{derive_seed, rng_for};
use crate::template::{Example, PromptPool};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Agreement(#[from] AgreementError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Swarm,
    #[serde(rename = "self")]
    SelfDistill,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "swarm" => Ok(Mode::Swarm),
            "self" => Ok(Mode::SelfDistill),
            other => Err(format!("unknown mode {other:?}, expected swarm or self")),
        }
    }
}

/// How teacher/student pairs are drawn for one example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PairPolicy {
    /// Student `j` is taught by prompt `σ(j)` for a uniform permutation `σ`.
    Shuffle,
    /// `k` ordered pairs drawn independently with teacher ≠ student.
    Sampled { k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub decay_power: f64,
    pub max_steps: u64,
    pub grad_accum: usize,
    pub mode: Mode,
    pub pair_policy: PairPolicy,
    pub lora: LoraConfig,
    pub full_finetune: bool,
    pub checkpoint_every: u64,
    pub select: bool,
    pub normalized_student: bool,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 3e-3,
            warmup_steps: 100,
            decay_power: 1.0,
            max_steps: 1500,
            grad_accum: 16,
            mode: Mode::Swarm,
            pair_policy: PairPolicy::Shuffle,
            lora: LoraConfig::default(),
            full_finetune: false,
            checkpoint_every: 50,
            select: true,
            normalized_student: false,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, prompts: usize) -> Result<(), DistillError> {
        let fail = |m: String| Err(DistillError::Config(m));
        if self.warmup_steps > self.max_steps {
            return fail(format!("warmup {} exceeds max_steps {}", self.warmup_steps, self.max_steps));
        }
        if self.grad_accum == 0 {
            return fail("grad_accum must be at least 1".into());
        }
        if self.checkpoint_every == 0 {
            return fail("checkpoint_every must be at least 1".into());
        }
        if !(self.peak_lr > 0.0) || !self.peak_lr.is_finite() || !(self.decay_power > 0.0) {
            return fail(format!("invalid schedule lr={} power={}", self.peak_lr, self.decay_power));
        }
        if prompts == 0 {
            return fail("empty prompt pool".into());
        }
        if self.mode == Mode::Swarm && prompts < 2 {
            return fail(format!("swarm mode needs at least 2 prompts, got {prompts}"));
        }
        if let PairPolicy::Sampled { k } = self.pair_policy {
            if k == 0 {
                return fail("sampled pair policy needs k >= 1".into());
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to the peak, then polynomial decay to 0 at `max_steps`.
pub fn lr_at(step: u64, config: &TrainConfig) -> f64 {
    if step >= config.max_steps {
        return 0.0;
    }
    if step < config.warmup_steps {
        return config.peak_lr * step as f64 / config.warmup_steps as f64;
    }
    let span = (config.max_steps - config.warmup_steps) as f64;
    let remaining = (config.max_steps - step) as f64 / span;
    config.peak_lr * remaining.powf(config.decay_power)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoTarget {
    pub distribution: LabelDistribution,
    pub source_prompt: usize,
}

/// Teacher distribution of prompt `prompt`, evaluated without dropout and
/// used only as a constant.
pub fn pseudo_target(
    model: &ScorerModel,
    pool: &PromptPool,
    prompt: usize,
    example: &Example,
) -> Result<PseudoTarget, DistillError> {
    Ok(PseudoTarget {
        distribution: model.label_distribution(&pool.templates[prompt], example)?,
        source_prompt: prompt,
    })
}

/// Draws `(teacher, student)` pairs for one example.
pub fn draw_pairs(mode: Mode, policy: PairPolicy, prompts: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    match (mode, policy) {
        (Mode::SelfDistill, _) => (0..prompts).map(|j| (j, j)).collect(),
        (Mode::Swarm, PairPolicy::Shuffle) => {
            let mut sigma: Vec<usize> = (0..prompts).collect();
            sigma.shuffle(rng);
            sigma.into_iter().enumerate().map(|(j, t)| (t, j)).collect()
        }
        (Mode::Swarm, PairPolicy::Sampled { k }) => (0..k)
            .map(|_| {
                let student = rng.gen_range(0..prompts);
                let offset = rng.gen_range(1..prompts);
                ((student + offset) % prompts, student)
            })
            .collect(),
    }
}

/// Records the mean pair loss over `pairs` on `g`. Each distinct student view
/// is scored once.
pub fn pairs_loss_node(
    model: &ScorerModel,
    g: &mut Graph,
    pool: &PromptPool,
    example: &Example,
    targets: &[PseudoTarget],
    pairs: &[(usize, usize)],
    normalized_student: bool,
) -> Result<NodeId, DistillError> {
    let mut students: BTreeMap<usize, NodeId> = BTreeMap::new();
    let mut terms = Vec::with_capacity(pairs.len());
    for &(teacher, student) in pairs {
        let node = match students.get(&student) {
            Some(&n) => n,
            None => {
                let t = &pool.templates[student];
                let input = t.render_input(example).map_err(ScorerError::from)?;
                let outs = t.render_targets(example).map_err(ScorerError::from)?;
                let refs: Vec<&str> = outs.iter().map(String::as_str).collect();
                let mut n = model.score_targets(g, &input, &refs)?;
                if normalized_student {
                    n = g.row_log_softmax(n).map_err(ScorerError::from)?;
                }
                students.insert(student, n);
                n
            }
        };
        let q = &targets[teacher].distribution.probs;
        terms.push(g.soft_cross_entropy(q, node).map_err(ScorerError::from)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t).map_err(ScorerError::from)?;
    }
    Ok(g.scale(total, 1.0 / pairs.len() as f64).map_err(ScorerError::from)?)
}

/// `−Σ_y q̂_teacher(y) · log p(verbalizer_student(y) | input_student)`.
pub fn pair_loss(
    model: &ScorerModel,
    pool: &PromptPool,
    teacher: usize,
    student: usize,
    example: &Example,
) -> Result<f64, DistillError> {
    let target = pseudo_target(model, pool, teacher, example)?;
    let mut g = Graph::new(model.params());
    let node = pairs_loss_node(model, &mut g, pool, example, &[target], &[(0, student)], false)?;
    Ok(g.value(node).item())
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub grads: ParamGrads,
    pub pairs: Vec<(usize, usize)>,
}

/// Computes all teacher distributions for `example`, draws pairs and returns
/// the mean pair loss with its gradient.
pub fn example_step(
    model: &ScorerModel,
    pool: &PromptPool,
    example: &Example,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    dropout: DropoutKey,
) -> Result<StepOutput, DistillError> {
    let targets: Vec<PseudoTarget> = (0..pool.len())
        .map(|i| pseudo_target(model, pool, i, example))
        .collect::<Result<_, _>>()?;
    let pairs = draw_pairs(config.mode, config.pair_policy, pool.len(), rng);
    let mut g = Graph::training(model.params(), dropout);
    let loss = pairs_loss_node(model, &mut g, pool, example, &targets, &pairs, config.normalized_student)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss).map_err(ScorerError::from)?;
    Ok(StepOutput {
        loss: value,
        grads,
        pairs,
    })
}

/// `N x K` argmax predictions of every prompt on every example.
pub fn prompt_predictions(
    model: &ScorerModel,
    pool: &PromptPool,
    examples: &[Example],
) -> Result<Vec<Vec<usize>>, ScorerError> {
    examples
        .par_iter()
        .map(|ex| pool.templates.iter().map(|t| model.predict(t, ex)).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub step: u64,
    pub kappa: f64,
    pub collapsed: bool,
    pub majority_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Adapter-mode runs keep adapter snapshots; full fine-tuning keeps every
/// weight.
#[derive(Debug, Clone)]
pub struct AdaptationRun {
    pub config: TrainConfig,
    pub checkpoints: Vec<CheckpointRecord>,
    pub trajectory: KappaTrajectory,
    pub selected_step: u64,
    pub loss_curve: Vec<LossPoint>,
    pub wall_clock_seconds: f64,
    start: ScorerModel,
    snapshots: Vec<Vec<(String, Matrix)>>,
}

impl AdaptationRun {
    fn index_of(&self, step: u64) -> Result<usize, DistillError> {
        self.checkpoints
            .iter()
            .position(|c| c.step == step)
            .ok_or_else(|| DistillError::Config(format!("no checkpoint at step {step}")))
    }

    /// The model at a recorded step, with adapters still attached.
    pub fn adapted_model_at(&self, step: u64) -> Result<ScorerModel, DistillError> {
        let mut m = self.start.clone();
        m.params_mut()
            .restore(&self.snapshots[self.index_of(step)?])
            .map_err(ScorerError::from)?;
        Ok(m)
    }

    /// The model at a recorded step with adapters folded in.
    pub fn model_at(&self, step: u64) -> Result<ScorerModel, DistillError> {
        let mut m = self.adapted_model_at(step)?;
        if m.adapters().is_some() {
            m.merge_adapters()?;
        }
        Ok(m)
    }

    pub fn selected_model(&self) -> Result<ScorerModel, DistillError> {
        self.model_at(self.selected_step)
    }

    pub fn final_step(&self) -> u64 {
        self.checkpoints.last().map_or(0, |c| c.step)
    }

    pub fn selected_record(&self) -> &CheckpointRecord {
        &self.checkpoints[self.index_of(self.selected_step).expect("selected step is recorded")]
    }

    pub fn manifest(&self) -> RunManifest {
        RunManifest {
            config: self.config.clone(),
            checkpoint_steps: self.checkpoints.iter().map(|c| c.step).collect(),
            kappa_trajectory: self.trajectory.clone(),
            checkpoints: self.checkpoints.clone(),
            selected_step: self.selected_step,
            wall_clock_seconds: self.wall_clock_seconds,
        }
    }

    /// `step,loss,kappa` rows; kappa is blank between checkpoints and the
    /// step-0 row has no loss.
    pub fn curve_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "loss", "kappa"]).expect("in-memory write");
        let kappa: BTreeMap<u64, f64> = self.checkpoints.iter().map(|c| (c.step, c.kappa)).collect();
        let mut steps: Vec<u64> = self.loss_curve.iter().map(|l| l.step).chain(kappa.keys().copied()).collect();
        steps.sort_unstable();
        steps.dedup();
        let loss: BTreeMap<u64, f64> = self.loss_curve.iter().map(|l| (l.step, l.loss)).collect();
        for s in steps {
            let l = loss.get(&s).map_or(String::new(), |v| v.to_string());
            let k = kappa.get(&s).map_or(String::new(), |v| v.to_string());
            w.write_record([s.to_string(), l, k]).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    /// Writes `manifest.json`, `curve.csv`, one checkpoint per recorded step
    /// and `selected_model.swrm`.
    pub fn write_to(&self, dir: &Path) -> Result<(), DistillError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest())?)?;
        std::fs::write(dir.join("curve.csv"), self.curve_csv())?;
        for c in &self.checkpoints {
            let m = self.adapted_model_at(c.step)?;
            if m.adapters().is_some() {
                m.save_adapters(dir.join(format!("adapter_step{:05}.swrm", c.step)))?;
            } else {
                crate::scorer::save_model(&m, dir.join(format!("model_step{:05}.swrm", c.step)))?;
            }
        }
        crate::scorer::save_model(&self.selected_model()?, dir.join("selected_model.swrm"))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub checkpoint_steps: Vec<u64>,
    pub kappa_trajectory: KappaTrajectory,
    pub checkpoints: Vec<CheckpointRecord>,
    pub selected_step: u64,
    pub wall_clock_seconds: f64,
}

fn record(
    model: &ScorerModel,
    pool: &PromptPool,
    examples: &[Example],
    step: u64,
) -> Result<CheckpointRecord, DistillError> {
    let preds = prompt_predictions(model, pool, examples)?;
    let labels = pool.num_labels();
    let (kappa, collapsed) = if pool.len() >= 2 {
        let r = fleiss_kappa(&preds, labels)?;
        (r.kappa, r.collapsed)
    } else {
        (f64::NAN, false)
    };
    Ok(CheckpointRecord {
        step,
        kappa,
        collapsed,
        majority_share: majority_share(&preds, labels),
    })
}

/// Adapts `base` on unlabeled `data`. Kappa for selection is measured on
/// `data` itself with the full pool.
pub fn adapt(
    base: &ScorerModel,
    pool: &PromptPool,
    data: &[Example],
    config: &TrainConfig,
) -> Result<AdaptationRun, DistillError> {
    adapt_with_kappa_pool(base, pool, data, data, config)
}

/// Like [`adapt`] but measures kappa on `kappa_pool`.
pub fn adapt_with_kappa_pool(
    base: &ScorerModel,
    pool: &PromptPool,
    data: &[Example],
    kappa_pool: &[Example],
    config: &TrainConfig,
) -> Result<AdaptationRun, DistillError> {
    config.validate(pool.len())?;
    if data.is_empty() || kappa_pool.is_empty() {
        return Err(DistillError::Config("empty adaptation data".into()));
    }
    let clock = Instant::now();
    let mut model = base.clone();
    if model.adapters().is_some() {
        return Err(DistillError::Config("base model already has adapters".into()));
    }
    if config.full_finetune {
        model.params_mut().set_all_trainable(true);
    } else {
        model.attach_adapters(config.lora, derive_seed(config.seed, "lora-init"))?;
    }
    let start = model.clone();
    let mut order_rng = rng_for(config.seed, "example-order");
    let mut pair_rng = rng_for(config.seed, "pairs");
    let dropout_seed = derive_seed(config.seed, "dropout");
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut adam = AdamState::new();
    let mut checkpoints = vec![record(&model, pool, kappa_pool, 0)?];
    let mut snapshots = vec![model.params().snapshot_trainable()];
    let mut loss_curve = Vec::with_capacity(config.max_steps as usize);
    let mut seen: u64 = 0;
    for step in 1..=config.max_steps {
        model.params_mut().zero_grad();
        let mut total = 0.0;
        for _ in 0..config.grad_accum {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            let ex = &data[order[cursor]];
            cursor += 1;
            let key = DropoutKey {
                seed: dropout_seed,
                step: seen,
            };
            seen += 1;
            let out = example_step(&model, pool, ex, config, &mut pair_rng, key)?;
            total += out.loss;
            let mut grads = out.grads;
            grads.scale(1.0 / config.grad_accum as f64);
            model.params_mut().accumulate(&grads);
        }
        let lr = lr_at(step, config);
        if lr > 0.0 {
            adam_step(model.params_mut(), &mut adam, lr, config.adam).map_err(ScorerError::from)?;
        }
        loss_curve.push(LossPoint {
            step,
            loss: total / config.grad_accum as f64,
            lr,
        });
        if step % config.checkpoint_every == 0 || step == config.max_steps {
            checkpoints.push(record(&model, pool, kappa_pool, step)?);
            snapshots.push(model.params().snapshot_trainable());
        }
    }
    let trajectory = KappaTrajectory::from_points(
        checkpoints
            .iter()
            .map(|c| crate::agreement::KappaPoint {
                step: c.step,
                kappa: c.kappa,
            })
            .collect(),
    )?;
    let selected_step = if config.select && pool.len() >= 2 {
        trajectory.select_checkpoint()?
    } else {
        checkpoints.last().expect("step 0 is recorded").step
    };
    Ok(AdaptationRun {
        config: config.clone(),
        checkpoints,
        trajectory,
        selected_step,
        loss_curve,
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
        start,
        snapshots,
    })
}

#[cfg(test)]
mod tests;
