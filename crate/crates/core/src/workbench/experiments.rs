//! End-to-end experiments over a generated suite: the main pipeline, the
//! prompt/example-count ablations and the full fine-tuning collapse run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pretrain::{pretrain_to, PretrainConfig};
use super::suite::{generate_suite, load_suite, subsample, task_dir, SuiteConfig, SuiteManifest, TaskDir};
use super::WorkbenchError;
use crate::distill::{adapt, AdaptationRun, Mode, TrainConfig};
use crate::evalsuite::{compare, delta_csv, evaluate, mean_std, EvalReport};
use crate::lora::LoraConfig;
use crate::scorer::{load_model, ScorerModel};
use crate::template::{Example, PromptPool};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Train,
    Test,
}

impl std::str::FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Source::Train),
            "test" => Ok(Source::Test),
            other => Err(format!("unknown source {other:?}, expected train or test")),
        }
    }
}

/// Everything `adapt` needs besides the base model and the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptOptions {
    pub source: Source,
    /// Number of prompts kept, spread over verbalizer sets. `None` keeps all.
    pub prompts_subset: Option<usize>,
    /// Number of unlabeled examples. `None` keeps the whole split.
    pub examples_subset: Option<usize>,
    pub train: TrainConfig,
}

impl Default for AdaptOptions {
    fn default() -> Self {
        AdaptOptions {
            source: Source::Train,
            prompts_subset: None,
            examples_subset: None,
            train: default_adapt_config(),
        }
    }
}

/// Adaptation settings sized for the synthetic suite.
pub fn default_adapt_config() -> TrainConfig {
    TrainConfig {
        peak_lr: 3e-3,
        warmup_steps: 10,
        max_steps: 100,
        grad_accum: 16,
        checkpoint_every: 10,
        lora: LoraConfig::default(),
        ..TrainConfig::default()
    }
}

/// `k` prompts taken round-robin over verbalizer sets, in pool order.
pub fn spread_subset(pool: &PromptPool, k: usize) -> PromptPool {
    let mut groups: Vec<(Vec<String>, Vec<usize>)> = Vec::new();
    for (i, t) in pool.templates.iter().enumerate() {
        match groups.iter_mut().find(|(c, _)| *c == t.choices) {
            Some((_, idx)) => idx.push(i),
            None => groups.push((t.choices.clone(), vec![i])),
        }
    }
    let mut chosen = Vec::new();
    let mut round = 0;
    while chosen.len() < k.min(pool.len()) {
        for (_, idx) in &groups {
            if let Some(&i) = idx.get(round) {
                if chosen.len() < k {
                    chosen.push(i);
                }
            }
        }
        round += 1;
    }
    chosen.sort_unstable();
    PromptPool {
        task_name: pool.task_name.clone(),
        label_set: pool.label_set.clone(),
        templates: chosen.into_iter().map(|i| pool.templates[i].clone()).collect(),
    }
}

/// Unlabeled adaptation inputs and the (possibly reduced) prompt pool.
pub fn adaptation_inputs(task: &TaskDir, options: &AdaptOptions) -> Result<(PromptPool, Vec<Example>), WorkbenchError> {
    let full = task.pool()?;
    let pool = match options.prompts_subset {
        Some(0) => return Err(WorkbenchError::Spec("prompts subset must be at least 1".into())),
        Some(k) if k > full.len() => {
            return Err(WorkbenchError::Spec(format!("prompts subset {k} exceeds pool size {}", full.len())))
        }
        Some(k) => spread_subset(&full, k),
        None => full,
    };
    let split = match options.source {
        Source::Train => "train",
        Source::Test => "eval",
    };
    let data = task.split(split)?;
    let data = match options.examples_subset {
        Some(0) => return Err(WorkbenchError::Spec("examples subset must be at least 1".into())),
        Some(n) => subsample(&data, n, options.train.seed, "examples-subset"),
        None => data,
    };
    Ok((pool, data.iter().map(Example::unlabeled).collect()))
}

pub fn adapt_task(base: &ScorerModel, task: &TaskDir, options: &AdaptOptions) -> Result<AdaptationRun, WorkbenchError> {
    let (pool, data) = adaptation_inputs(task, options)?;
    Ok(adapt(base, &pool, &data, &options.train)?)
}

/// Evaluates on the task's full prompt pool and the named split.
pub fn eval_task(model: &ScorerModel, task: &TaskDir, split: &str, limit: Option<usize>) -> Result<EvalReport, WorkbenchError> {
    let pool = task.pool()?;
    let data = task.split(split)?;
    let data = match limit {
        Some(n) => subsample(&data, n, 0, "eval-limit"),
        None => data,
    };
    Ok(evaluate(model, &pool, &data)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), WorkbenchError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub suite_seed: u64,
    pub suite: SuiteConfig,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptOptions,
    pub adapt_seeds: Vec<u64>,
    /// Evaluation examples per held-out task; `None` uses the whole split.
    pub eval_examples: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            suite_seed: 2022,
            suite: SuiteConfig::default(),
            pretrain: PretrainConfig::default(),
            adapt: AdaptOptions {
                examples_subset: Some(256),
                ..AdaptOptions::default()
            },
            adapt_seeds: vec![1, 2, 3],
            eval_examples: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub ensemble_accuracy: Vec<f64>,
    pub mean_ensemble_accuracy: f64,
    pub std_ensemble_accuracy: f64,
    pub median_accuracy: Vec<f64>,
    pub selected_steps: Vec<u64>,
    /// Kappa on the adaptation inputs at the selected checkpoint.
    pub selected_kappa: Vec<f64>,
    pub mean_selected_kappa: f64,
    pub selected_collapsed: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: String,
    pub base_ensemble_accuracy: f64,
    pub base_median_accuracy: f64,
    /// Kappa of the base model on the adaptation inputs, averaged over seeds.
    pub base_kappa: f64,
    pub base_kappa_on_eval: Option<f64>,
    pub swarm: ModeSummary,
    pub self_distill: ModeSummary,
    pub swarm_improves_accuracy: bool,
    pub swarm_raises_kappa: bool,
    pub swarm_at_least_self: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub config: PipelineConfig,
    pub base_checkpoint_sha256: String,
    pub tasks: Vec<TaskSummary>,
    pub improved_tasks: usize,
    pub kappa_raised_on_improved: bool,
    pub swarm_at_least_self_tasks: usize,
}

pub const SUMMARY_FILE: &str = "summary.json";

fn run_mode(
    base: &ScorerModel,
    task: &TaskDir,
    out: &Path,
    config: &PipelineConfig,
    mode: Mode,
) -> Result<(ModeSummary, Vec<EvalReport>, f64), WorkbenchError> {
    let tag = match mode {
        Mode::Swarm => "swarm",
        Mode::SelfDistill => "self",
    };
    let mut reports = Vec::new();
    let mut runs = Vec::new();
    for &seed in &config.adapt_seeds {
        let mut options = config.adapt.clone();
        options.train.mode = mode;
        options.train.seed = seed;
        let run = adapt_task(base, task, &options)?;
        let dir = out.join(format!("{tag}-seed{seed}"));
        run.write_to(&dir)?;
        let report = eval_task(&run.selected_model()?, task, "eval", config.eval_examples)?;
        write_json(&dir.join("eval.json"), &report)?;
        reports.push(report);
        runs.push(run);
    }
    let acc: Vec<f64> = reports.iter().map(|r| r.ensemble_accuracy).collect();
    let kappa: Vec<f64> = runs.iter().map(|r| r.selected_record().kappa).collect();
    let (mean_acc, std_acc) = mean_std(&acc);
    let base_kappa = mean_std(&runs.iter().map(|r| r.checkpoints[0].kappa).collect::<Vec<_>>()).0;
    let summary = ModeSummary {
        mode,
        mean_ensemble_accuracy: mean_acc,
        std_ensemble_accuracy: std_acc,
        ensemble_accuracy: acc,
        median_accuracy: reports.iter().map(|r| r.median_accuracy).collect(),
        selected_steps: runs.iter().map(|r| r.selected_step).collect(),
        mean_selected_kappa: mean_std(&kappa).0,
        selected_kappa: kappa,
        selected_collapsed: runs.iter().map(|r| r.selected_record().collapsed).collect(),
    };
    Ok((summary, reports, base_kappa))
}

/// Generates the suite, pretrains the base model, then runs base evaluation,
/// swarm and self adaptation for every held-out task and adaptation seed.
///
/// Layout under `out`: `suite/`, `base.swrm`, `base.manifest.json`,
/// `<task>/base_eval.json`, `<task>/{swarm,self}-seed<s>/`,
/// `<task>/delta.csv` and `summary.json`.
pub fn run_pipeline(config: &PipelineConfig, out: &Path) -> Result<PipelineSummary, WorkbenchError> {
    std::fs::create_dir_all(out)?;
    write_json(&out.join("pipeline_config.json"), config)?;
    let suite_dir = out.join("suite");
    let manifest = SuiteManifest::new(config.suite_seed, config.suite.clone());
    generate_suite(&manifest, &suite_dir)?;
    let base_path = out.join("base.swrm");
    let pre = pretrain_to(&suite_dir, &config.pretrain, &base_path)?;
    let base = load_model(&base_path)?;
    run_pipeline_on(config, &suite_dir, &base, pre.checkpoint_sha256, out)
}

/// The adaptation half of [`run_pipeline`] for an existing suite and base.
pub fn run_pipeline_on(
    config: &PipelineConfig,
    suite_dir: &Path,
    base: &ScorerModel,
    base_sha: String,
    out: &Path,
) -> Result<PipelineSummary, WorkbenchError> {
    let suite = load_suite(suite_dir)?;
    let mut tasks = Vec::new();
    for spec in &suite.held_out {
        let task = task_dir(suite_dir, &spec.name);
        let task_out = out.join(&spec.name);
        let base_report = eval_task(base, &task, "eval", config.eval_examples)?;
        write_json(&task_out.join("base_eval.json"), &base_report)?;
        let (swarm, swarm_reports, base_kappa) = run_mode(base, &task, &task_out, config, Mode::Swarm)?;
        let (self_distill, self_reports, _) = run_mode(base, &task, &task_out, config, Mode::SelfDistill)?;
        let mut rows = compare(&base_report, &swarm_reports)?;
        for r in &mut rows {
            r.metric = format!("swarm:{}", r.metric);
        }
        let mut self_rows = compare(&base_report, &self_reports)?;
        for r in &mut self_rows {
            r.metric = format!("self:{}", r.metric);
        }
        rows.extend(self_rows);
        std::fs::write(task_out.join("delta.csv"), delta_csv(&rows)?)?;
        tasks.push(TaskSummary {
            task: spec.name.clone(),
            base_ensemble_accuracy: base_report.ensemble_accuracy,
            base_median_accuracy: base_report.median_accuracy,
            base_kappa,
            base_kappa_on_eval: base_report.kappa_on_eval,
            swarm_improves_accuracy: swarm.mean_ensemble_accuracy > base_report.ensemble_accuracy,
            swarm_raises_kappa: swarm.mean_selected_kappa > base_kappa,
            swarm_at_least_self: swarm.mean_ensemble_accuracy >= self_distill.mean_ensemble_accuracy,
            swarm,
            self_distill,
        });
    }
    let improved: Vec<&TaskSummary> = tasks.iter().filter(|t| t.swarm_improves_accuracy).collect();
    let summary = PipelineSummary {
        config: config.clone(),
        base_checkpoint_sha256: base_sha,
        improved_tasks: improved.len(),
        kappa_raised_on_improved: !improved.is_empty() && improved.iter().all(|t| t.swarm_raises_kappa),
        swarm_at_least_self_tasks: tasks.iter().filter(|t| t.swarm_at_least_self).count(),
        tasks,
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub task: String,
    pub axis: String,
    pub size: usize,
    pub mode: Mode,
    pub seed: u64,
    pub base_ensemble_accuracy: f64,
    pub ensemble_accuracy: f64,
    pub median_accuracy: f64,
    pub selected_step: u64,
    pub selected_kappa: f64,
}

/// Prompt counts `{1 (self), 2, 4, K}` and example counts `{10, 30, 100, all}`,
/// each evaluated on the task's full prompt pool.
pub fn run_ablation(
    base: &ScorerModel,
    suite_dir: &Path,
    tasks: &[String],
    options: &AdaptOptions,
    seeds: &[u64],
    eval_examples: Option<usize>,
) -> Result<Vec<AblationRow>, WorkbenchError> {
    let mut rows = Vec::new();
    for name in tasks {
        let task = task_dir(suite_dir, name);
        let k = task.pool()?.len();
        let all = task.split(match options.source {
            Source::Train => "train",
            Source::Test => "eval",
        })?;
        let base_acc = eval_task(base, &task, "eval", eval_examples)?.ensemble_accuracy;
        let mut prompt_sizes = vec![1, 2, 4, k];
        prompt_sizes.dedup();
        let example_sizes = [10, 30, 100, all.len()];
        let mut cases: Vec<(&str, usize, AdaptOptions)> = Vec::new();
        for &p in &prompt_sizes {
            let mut o = options.clone();
            o.prompts_subset = Some(p);
            o.train.mode = if p == 1 { Mode::SelfDistill } else { Mode::Swarm };
            cases.push(("prompts", p, o));
        }
        for &n in &example_sizes {
            let mut o = options.clone();
            o.examples_subset = Some(n);
            o.train.mode = Mode::Swarm;
            cases.push(("examples", n, o));
        }
        for (axis, size, o) in cases {
            for &seed in seeds {
                let mut o = o.clone();
                o.train.seed = seed;
                let run = adapt_task(base, &task, &o)?;
                let report = eval_task(&run.selected_model()?, &task, "eval", eval_examples)?;
                rows.push(AblationRow {
                    task: name.clone(),
                    axis: axis.into(),
                    size,
                    mode: o.train.mode,
                    seed,
                    base_ensemble_accuracy: base_acc,
                    ensemble_accuracy: report.ensemble_accuracy,
                    median_accuracy: report.median_accuracy,
                    selected_step: run.selected_step,
                    selected_kappa: run.selected_record().kappa,
                });
            }
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<String, WorkbenchError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| WorkbenchError::Spec(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseRun {
    pub task: String,
    pub seed: u64,
    pub full_finetune: bool,
    pub select: bool,
    pub kappa_trajectory: Vec<(u64, f64)>,
    pub final_collapsed: bool,
    pub final_majority_share: f64,
    /// Whether the trajectory ends with a strictly decreasing stretch of at
    /// least two checkpoints.
    pub final_suffix_decreasing: bool,
    pub selected_step: u64,
    pub selected_collapsed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub full_finetune_config: TrainConfig,
    pub adapter_config: TrainConfig,
    pub runs: Vec<CollapseRun>,
    pub any_full_finetune_collapsed: bool,
    pub collapsed_with_decreasing_suffix: bool,
    pub adapter_selected_never_collapsed: bool,
}

fn collapse_run(task: &str, seed: u64, run: &AdaptationRun) -> Result<CollapseRun, WorkbenchError> {
    let last = run.checkpoints.last().expect("step 0 is recorded");
    let select_index = run.trajectory.select_index()?;
    Ok(CollapseRun {
        task: task.into(),
        seed,
        full_finetune: run.config.full_finetune,
        select: run.config.select,
        kappa_trajectory: run.checkpoints.iter().map(|c| (c.step, c.kappa)).collect(),
        final_collapsed: last.collapsed || last.majority_share >= super::COLLAPSE_SHARE,
        final_majority_share: last.majority_share,
        final_suffix_decreasing: select_index + 1 < run.checkpoints.len(),
        selected_step: run.selected_step,
        selected_collapsed: {
            let s = run.selected_record();
            s.collapsed || s.majority_share >= super::COLLAPSE_SHARE
        },
    })
}

/// Full fine-tuning with selection disabled versus adapters with selection,
/// on the same tasks and seeds.
pub fn run_collapse(
    base: &ScorerModel,
    suite_dir: &Path,
    tasks: &[String],
    options: &AdaptOptions,
    full_finetune: &TrainConfig,
    seeds: &[u64],
) -> Result<CollapseReport, WorkbenchError> {
    let mut ff = full_finetune.clone();
    ff.full_finetune = true;
    ff.select = false;
    let mut lora = options.train.clone();
    lora.full_finetune = false;
    lora.select = true;
    let mut runs = Vec::new();
    for name in tasks {
        let task = task_dir(suite_dir, name);
        for &seed in seeds {
            for cfg in [&ff, &lora] {
                let mut o = options.clone();
                o.train = cfg.clone();
                o.train.seed = seed;
                let run = adapt_task(base, &task, &o)?;
                runs.push(collapse_run(name, seed, &run)?);
            }
        }
    }
    let ff_runs = runs.iter().filter(|r| r.full_finetune);
    Ok(CollapseReport {
        any_full_finetune_collapsed: ff_runs.clone().any(|r| r.final_collapsed),
        collapsed_with_decreasing_suffix: ff_runs.clone().any(|r| r.final_collapsed && r.final_suffix_decreasing),
        adapter_selected_never_collapsed: runs.iter().filter(|r| !r.full_finetune).all(|r| !r.selected_collapsed),
        full_finetune_config: ff,
        adapter_config: lora,
        runs,
    })
}

/// Full fine-tuning settings for the collapse experiment: the adapter
/// settings over a 60-step horizon.
pub fn default_full_finetune_config() -> TrainConfig {
    TrainConfig {
        warmup_steps: 6,
        max_steps: 60,
        full_finetune: true,
        select: false,
        ..default_adapt_config()
    }
}

/// Relative paths of files whose contents differ between two output trees.
/// JSON files are compared with every `wall_clock_seconds` field removed.
pub fn diff_output_trees(a: &Path, b: &Path) -> Result<Vec<String>, WorkbenchError> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.path());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                out.push(p.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
        Ok(())
    }
    fn strip(v: &mut serde_json::Value) {
        match v {
            serde_json::Value::Object(map) => {
                map.remove("wall_clock_seconds");
                map.values_mut().for_each(strip);
            }
            serde_json::Value::Array(items) => items.iter_mut().for_each(strip),
            _ => {}
        }
    }
    let mut fa = Vec::new();
    let mut fb = Vec::new();
    walk(a, a, &mut fa)?;
    walk(b, b, &mut fb)?;
    let mut diffs = Vec::new();
    let set_b: BTreeMap<&PathBuf, ()> = fb.iter().map(|p| (p, ())).collect();
    for p in &fb {
        if !fa.contains(p) {
            diffs.push(p.display().to_string());
        }
    }
    for p in &fa {
        if !set_b.contains_key(p) {
            diffs.push(p.display().to_string());
            continue;
        }
        let (x, y) = (std::fs::read(a.join(p))?, std::fs::read(b.join(p))?);
        let same = if p.extension().is_some_and(|e| e == "json") {
            let mut vx: serde_json::Value = serde_json::from_slice(&x)?;
            let mut vy: serde_json::Value = serde_json::from_slice(&y)?;
            strip(&mut vx);
            strip(&mut vy);
            vx == vy
        } else {
            x == y
        };
        if !same {
            diffs.push(p.display().to_string());
        }
    }
    Ok(diffs)
}
