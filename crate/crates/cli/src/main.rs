//! `swarm`: suite generation, pretraining, adaptation, evaluation and the
//! experiment drivers built on swarm-core.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use swarm_core::agreement::{fleiss_kappa, read_prediction_dump, write_prediction_dump};
use swarm_core::distill::{Mode, TrainConfig};
use swarm_core::evalsuite::{compare, delta_csv, evaluate_detailed, EvalReport};
use swarm_core::scorer::{load_model, ScorerModel};
use swarm_core::workbench::{
    ablation_csv, adapt_task, default_full_finetune_config, generate_suite, pretrain_to, run_ablation, run_collapse,
    run_pipeline, subsample, AdaptOptions, PipelineConfig, PretrainConfig, Source, SuiteConfig, SuiteManifest, TaskDir,
};

#[derive(Parser)]
#[command(name = "swarm", version, about = "Prompt-consistency training on a micro scoring model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic task suite.
    GenSuite(GenSuiteArgs),
    /// Pretrain the base scorer on the suite's pretraining tasks.
    Pretrain(PretrainArgs),
    /// Adapt a base checkpoint on unlabeled inputs of one task.
    Adapt(AdaptArgs),
    /// Evaluate a checkpoint on a task's prompt pool.
    Eval(EvalArgs),
    /// Fleiss' kappa of a prediction dump.
    Kappa(KappaArgs),
    /// Delta table of run reports against a baseline report.
    Report(ReportArgs),
    /// Generate, pretrain, adapt and evaluate end to end.
    Pipeline(PipelineArgs),
    /// Prompt-count and example-count ablations.
    Ablate(AblateArgs),
    /// Full fine-tuning without selection against adapters with selection.
    Collapse(CollapseArgs),
}

/// Fields set on the command line win over the config file.
trait Overlay: DeserializeOwned + Default {
    fn config_path(&self) -> Option<&Path>;
    fn overlay(self, file: Self) -> Self;

    fn resolve(self) -> Result<Self> {
        match self.config_path().map(Path::to_path_buf) {
            Some(path) => {
                let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display()))?;
                let file: Self =
                    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
                Ok(self.overlay(file))
            }
            None => Ok(self),
        }
    }
}

macro_rules! overlay {
    ($ty:ty { $($field:ident),* } $(flags { $($flag:ident),* })? $(nested { $($nested:ident),* })?) => {
        impl Overlay for $ty {
            fn config_path(&self) -> Option<&Path> {
                self.config.as_deref()
            }

            fn overlay(self, file: Self) -> Self {
                Self {
                    config: self.config,
                    $($field: self.$field.or(file.$field),)*
                    $($($flag: self.$flag || file.$flag,)*)?
                    $($($nested: self.$nested.or(file.$nested),)*)?
                }
            }
        }
    };
}

fn need<T>(value: Option<T>, name: &str) -> Result<T> {
    value.ok_or_else(|| anyhow!("missing required option --{name} (flag or config file)"))
}

/// Comma-separated seeds, e.g. `1,2,3`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(transparent)]
struct SeedList(Vec<u64>);

impl std::str::FromStr for SeedList {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split(',')
            .map(|p| p.trim().parse::<u64>().map_err(|e| format!("{p:?}: {e}")))
            .collect::<Result<_, _>>()
            .map(SeedList)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Args, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenSuiteArgs {
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Suite settings; overridden by flags.
    #[arg(skip)]
    suite: Option<SuiteConfig>,
    /// JSON config file.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}
overlay!(GenSuiteArgs { seed, out } nested { suite });

fn gen_suite(args: GenSuiteArgs) -> Result<serde_json::Value> {
    let args = args.resolve()?;
    let out = need(args.out, "out")?;
    let manifest = SuiteManifest::new(need(args.seed, "seed")?, args.suite.unwrap_or_default());
    generate_suite(&manifest, &out)?;
    Ok(serde_json::json!({
        "suite": out,
        "master_seed": manifest.master_seed,
        "pretraining": manifest.pretraining.iter().map(|t| &t.name).collect::<Vec<_>>(),
        "held_out": manifest.held_out.iter().map(|t| &t.name).collect::<Vec<_>>(),
    }))
}

#[derive(Args, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PretrainArgs {
    #[arg(long)]
    suite: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(skip)]
    pretrain: Option<PretrainConfig>,
    /// JSON config file.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}
overlay!(PretrainArgs { suite, out, seed, steps } nested { pretrain });

fn pretrain_cmd(args: PretrainArgs) -> Result<serde_json::Value> {
    let args = args.resolve()?;
    let mut config = args.pretrain.unwrap_or_default();
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(s) = args.steps {
        config.steps = s;
    }
    let out = need(args.out, "out")?;
    let manifest = pretrain_to(&need(args.suite, "suite")?, &config, &out)?;
    Ok(serde_json::to_value(&manifest)?)
}

#[derive(Args, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AdaptArgs {
    /// Base model checkpoint.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Task directory of a generated suite.
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    source: Option<Source>,
    #[arg(long)]
    prompts_subset: Option<usize>,
    #[arg(long)]
    examples_subset: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Train every weight instead of adapters.
    #[arg(long)]
    full_finetune: bool,
    /// Keep the final checkpoint instead of the kappa-selected one.
    #[arg(long)]
    no_select: bool,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(skip)]
    train: Option<TrainConfig>,
    /// JSON config file.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}
overlay!(AdaptArgs { base, task, mode, source, prompts_subset, examples_subset, seed, out, max_steps, lr }
    flags { full_finetune, no_select } nested { train });

fn adapt_cmd(args: AdaptArgs) -> Result<serde_json::Value> {
    let args = args.resolve()?;
    let mut train = args.train.unwrap_or_else(|| AdaptOptions::default().train);
    if let Some(m) = args.mode {
        train.mode = m;
    }
    if let Some(s) = args.seed {
        train.seed = s;
    }
    if let Some(s) = args.max_steps {
        train.max_steps = s;
        train.warmup_steps = train.warmup_steps.min(s);
    }
    if let Some(lr) = args.lr {
        train.peak_lr = lr;
    }
    train.full_finetune |= args.full_finetune;
    if args.no_select {
        train.select = false;
    }
    let options = AdaptOptions {
        source: args.source.unwrap_or(Source::Train),
        prompts_subset: args.prompts_subset,
        examples_subset: args.examples_subset,
        train,
    };
    let base = load_model(need(args.base, "base")?)?;
    let task = TaskDir::new(need(args.task, "task")?);
    let out = need(args.out, "out")?;
    let run = adapt_task(&base, &task, &options)?;
    run.write_to(&out)?;
    write_json(&out.join("options.json"), &options)?;
    let selected = run.selected_record();
    Ok(serde_json::json!({
        "run": out,
        "selected_step": run.selected_step,
        "selected_kappa": selected.kappa,
        "selected_collapsed": selected.collapsed,
        "final_step": run.final_step(),
        "checkpoints": run.checkpoints,
    }))
}

#[derive(Args, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalArgs {
    /// Model checkpoint, or an adapter checkpoint together with --base.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Base model for adapter checkpoints.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Task directory of a generated suite.
    #[arg(long)]
    task: Option<PathBuf>,
    /// Split name inside the task directory.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    limit: Option<usize>,
    /// Report path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional per-prompt prediction dump (JSONL).
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// JSON config file.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}
overlay!(EvalArgs { ckpt, base, task, split, limit, out, predictions });

fn load_checkpoint(ckpt: &Path, base: Option<&Path>) -> Result<ScorerModel> {
    match base {
        Some(base) => {
            let mut model = load_model(base)?;
            model.load_adapters(ckpt)?;
            model.merge_adapters()?;
            Ok(model)
        }
        None => Ok(load_model(ckpt)?),
    }
}

fn eval_cmd(args: EvalArgs) -> Result<serde_json::Value> {
    let args = args.resolve()?;
    let model = load_checkpoint(&need(args.ckpt, "ckpt")?, args.base.as_deref())?;
    let task = TaskDir::new(need(args.task, "task")?);
    let data = task.split(args.split.as_deref().unwrap_or("eval"))?;
    let data = match args.limit {
        Some(n) => subsample(&data, n, 0, "eval-limit"),
        None => data,
    };
    let evaluation = evaluate_detailed(&model, &task.pool()?, &data)?;
    write_json(&need(args.out, "out")?, &evaluation.report)?;
    if let Some(path) = &args.predictions {
        write_prediction_dump(path, &evaluation.predictions)?;
    }
    Ok(serde_json::to_value(&evaluation.report)?)
}

#[derive(Args, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct KappaArgs {
    /// JSONL dump with one `{example_id, predictions}` record per line.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Number of labels; defaults to the largest label seen plus one.
    #[arg(long)]
    labels: Option<usize>,
    /// JSON config file.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}
overlay!(KappaArgs { predictions, labels });

fn kappa_cmd(args: KappaArgs) -> Result<serde_json::Value> {
    let args = args.resolve()?;
    let records = read_prediction_dump(&need(args.predictions, "predictions")?)?;
    let rows: Vec<Vec<usize>> = records.into_iter().map(|r| r.predictions).collect();
    let seen = rows.iter().flatten().max().map_or(1, |m| m + 1);
    let labels = args.labels.unwrap_or(seen.max(2));
    Ok(serde_json::to_value(fleiss_kappa(&rows, labels)?)?)
}

#[derive(Args, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ReportArgs {
    /// Baseline evaluation report.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Evaluation reports of runs (typically one per seed).
    #[arg(long, num_args = 1..)]
    runs: Option<Vec<PathBuf>>,
    /// CSV output; the table is also printed as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON config file.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}
overlay!(ReportArgs { baseline, runs, out });

fn report_cmd(args: ReportArgs) -> Result<serde_json::Value> {
    let args = args.resolve()?;
    let baseline: EvalReport = read_json(&need(args.baseline, "baseline")?)?;
    let runs = need(args.runs, "runs")?;
    let reports = runs.iter().map(|p| read_json(p)).collect::<Result<Vec<EvalReport>>>()?;
    let rows = compare(&baseline, &reports)?;
    if let Some(out) = &args.out {
        std::fs::write(out, delta_csv(&rows)?).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(serde_json::to_value(&rows)?)
}

#[derive(Args, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PipelineArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    suite_seed: Option<u64>,
    /// Comma-separated adaptation seeds.
    #[arg(long)]
    adapt_seeds: Option<SeedList>,
    #[arg(long)]
    pretrain_steps: Option<u64>,
    #[arg(long)]
    eval_examples: Option<usize>,
    #[arg(skip)]
    pipeline: Option<PipelineConfig>,
    /// JSON config file.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}
overlay!(PipelineArgs { out, suite_seed, adapt_seeds, pretrain_steps, eval_examples } nested { pipeline });

fn pipeline_cmd(args: PipelineArgs) -> Result<serde_json::Value> {
    let args = args.resolve()?;
    let mut config = args.pipeline.unwrap_or_default();
    if let Some(s) = args.suite_seed {
        config.suite_seed = s;
    }
    if let Some(s) = args.adapt_seeds {
        config.adapt_seeds = s.0;
    }
    if let Some(s) = args.pretrain_steps {
        config.pretrain.steps = s;
        config.pretrain.warmup_steps = config.pretrain.warmup_steps.min(s);
    }
    if args.eval_examples.is_some() {
        config.eval_examples = args.eval_examples;
    }
    let summary = run_pipeline(&config, &need(args.out, "out")?)?;
    Ok(serde_json::to_value(&summary)?)
}

#[derive(Args, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AblateArgs {
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    suite: Option<PathBuf>,
    /// Held-out task names; defaults to every held-out task.
    #[arg(long, num_args = 1..)]
    tasks: Option<Vec<String>>,
    #[arg(long)]
    seeds: Option<SeedList>,
    #[arg(long)]
    eval_examples: Option<usize>,
    /// CSV output.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(skip)]
    adapt: Option<AdaptOptions>,
    /// JSON config file.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}
overlay!(AblateArgs { base, suite, tasks, seeds, eval_examples, out } nested { adapt });

fn held_out_names(suite: &Path, tasks: Option<Vec<String>>) -> Result<Vec<String>> {
    match tasks {
        Some(t) => Ok(t),
        None => Ok(swarm_core::workbench::load_suite(suite)?.held_out.into_iter().map(|t| t.name).collect()),
    }
}

fn ablate_cmd(args: AblateArgs) -> Result<serde_json::Value> {
    let args = args.resolve()?;
    let suite = need(args.suite, "suite")?;
    let base = load_model(need(args.base, "base")?)?;
    let tasks = held_out_names(&suite, args.tasks)?;
    let options = args.adapt.unwrap_or_default();
    let rows = run_ablation(&base, &suite, &tasks, &options, &args.seeds.map_or_else(|| vec![1], |s| s.0), args.eval_examples)?;
    let out = need(args.out, "out")?;
    std::fs::write(&out, ablation_csv(&rows)?).with_context(|| format!("writing {}", out.display()))?;
    Ok(serde_json::json!({ "rows": rows.len(), "out": out }))
}

#[derive(Args, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CollapseArgs {
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    suite: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    tasks: Option<Vec<String>>,
    #[arg(long)]
    seeds: Option<SeedList>,
    /// Report path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(skip)]
    adapt: Option<AdaptOptions>,
    #[arg(skip)]
    full_finetune: Option<TrainConfig>,
    /// JSON config file.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}
overlay!(CollapseArgs { base, suite, tasks, seeds, out } nested { adapt, full_finetune });

fn collapse_cmd(args: CollapseArgs) -> Result<serde_json::Value> {
    let args = args.resolve()?;
    let suite = need(args.suite, "suite")?;
    let base = load_model(need(args.base, "base")?)?;
    let tasks = held_out_names(&suite, args.tasks)?;
    let options = args.adapt.unwrap_or_default();
    let ff = args.full_finetune.unwrap_or_else(default_full_finetune_config);
    let report = run_collapse(&base, &suite, &tasks, &options, &ff, &args.seeds.map_or_else(|| vec![1, 2, 3], |s| s.0))?;
    write_json(&need(args.out, "out")?, &report)?;
    Ok(serde_json::json!({
        "any_full_finetune_collapsed": report.any_full_finetune_collapsed,
        "collapsed_with_decreasing_suffix": report.collapsed_with_decreasing_suffix,
        "adapter_selected_never_collapsed": report.adapter_selected_never_collapsed,
    }))
}

fn run(command: Command) -> Result<serde_json::Value> {
    match command {
        Command::GenSuite(a) => gen_suite(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Adapt(a) => adapt_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Kappa(a) => kappa_cmd(a),
        Command::Report(a) => report_cmd(a),
        Command::Pipeline(a) => pipeline_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Collapse(a) => collapse_cmd(a),
    }
}

fn fail(kind: &str, message: String, code: u8) -> ExitCode {
    eprintln!("{}", serde_json::json!({ "error": { "kind": kind, "message": message } }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => return fail("usage", e.to_string().trim().to_string(), 2),
    };
    match run(cli.command) {
        Ok(value) => {
            println!("{}", serde_json::to_string_pretty(&value).expect("json value serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => fail("runtime", format!("{e:#}"), 1),
    }
}
