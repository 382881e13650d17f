//! End-to-end runs of the workbench on a shrunken suite and model.

use swarm_core::distill::{Mode, TrainConfig};
use swarm_core::evalsuite::EvalReport;
use swarm_core::scorer::load_model;
use swarm_core::workbench::{
    ablation_csv, default_full_finetune_config, diff_output_trees, eval_task, load_suite, run_ablation, run_collapse,
    run_pipeline, task_dir, AdaptOptions, PipelineConfig, PretrainConfig, SuiteConfig, SUMMARY_FILE,
};

fn small_pipeline() -> PipelineConfig {
    PipelineConfig {
        suite_seed: 9,
        suite: SuiteConfig {
            pretrain_examples: 60,
            pretrain_eval_examples: 20,
            held_out_train_examples: 40,
            held_out_eval_examples: 20,
            ..SuiteConfig::default()
        },
        pretrain: PretrainConfig {
            layers: 1,
            d_model: 8,
            d_ff: 16,
            steps: 20,
            warmup_steps: 5,
            batch: 4,
            max_attempts: 2,
            gate_margin: -1.0,
            gate_examples: 10,
            ..PretrainConfig::default()
        },
        adapt: AdaptOptions {
            examples_subset: Some(12),
            train: TrainConfig {
                peak_lr: 1e-2,
                warmup_steps: 1,
                max_steps: 4,
                grad_accum: 2,
                checkpoint_every: 2,
                ..TrainConfig::default()
            },
            ..AdaptOptions::default()
        },
        adapt_seeds: vec![1, 2],
        eval_examples: Some(10),
    }
}

#[test]
fn pipeline_writes_every_report_and_reruns_identically() {
    let root = tempfile::tempdir().unwrap();
    let config = small_pipeline();
    let a = root.path().join("a");
    let summary = run_pipeline(&config, &a).unwrap();
    assert_eq!(summary.tasks.len(), 3);
    for t in &summary.tasks {
        let dir = a.join(&t.task);
        assert!(dir.join("base_eval.json").exists());
        assert!(dir.join("delta.csv").exists());
        for mode in ["swarm", "self"] {
            for seed in [1, 2] {
                let run = dir.join(format!("{mode}-seed{seed}"));
                for f in ["manifest.json", "curve.csv", "eval.json", "selected_model.swrm"] {
                    assert!(run.join(f).exists(), "{}", run.join(f).display());
                }
            }
        }
        assert_eq!(t.swarm.ensemble_accuracy.len(), 2);
        assert_eq!(t.swarm.mode, Mode::Swarm);
        assert_eq!(t.self_distill.mode, Mode::SelfDistill);
        assert!(t.base_kappa < 1.0 || t.base_kappa.is_nan());
        let delta = std::fs::read_to_string(dir.join("delta.csv")).unwrap();
        assert!(delta.lines().next().unwrap().starts_with("metric,baseline,candidate,delta"));
        assert!(delta.contains("swarm:ensemble_accuracy") && delta.contains("self:ensemble_accuracy"));
    }
    assert!(a.join(SUMMARY_FILE).exists());
    assert!(a.join("base.manifest.json").exists());

    let b = root.path().join("b");
    run_pipeline(&config, &b).unwrap();
    assert_eq!(diff_output_trees(&a, &b).unwrap(), Vec::<String>::new());
}

#[test]
fn eval_of_the_base_matches_the_recorded_report() {
    let root = tempfile::tempdir().unwrap();
    let config = PipelineConfig {
        adapt_seeds: vec![1],
        ..small_pipeline()
    };
    run_pipeline(&config, root.path()).unwrap();
    let base = load_model(root.path().join("base.swrm")).unwrap();
    let suite = root.path().join("suite");
    for spec in load_suite(&suite).unwrap().held_out {
        let recorded: EvalReport =
            serde_json::from_str(&std::fs::read_to_string(root.path().join(&spec.name).join("base_eval.json")).unwrap())
                .unwrap();
        let fresh = eval_task(&base, &task_dir(&suite, &spec.name), "eval", Some(10)).unwrap();
        assert_eq!(recorded, fresh);
    }
}

#[test]
fn ablation_and_collapse_reports_cover_every_case() {
    let root = tempfile::tempdir().unwrap();
    let config = PipelineConfig {
        adapt_seeds: vec![1],
        ..small_pipeline()
    };
    run_pipeline(&config, root.path()).unwrap();
    let base = load_model(root.path().join("base.swrm")).unwrap();
    let suite = root.path().join("suite");
    let tasks = vec!["parity-mixed".to_string()];

    let rows = run_ablation(&base, &suite, &tasks, &config.adapt, &[1], Some(10)).unwrap();
    let prompts: Vec<usize> = rows.iter().filter(|r| r.axis == "prompts").map(|r| r.size).collect();
    let examples: Vec<usize> = rows.iter().filter(|r| r.axis == "examples").map(|r| r.size).collect();
    assert_eq!(prompts, vec![1, 2, 4, 8]);
    assert_eq!(examples, vec![10, 30, 100, 40]);
    assert!(rows.iter().filter(|r| r.axis == "prompts" && r.size == 1).all(|r| r.mode == Mode::SelfDistill));
    let csv = ablation_csv(&rows).unwrap();
    assert_eq!(csv.lines().count(), rows.len() + 1);

    let ff = TrainConfig {
        max_steps: 4,
        warmup_steps: 1,
        checkpoint_every: 2,
        grad_accum: 2,
        ..default_full_finetune_config()
    };
    let report = run_collapse(&base, &suite, &tasks, &config.adapt, &ff, &[1]).unwrap();
    assert_eq!(report.runs.len(), 2);
    assert!(report.runs[0].full_finetune && !report.runs[0].select);
    assert_eq!(report.runs[0].selected_step, 4);
    assert!(!report.runs[1].full_finetune && report.runs[1].select);
    assert_eq!(report.runs[0].kappa_trajectory.len(), 3);
}
