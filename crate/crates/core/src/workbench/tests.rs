use super::*;
use crate::distill::Mode;
use crate::scorer::{ModelConfig, ScorerModel, Tokenizer};
use crate::template::Example;

fn small_config() -> SuiteConfig {
    SuiteConfig {
        pretrain_examples: 40,
        pretrain_eval_examples: 20,
        held_out_train_examples: 60,
        held_out_eval_examples: 30,
        ..SuiteConfig::default()
    }
}

fn small_suite() -> (tempfile::TempDir, SuiteManifest) {
    let dir = tempfile::tempdir().unwrap();
    let manifest = SuiteManifest::new(7, small_config());
    generate_suite(&manifest, dir.path()).unwrap();
    (dir, manifest)
}

fn tiny_model() -> ScorerModel {
    let tokenizer = Tokenizer::printable_ascii();
    let config = ModelConfig {
        vocab_size: tokenizer.vocab_size(),
        max_len: 96,
        layers: 1,
        d_model: 8,
        d_ff: 16,
        heads: 2,
    };
    ScorerModel::new(config, tokenizer, 3).unwrap()
}

#[test]
fn default_suite_is_valid() {
    let m = SuiteManifest::new(2022, SuiteConfig::default());
    m.validate().unwrap();
    assert_eq!(m.pretraining.len(), 12);
    assert_eq!(m.held_out.len(), 3);
    for t in &m.held_out {
        assert_eq!(t.prompts.len(), 8);
        assert!(t.shift.is_some());
    }
}

#[test]
fn held_out_wordings_are_unseen() {
    let m = SuiteManifest::new(1, SuiteConfig::default());
    let seen: std::collections::BTreeSet<&str> = m
        .pretraining
        .iter()
        .flat_map(|t| t.prompts.iter().map(|p| p.input_template.as_str()))
        .collect();
    for t in &m.held_out {
        for p in &t.prompts {
            assert!(!seen.contains(p.input_template.as_str()), "{}", p.input_template);
        }
    }
}

#[test]
fn overlapping_names_are_rejected() {
    let mut m = SuiteManifest::new(1, SuiteConfig::default());
    m.held_out[0].name = m.pretraining[0].name.clone();
    assert!(matches!(m.validate(), Err(WorkbenchError::Spec(_))));
}

#[test]
fn held_out_needs_two_verbalizer_sets() {
    let mut m = SuiteManifest::new(1, SuiteConfig::default());
    let choices = m.held_out[0].prompts[0].choices.clone();
    for p in &mut m.held_out[0].prompts {
        p.choices = choices.clone();
    }
    assert!(m.validate().is_err());
}

#[test]
fn generation_is_deterministic() {
    let m = SuiteManifest::new(11, small_config());
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_suite(&m, a.path()).unwrap();
    generate_suite(&m, b.path()).unwrap();
    assert!(diff_output_trees(a.path(), b.path()).unwrap().is_empty());
    let other = tempfile::tempdir().unwrap();
    generate_suite(&SuiteManifest::new(12, small_config()), other.path()).unwrap();
    assert!(!diff_output_trees(a.path(), other.path()).unwrap().is_empty());
}

#[test]
fn splits_are_disjoint_and_sized() {
    let (dir, m) = small_suite();
    for spec in m.pretraining.iter().chain(&m.held_out) {
        let t = task_dir(dir.path(), &spec.name);
        let train = t.split("train").unwrap();
        let eval = t.split("eval").unwrap();
        assert_eq!(train.len(), spec.train_examples);
        assert_eq!(eval.len(), spec.eval_examples);
        let keys: std::collections::BTreeSet<_> = train.iter().map(|e| &e.fields[&spec.field]).collect();
        assert!(eval.iter().all(|e| !keys.contains(&e.fields[&spec.field])));
        assert_eq!(t.split("eval_shift").is_ok(), spec.shift.is_some());
        assert_eq!(&t.spec().unwrap(), spec);
    }
    assert_eq!(load_suite(dir.path()).unwrap(), m);
}

#[test]
fn sentiment_keywords_decide_held_out_labels() {
    let m = SuiteManifest::new(5, SuiteConfig::default());
    let spec = m.task("sentiment-mixed").unwrap();
    let data = spec.generate().unwrap();
    let positive = ["good", "great", "lovely", "superb"];
    let negative = ["bad", "awful", "poor", "dull"];
    let mut checked = 0;
    for ex in data.train.iter().chain(&data.eval) {
        let words: Vec<&str> = ex.fields["text"].split(' ').collect();
        if words.iter().any(|w| positive.contains(w)) {
            assert_eq!(ex.label, Some(0), "{}", ex.fields["text"]);
            checked += 1;
        }
        if words.iter().any(|w| negative.contains(w)) {
            assert_eq!(ex.label, Some(1), "{}", ex.fields["text"]);
        }
    }
    assert!(checked > 100);
}

#[test]
fn pretraining_tasks_never_show_the_secondary_cue() {
    let m = SuiteManifest::new(5, SuiteConfig::default());
    let spec = m.task("sentiment-mood").unwrap();
    let data = spec.generate().unwrap();
    let rare = ["lovely", "superb", "poor", "dull"];
    for ex in &data.train {
        assert!(ex.fields["text"].split(' ').all(|w| !rare.contains(&w)));
    }
}

#[test]
fn spread_subset_covers_verbalizer_sets_in_order() {
    let m = SuiteManifest::new(1, SuiteConfig::default());
    let pool = m.held_out[0].pool().unwrap();
    let two = spread_subset(&pool, 2);
    assert_eq!(two.len(), 2);
    assert_ne!(two.templates[0].choices, two.templates[1].choices);
    let four = spread_subset(&pool, 4);
    let names: Vec<&str> = four.templates.iter().map(|t| t.name.as_str()).collect();
    let positions: Vec<usize> = names
        .iter()
        .map(|n| pool.templates.iter().position(|t| t.name == *n).unwrap())
        .collect();
    assert!(positions.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(spread_subset(&pool, 8).templates, pool.templates);
}

#[test]
fn adaptation_inputs_are_unlabeled_and_bounded() {
    let (dir, _) = small_suite();
    let task = task_dir(dir.path(), "parity-mixed");
    let options = AdaptOptions {
        examples_subset: Some(25),
        prompts_subset: Some(4),
        ..AdaptOptions::default()
    };
    let (pool, data) = adaptation_inputs(&task, &options).unwrap();
    assert_eq!(pool.len(), 4);
    assert_eq!(data.len(), 25);
    assert!(data.iter().all(|e| e.label.is_none()));
    let test = AdaptOptions {
        source: Source::Test,
        ..AdaptOptions::default()
    };
    assert_eq!(adaptation_inputs(&task, &test).unwrap().1.len(), 30);
    for bad in [Some(0), Some(9)] {
        let o = AdaptOptions {
            prompts_subset: bad,
            ..AdaptOptions::default()
        };
        assert!(adaptation_inputs(&task, &o).is_err());
    }
}

#[test]
fn swarm_rejects_a_single_prompt() {
    let (dir, _) = small_suite();
    let task = task_dir(dir.path(), "pattern-mixed");
    let mut options = AdaptOptions {
        prompts_subset: Some(1),
        examples_subset: Some(4),
        ..AdaptOptions::default()
    };
    options.train.mode = Mode::Swarm;
    assert!(adapt_task(&tiny_model(), &task, &options).is_err());
    options.train.mode = Mode::SelfDistill;
    options.train.max_steps = 2;
    options.train.warmup_steps = 1;
    options.train.grad_accum = 1;
    options.train.checkpoint_every = 1;
    let run = adapt_task(&tiny_model(), &task, &options).unwrap();
    assert_eq!(run.checkpoints.len(), 3);
}

#[test]
fn source_parses() {
    assert_eq!("train".parse::<Source>().unwrap(), Source::Train);
    assert_eq!("test".parse::<Source>().unwrap(), Source::Test);
    assert!("dev".parse::<Source>().is_err());
}

#[test]
fn subsample_is_deterministic_and_ordered() {
    let data: Vec<Example> = (0..50).map(|i| Example::new([("x", i.to_string())], Some(i % 2))).collect();
    let a = subsample(&data, 10, 4, "t");
    assert_eq!(a, subsample(&data, 10, 4, "t"));
    assert_ne!(a, subsample(&data, 10, 5, "t"));
    let idx: Vec<usize> = a.iter().map(|e| e.fields["x"].parse().unwrap()).collect();
    assert!(idx.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(subsample(&data, 80, 4, "t"), data);
}

#[test]
fn diff_ignores_wall_clock_only() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(a.path().join("x")).unwrap();
    std::fs::create_dir_all(b.path().join("x")).unwrap();
    std::fs::write(a.path().join("x/r.json"), r#"{"v": 1, "inner": [{"wall_clock_seconds": 1.5}]}"#).unwrap();
    std::fs::write(b.path().join("x/r.json"), r#"{"v": 1, "inner": [{"wall_clock_seconds": 9.0}]}"#).unwrap();
    std::fs::write(a.path().join("d.csv"), "a,b\n").unwrap();
    std::fs::write(b.path().join("d.csv"), "a,b\n").unwrap();
    assert!(diff_output_trees(a.path(), b.path()).unwrap().is_empty());
    std::fs::write(b.path().join("d.csv"), "a,c\n").unwrap();
    std::fs::write(b.path().join("extra.txt"), "").unwrap();
    let mut d = diff_output_trees(a.path(), b.path()).unwrap();
    d.sort();
    assert_eq!(d, vec!["d.csv".to_string(), "extra.txt".to_string()]);
}

#[test]
fn pretraining_is_reproducible() {
    let (dir, _) = small_suite();
    let config = PretrainConfig {
        layers: 1,
        d_model: 8,
        d_ff: 16,
        steps: 6,
        warmup_steps: 2,
        batch: 2,
        max_attempts: 1,
        gate_margin: -1.0,
        gate_examples: 10,
        ..PretrainConfig::default()
    };
    let out = tempfile::tempdir().unwrap();
    let a = pretrain_to(dir.path(), &config, &out.path().join("a.swrm")).unwrap();
    let b = pretrain_to(dir.path(), &config, &out.path().join("b.swrm")).unwrap();
    assert_eq!(a.checkpoint_sha256, b.checkpoint_sha256);
    assert_eq!(a.attempts, b.attempts);
    assert!(manifest_path(&out.path().join("a.swrm")).exists());
    let strict = PretrainConfig {
        gate_margin: 1.0,
        ..config
    };
    assert!(matches!(pretrain(dir.path(), &strict), Err(WorkbenchError::Gate(_))));
}
