use rand::SeedableRng;

use super::*;
use crate::autodiff::gradcheck::check_gradients_limited;
use crate::scorer::{model_to_bytes, ModelConfig, Tokenizer};
use crate::template::{LabelSet, PromptTemplate};

fn tiny(seed: u64) -> ScorerModel {
    let tok = Tokenizer::new("abcdefghijklmnopqrstuvwxyz ?!.");
    let config = ModelConfig {
        vocab_size: tok.vocab_size(),
        max_len: 48,
        layers: 2,
        d_model: 8,
        d_ff: 16,
        heads: 2,
    };
    ScorerModel::new(config, tok, seed).unwrap()
}

fn pool(k: usize) -> PromptPool {
    let specs = [
        ("p0", "is {t} good?", ["yes", "no"]),
        ("p1", "{t}. good or bad?", ["good", "bad"]),
        ("p2", "rate {t}", ["up", "down"]),
        ("p3", "{t}!", ["pos", "neg"]),
    ];
    let templates = specs[..k]
        .iter()
        .map(|(n, i, c)| PromptTemplate::new(n, i, c).unwrap())
        .collect();
    PromptPool::new("toy", LabelSet::new(vec!["a".into(), "b".into()]).unwrap(), templates)
}

fn examples() -> Vec<Example> {
    ["a cat", "the sun", "bad food", "nice day", "cold tea", "big dog"]
        .iter()
        .map(|t| Example::new([("t", *t)], None))
        .collect()
}

fn small_config(mode: Mode) -> TrainConfig {
    TrainConfig {
        peak_lr: 1e-2,
        warmup_steps: 2,
        max_steps: 6,
        grad_accum: 2,
        checkpoint_every: 2,
        mode,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn schedule_endpoints() {
    let c = TrainConfig::default();
    assert_eq!(lr_at(0, &c), 0.0);
    assert_eq!(lr_at(c.warmup_steps, &c), c.peak_lr);
    assert_eq!(lr_at(c.max_steps, &c), 0.0);
    assert!((lr_at(50, &c) - c.peak_lr / 2.0).abs() < 1e-15);
    let mid = c.warmup_steps + (c.max_steps - c.warmup_steps) / 2;
    assert!((lr_at(mid, &c) - c.peak_lr / 2.0).abs() < 1e-15);
}

#[test]
fn config_validation() {
    let c = TrainConfig::default();
    assert!(c.validate(1).is_err());
    let self_mode = TrainConfig {
        mode: Mode::SelfDistill,
        ..c.clone()
    };
    assert!(self_mode.validate(1).is_ok());
    let bad = TrainConfig {
        warmup_steps: 2000,
        ..c.clone()
    };
    assert!(bad.validate(4).is_err());
    let bad = TrainConfig { grad_accum: 0, ..c };
    assert!(bad.validate(4).is_err());
    assert_eq!("self".parse::<Mode>().unwrap(), Mode::SelfDistill);
    assert!("other".parse::<Mode>().is_err());
}

#[test]
fn pseudo_target_equals_label_distribution() {
    let m = tiny(1);
    let p = pool(3);
    let ex = &examples()[0];
    for i in 0..3 {
        let t = pseudo_target(&m, &p, i, ex).unwrap();
        assert_eq!(t.distribution, m.label_distribution(&p.templates[i], ex).unwrap());
        assert_eq!(t.source_prompt, i);
    }
}

#[test]
fn pair_loss_is_soft_cross_entropy_of_raw_scores() {
    let m = tiny(2);
    let p = pool(3);
    let ex = &examples()[1];
    let q = m.label_distribution(&p.templates[0], ex).unwrap().probs;
    let raw = m.label_distribution(&p.templates[2], ex).unwrap().raw_log_scores;
    let expected: f64 = -q.iter().zip(&raw).map(|(a, b)| a * b).sum::<f64>();
    let loss = pair_loss(&m, &p, 0, 2, ex).unwrap();
    assert!((loss - expected).abs() < 1e-12);
    assert!(loss >= 0.0);
}

#[test]
fn one_hot_self_target_is_nll_of_argmax() {
    let m = tiny(3);
    let p = pool(2);
    let ex = &examples()[2];
    let d = m.label_distribution(&p.templates[1], ex).unwrap();
    let mut one_hot = vec![0.0; 2];
    one_hot[d.argmax()] = 1.0;
    let target = PseudoTarget {
        distribution: LabelDistribution {
            probs: one_hot,
            raw_log_scores: d.raw_log_scores.clone(),
        },
        source_prompt: 1,
    };
    let mut g = Graph::new(m.params());
    let node = pairs_loss_node(&m, &mut g, &p, ex, &[target], &[(0, 1)], false).unwrap();
    assert!((g.value(node).item() + d.raw_log_scores[d.argmax()]).abs() < 1e-12);
}

fn gradcheck(mode_pairs: &[(usize, usize)], full: bool) {
    let mut m = tiny(4);
    if !full {
        m.attach_adapters(
            LoraConfig {
                bottleneck: 1,
                alpha: 4.0,
                dropout: 0.0,
            },
            7,
        )
        .unwrap();
        let ids: Vec<_> = m.adapters().unwrap().adapters().iter().map(|a| a.b).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for id in ids {
            for v in m.params_mut().get_mut(id).value.data_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
    }
    let p = pool(3);
    let ex = examples()[3].clone();
    let targets: Vec<PseudoTarget> = (0..3).map(|i| pseudo_target(&m, &p, i, &ex).unwrap()).collect();
    let loss = |store: &crate::autodiff::ParamStore| {
        let mut probe = m.clone();
        *probe.params_mut() = store.clone();
        let mut g = Graph::new(probe.params());
        let n = pairs_loss_node(&probe, &mut g, &p, &ex, &targets, mode_pairs, false).unwrap();
        g.value(n).item()
    };
    let grads = |store: &crate::autodiff::ParamStore| {
        let mut probe = m.clone();
        *probe.params_mut() = store.clone();
        let mut g = Graph::new(probe.params());
        let n = pairs_loss_node(&probe, &mut g, &p, &ex, &targets, mode_pairs, false).unwrap();
        g.backward(n).unwrap()
    };
    let mut store = m.params().clone();
    let report = check_gradients_limited(&mut store, 1e-5, 6, loss, grads);
    assert!(report.checked > 0);
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn swarm_pair_gradients_match_finite_differences() {
    gradcheck(&[(2, 0), (0, 1), (1, 2)], false);
}

#[test]
fn self_pair_gradients_match_finite_differences() {
    gradcheck(&[(0, 0), (1, 1), (2, 2)], false);
}

#[test]
fn full_model_gradients_match_finite_differences() {
    gradcheck(&[(1, 0)], true);
}

#[test]
fn teacher_is_severed_from_the_tape() {
    let mut m = tiny(5);
    m.attach_adapters(LoraConfig::default(), 1).unwrap();
    let p = pool(2);
    let ex = &examples()[0];
    let targets: Vec<PseudoTarget> = (0..2).map(|i| pseudo_target(&m, &p, i, ex).unwrap()).collect();
    let mut g = Graph::new(m.params());
    let n = pairs_loss_node(&m, &mut g, &p, ex, &targets, &[(1, 0)], false).unwrap();
    let grads = g.backward(n).unwrap();
    let mut g2 = Graph::new(m.params());
    let s = m.score_targets(&mut g2, "is a cat good?", &["yes", "no"]).unwrap();
    let direct = g2.soft_cross_entropy(&targets[1].distribution.probs, s).unwrap();
    let direct = g2.backward(direct).unwrap();
    for (id, g) in grads.iter() {
        assert_eq!(g, direct.get(id).unwrap());
    }
}

#[test]
fn pseudo_target_moves_after_an_update() {
    let base = tiny(6);
    let p = pool(2);
    let data = examples();
    let config = TrainConfig {
        max_steps: 3,
        warmup_steps: 1,
        checkpoint_every: 3,
        peak_lr: 0.05,
        ..small_config(Mode::Swarm)
    };
    let run = adapt(&base, &p, &data, &config).unwrap();
    let after = run.adapted_model_at(3).unwrap();
    let before = pseudo_target(&base, &p, 0, &data[0]).unwrap();
    let moved = pseudo_target(&after, &p, 0, &data[0]).unwrap();
    assert_ne!(before.distribution.probs, moved.distribution.probs);
}

#[test]
fn two_prompt_shuffle_is_fair() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let draws = 4000;
    let swaps = (0..draws)
        .filter(|_| draw_pairs(Mode::Swarm, PairPolicy::Shuffle, 2, &mut rng) == vec![(1, 0), (0, 1)])
        .count();
    let frac = swaps as f64 / draws as f64;
    assert!((frac - 0.5).abs() < 0.03, "{frac}");
    assert_eq!(
        draw_pairs(Mode::SelfDistill, PairPolicy::Shuffle, 3, &mut rng),
        vec![(0, 0), (1, 1), (2, 2)]
    );
}

#[test]
fn sampled_pairs_never_self_teach() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pairs = draw_pairs(Mode::Swarm, PairPolicy::Sampled { k: 200 }, 4, &mut rng);
    assert_eq!(pairs.len(), 200);
    assert!(pairs.iter().all(|(t, s)| t != s && *t < 4 && *s < 4));
}

#[test]
fn permutation_mean_matches_enumeration() {
    let m = tiny(7);
    let p = pool(3);
    let ex = &examples()[4];
    let targets: Vec<PseudoTarget> = (0..3).map(|i| pseudo_target(&m, &p, i, ex).unwrap()).collect();
    let loss_for = |pairs: &[(usize, usize)]| {
        let mut g = Graph::new(m.params());
        let n = pairs_loss_node(&m, &mut g, &p, ex, &targets, pairs, false).unwrap();
        g.value(n).item()
    };
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let enumerated: f64 = perms
        .iter()
        .map(|s| loss_for(&s.iter().enumerate().map(|(j, &t)| (t, j)).collect::<Vec<_>>()))
        .sum::<f64>()
        / 6.0;
    let mut all_pairs = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            all_pairs += pair_loss(&m, &p, i, j, ex).unwrap();
        }
    }
    assert!((enumerated - all_pairs / 9.0).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let draws = 3000;
    let sampled: f64 = (0..draws)
        .map(|_| loss_for(&draw_pairs(Mode::Swarm, PairPolicy::Shuffle, 3, &mut rng)))
        .sum::<f64>()
        / draws as f64;
    let spread = perms
        .iter()
        .map(|s| loss_for(&s.iter().enumerate().map(|(j, &t)| (t, j)).collect::<Vec<_>>()))
        .fold(0.0f64, |a, l| a.max((l - enumerated).abs()));
    assert!((sampled - enumerated).abs() <= spread * 0.1 + 1e-12);
}

#[test]
fn zero_steps_select_the_base() {
    let base = tiny(8);
    let p = pool(3);
    let config = TrainConfig {
        max_steps: 0,
        warmup_steps: 0,
        ..small_config(Mode::Swarm)
    };
    let run = adapt(&base, &p, &examples(), &config).unwrap();
    assert_eq!(run.selected_step, 0);
    let selected = run.selected_model().unwrap();
    for ex in examples() {
        for t in &p.templates {
            assert_eq!(
                selected.label_distribution(t, &ex).unwrap(),
                base.label_distribution(t, &ex).unwrap()
            );
        }
    }
}

#[test]
fn runs_are_deterministic_and_keep_the_base_frozen() {
    let base = tiny(9);
    let p = pool(3);
    let config = small_config(Mode::Swarm);
    let a = adapt(&base, &p, &examples(), &config).unwrap();
    let b = adapt(&base, &p, &examples(), &config).unwrap();
    assert_eq!(a.checkpoints, b.checkpoints);
    assert_eq!(a.loss_curve, b.loss_curve);
    assert_eq!(
        model_to_bytes(&a.selected_model().unwrap()).unwrap(),
        model_to_bytes(&b.selected_model().unwrap()).unwrap()
    );
    assert_eq!(a.checkpoints.iter().map(|c| c.step).collect::<Vec<_>>(), vec![0, 2, 4, 6]);
    let last = a.adapted_model_at(6).unwrap();
    let n = last.base_param_len();
    for ((_, x), (_, y)) in last.params().iter().take(n).zip(base.params().iter()) {
        assert_eq!(x.value, y.value);
    }
    assert!(a.loss_curve.iter().all(|l| l.loss.is_finite() && l.loss >= 0.0));
    let csv = a.curve_csv();
    assert!(csv.starts_with("step,loss,kappa\n0,,"));
}

#[test]
fn same_loop_for_train_and_test_pools() {
    let base = tiny(10);
    let p = pool(2);
    let config = small_config(Mode::SelfDistill);
    let data = examples();
    let a = adapt_with_kappa_pool(&base, &p, &data, &data, &config).unwrap();
    let b = adapt(&base, &p, &data, &config).unwrap();
    assert_eq!(a.checkpoints, b.checkpoints);
}

#[test]
fn full_finetune_updates_base_weights() {
    let base = tiny(11);
    let p = pool(2);
    let config = TrainConfig {
        full_finetune: true,
        select: false,
        ..small_config(Mode::Swarm)
    };
    let run = adapt(&base, &p, &examples(), &config).unwrap();
    assert_eq!(run.selected_step, 6);
    let last = run.model_at(6).unwrap();
    assert!(last.adapters().is_none());
    assert_ne!(model_to_bytes(&last).unwrap(), model_to_bytes(&base).unwrap());
}

#[test]
fn run_directory_layout() {
    let dir = tempfile::tempdir().unwrap();
    let run = adapt(&tiny(12), &pool(2), &examples(), &small_config(Mode::Swarm)).unwrap();
    run.write_to(dir.path()).unwrap();
    for f in ["manifest.json", "curve.csv", "selected_model.swrm", "adapter_step00000.swrm", "adapter_step00006.swrm"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let manifest: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.selected_step, run.selected_step);
}
