//! Synthetic prompted classification tasks.
//!
//! Each family has a primary and a secondary cue group. Pretraining tasks are
//! decided by the primary cue only, and examples without it get a label from
//! `no_cue_label_probs`. Held-out tasks use unseen wordings of every style and
//! decide labels with either cue, sometimes with both present.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::WorkbenchError;
use crate::seed::{derive_seed, rng_for};
use crate::template::{read_dataset, write_dataset, Example, LabelSet, PromptPool, PromptSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    KeywordSentiment,
    ParityOverSymbols,
    PatternMembership,
}

impl GeneratorKind {
    pub const ALL: [GeneratorKind; 3] = [
        GeneratorKind::KeywordSentiment,
        GeneratorKind::ParityOverSymbols,
        GeneratorKind::PatternMembership,
    ];

    pub fn slug(self) -> &'static str {
        match self {
            GeneratorKind::KeywordSentiment => "sentiment",
            GeneratorKind::ParityOverSymbols => "parity",
            GeneratorKind::PatternMembership => "pattern",
        }
    }
}

/// `cues[label]` lists alternative token sequences; every token of the chosen
/// sequence is inserted at a random position among the filler tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CueGroup {
    pub name: String,
    pub cues: Vec<Vec<Vec<String>>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub filler: Vec<String>,
    pub joiner: String,
    pub groups: Vec<CueGroup>,
}

/// A cue whose label agrees with the gold label only with probability
/// `agreement`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondaryCue {
    pub group: usize,
    pub presence: f64,
    pub agreement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shift {
    /// Replacement filler tokens for the shifted evaluation split.
    pub filler: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: GeneratorKind,
    pub labels: Vec<String>,
    pub field: String,
    pub vocabulary: Vocabulary,
    /// Groups whose cue determines the label; one is drawn per example
    /// according to `group_weights`.
    pub label_groups: Vec<usize>,
    pub group_weights: Vec<f64>,
    pub distractor_groups: Vec<usize>,
    pub distractor_rate: f64,
    /// Probability that an example has no deciding cue.
    pub no_cue_rate: f64,
    /// Noisy cue used for examples without a deciding cue.
    pub secondary: Option<SecondaryCue>,
    /// Probability that a cued example carries agreeing cues from every
    /// label group.
    pub joint_cue_rate: f64,
    /// Label distribution of examples without a deciding cue.
    pub no_cue_label_probs: Vec<f64>,
    pub label_noise: f64,
    pub min_filler: usize,
    pub max_filler: usize,
    pub train_examples: usize,
    pub eval_examples: usize,
    pub shift: Option<Shift>,
    pub seed: u64,
    pub prompts: Vec<PromptSpec>,
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

fn cue_group(name: &str, per_label: &[&[&[&str]]]) -> CueGroup {
    CueGroup {
        name: name.into(),
        cues: per_label
            .iter()
            .map(|variants| variants.iter().map(|v| words(v)).collect())
            .collect(),
    }
}

struct Family {
    labels: [&'static str; 2],
    field: &'static str,
    vocabulary: Vocabulary,
    shift_filler: Vec<String>,
    min_filler: usize,
    max_filler: usize,
    /// `(marker, verbalizers)` per prompt style.
    styles: [(&'static str, [&'static str; 2]); 4],
}

fn family(kind: GeneratorKind) -> Family {
    match kind {
        GeneratorKind::KeywordSentiment => Family {
            labels: ["positive", "negative"],
            field: "text",
            vocabulary: Vocabulary {
                filler: words(&[
                    "the", "a", "movie", "food", "day", "was", "it", "is", "very", "so", "this", "my", "car", "show",
                    "book", "place", "and", "we", "all", "felt",
                ]),
                joiner: " ".into(),
                groups: vec![
                    cue_group("plain", &[&[&["good"], &["great"]], &[&["bad"], &["awful"]]]),
                    cue_group("rare", &[&[&["lovely"], &["superb"]], &[&["poor"], &["dull"]]]),
                ],
            },
            shift_filler: words(&["our", "trip", "meal", "song", "seemed", "quite", "that", "one", "they", "had"]),
            min_filler: 3,
            max_filler: 6,
            styles: [
                ("mood", ["yes", "no"]),
                ("tone", ["pos", "neg"]),
                ("feel", ["yes", "no"]),
                ("vibe", ["pos", "neg"]),
            ],
        },
        GeneratorKind::ParityOverSymbols => Family {
            labels: ["odd", "even"],
            field: "seq",
            vocabulary: Vocabulary {
                filler: words(&["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"]),
                joiner: String::new(),
                groups: vec![
                    cue_group("plain", &[&[&["x"]], &[&["x", "x"]]]),
                    cue_group("rare", &[&[&["z"]], &[&["z", "z"]]]),
                ],
            },
            shift_filler: words(&["+", "-", "=", "%", "#", "&"]),
            min_filler: 6,
            max_filler: 10,
            styles: [
                ("parity", ["odd", "even"]),
                ("count", ["one", "two"]),
                ("tally", ["odd", "even"]),
                ("number", ["one", "two"]),
            ],
        },
        GeneratorKind::PatternMembership => Family {
            labels: ["set-one", "set-two"],
            field: "letters",
            vocabulary: Vocabulary {
                filler: words(&["e", "f", "g", "h", "k", "m", "n", "p", "r", "s", "t"]),
                joiner: String::new(),
                groups: vec![
                    cue_group("plain", &[&[&["ab"], &["ba"]], &[&["cd"], &["dc"]]]),
                    cue_group("rare", &[&[&["xy"], &["yx"]], &[&["vw"], &["wv"]]]),
                ],
            },
            shift_filler: words(&["i", "j", "l", "o", "q", "u"]),
            min_filler: 6,
            max_filler: 10,
            styles: [
                ("motif", ["one", "two"]),
                ("group", ["first", "second"]),
                ("set", ["one", "two"]),
                ("class", ["first", "second"]),
            ],
        },
    }
}

const PRETRAIN_FRAMES: [&str; 4] = ["{m}? {x}", "{x} -> {m}?", "{m} of: {x}", "q: {m} {x}"];
const HELD_OUT_FRAMES: [&str; 6] = ["{x} ; {m}", "tell {m}: {x}", "{m} = {x} ?", "{x} | {m} ?", "what {m} {x}", "{m} -- {x} ."];

fn prompt(name: String, frame: &str, marker: &str, field: &str, verbalizers: [&str; 2]) -> PromptSpec {
    PromptSpec {
        name,
        input_template: frame.replace("{m}", marker).replace("{x}", &format!("{{{field}}}")),
        choices: verbalizers.iter().map(|s| s.to_string()).collect(),
        target_template: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub pretrain_examples: usize,
    pub pretrain_eval_examples: usize,
    pub held_out_train_examples: usize,
    pub held_out_eval_examples: usize,
    /// Rate of a random-label secondary cue next to the primary cue.
    pub distractor_rate: f64,
    /// Rate of pretraining examples without a primary cue.
    pub no_cue_rate: f64,
    /// Rate of a secondary cue among examples without a primary cue.
    pub secondary_presence: f64,
    /// Per style, how often the secondary cue agrees with the gold label
    /// during pretraining.
    pub secondary_agreement: Vec<f64>,
    pub no_cue_label_probs: Vec<f64>,
    /// Held-out share of examples carrying both cues.
    pub held_out_joint_rate: f64,
    /// Held-out share of the remaining examples decided by the secondary cue.
    pub held_out_secondary_rate: f64,
    pub label_noise: f64,
    pub held_out_frames_per_style: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            pretrain_examples: 2000,
            pretrain_eval_examples: 300,
            held_out_train_examples: 2000,
            held_out_eval_examples: 400,
            distractor_rate: 0.0,
            no_cue_rate: 0.3,
            secondary_presence: 0.0,
            secondary_agreement: vec![1.0; 4],
            no_cue_label_probs: vec![0.5, 0.5],
            held_out_joint_rate: 0.4,
            held_out_secondary_rate: 0.6,
            label_noise: 0.0,
            held_out_frames_per_style: 2,
        }
    }
}

/// Pretraining tasks (one per family and style) and one held-out task per
/// family prompted with unseen wordings of every style.
pub fn default_specs(master_seed: u64, config: &SuiteConfig) -> (Vec<TaskSpec>, Vec<TaskSpec>) {
    let mut pretrain = Vec::new();
    let mut held_out = Vec::new();
    for kind in GeneratorKind::ALL {
        let f = family(kind);
        let base = |name: String, prompts: Vec<PromptSpec>| TaskSpec {
            seed: derive_seed(master_seed, &format!("task:{name}")),
            name,
            kind,
            labels: words(&f.labels),
            field: f.field.into(),
            vocabulary: f.vocabulary.clone(),
            label_groups: vec![0],
            group_weights: vec![1.0],
            distractor_groups: vec![],
            distractor_rate: 0.0,
            no_cue_rate: 0.0,
            secondary: None,
            joint_cue_rate: 0.0,
            no_cue_label_probs: config.no_cue_label_probs.clone(),
            label_noise: config.label_noise,
            min_filler: f.min_filler,
            max_filler: f.max_filler,
            train_examples: 0,
            eval_examples: 0,
            shift: None,
            prompts,
        };
        let mut held_prompts = Vec::new();
        for (s, (marker, verbalizers)) in f.styles.iter().enumerate() {
            let prompts = PRETRAIN_FRAMES
                .iter()
                .enumerate()
                .map(|(i, frame)| prompt(format!("{marker}-{i}"), frame, marker, f.field, *verbalizers))
                .collect();
            pretrain.push(TaskSpec {
                distractor_groups: vec![1],
                distractor_rate: config.distractor_rate,
                no_cue_rate: config.no_cue_rate,
                secondary: Some(SecondaryCue {
                    group: 1,
                    presence: config.secondary_presence,
                    agreement: config.secondary_agreement.get(s).copied().unwrap_or(1.0),
                }),
                train_examples: config.pretrain_examples,
                eval_examples: config.pretrain_eval_examples,
                ..base(format!("{}-{marker}", kind.slug()), prompts)
            });
            held_prompts.extend(
                HELD_OUT_FRAMES
                    .iter()
                    .cycle()
                    .skip(s)
                    .take(config.held_out_frames_per_style)
                    .enumerate()
                    .map(|(i, frame)| prompt(format!("{marker}-new-{i}"), frame, marker, f.field, *verbalizers)),
            );
        }
        let r = config.held_out_secondary_rate;
        held_out.push(TaskSpec {
            label_groups: vec![0, 1],
            group_weights: vec![1.0 - r, r],
            joint_cue_rate: config.held_out_joint_rate,
            train_examples: config.held_out_train_examples,
            eval_examples: config.held_out_eval_examples,
            shift: Some(Shift { filler: f.shift_filler.clone() }),
            ..base(format!("{}-mixed", kind.slug()), held_prompts)
        });
    }
    (pretrain, held_out)
}

fn pick<'a, T>(items: &'a [T], rng: &mut ChaCha8Rng) -> &'a T {
    &items[rng.gen_range(0..items.len())]
}

fn sample_label(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

impl TaskSpec {
    pub fn label_set(&self) -> Result<LabelSet, WorkbenchError> {
        Ok(LabelSet::new(self.labels.clone())?)
    }

    pub fn pool(&self) -> Result<PromptPool, WorkbenchError> {
        let file = crate::template::PoolFile {
            task_name: self.name.clone(),
            labels: self.labels.clone(),
            templates: self.prompts.clone(),
        };
        Ok(PromptPool::from_file_repr(&file)?)
    }

    /// Draws one example. Without a secondary cue the gold label is a
    /// function of the inserted deciding cue.
    pub fn sample(&self, rng: &mut ChaCha8Rng, filler: &[String]) -> Example {
        let j = self.labels.len();
        let mut inserts: Vec<String> = Vec::new();
        let no_cue = self.label_groups.is_empty() || (self.no_cue_rate > 0.0 && rng.gen::<f64>() < self.no_cue_rate);
        let mut label = if no_cue {
            match &self.secondary {
                Some(sec) if rng.gen::<f64>() < sec.presence => {
                    let cue = rng.gen_range(0..j);
                    inserts.extend(pick(&self.vocabulary.groups[sec.group].cues[cue], rng).iter().cloned());
                    if rng.gen::<f64>() < sec.agreement {
                        cue
                    } else {
                        (cue + rng.gen_range(1..j)) % j
                    }
                }
                _ => sample_label(&self.no_cue_label_probs, rng),
            }
        } else {
            let label = rng.gen_range(0..j);
            let groups = if self.joint_cue_rate > 0.0 && rng.gen::<f64>() < self.joint_cue_rate {
                self.label_groups.clone()
            } else {
                vec![self.label_groups[sample_label(&self.group_weights, rng)]]
            };
            for g in groups {
                inserts.extend(pick(&self.vocabulary.groups[g].cues[label], rng).iter().cloned());
            }
            if !self.distractor_groups.is_empty() && rng.gen::<f64>() < self.distractor_rate {
                let d = *pick(&self.distractor_groups, rng);
                let l = rng.gen_range(0..j);
                inserts.extend(pick(&self.vocabulary.groups[d].cues[l], rng).iter().cloned());
            }
            label
        };
        if self.label_noise > 0.0 && rng.gen::<f64>() < self.label_noise {
            label = (label + rng.gen_range(1..j)) % j;
        }
        let len = rng.gen_range(self.min_filler..=self.max_filler);
        let mut tokens: Vec<String> = (0..len).map(|_| pick(filler, rng).clone()).collect();
        for t in inserts {
            let at = rng.gen_range(0..=tokens.len());
            tokens.insert(at, t);
        }
        Example::new([(self.field.clone(), tokens.join(&self.vocabulary.joiner))], Some(label))
    }

    fn draw(&self, count: usize, tag: &str, filler: &[String], exclude: &BTreeSet<String>) -> Result<Vec<Example>, WorkbenchError> {
        let mut rng = rng_for(self.seed, tag);
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(count);
        let mut attempts = 0usize;
        while out.len() < count {
            attempts += 1;
            if attempts > count * 200 + 1000 {
                return Err(WorkbenchError::Spec(format!(
                    "{}: could only draw {} distinct {tag} examples",
                    self.name,
                    out.len()
                )));
            }
            let ex = self.sample(&mut rng, filler);
            let key = ex.fields[&self.field].clone();
            if exclude.contains(&key) || !seen.insert(key) {
                continue;
            }
            out.push(ex);
        }
        Ok(out)
    }

    /// Disjoint train and eval splits, plus a shifted eval split when the
    /// task has a shift descriptor.
    pub fn generate(&self) -> Result<GeneratedTask, WorkbenchError> {
        let filler = &self.vocabulary.filler;
        let train = self.draw(self.train_examples, "train", filler, &BTreeSet::new())?;
        let train_keys: BTreeSet<String> = train.iter().map(|e| e.fields[&self.field].clone()).collect();
        let eval = self.draw(self.eval_examples, "eval", filler, &train_keys)?;
        let eval_shift = match &self.shift {
            Some(s) => Some(self.draw(self.eval_examples, "eval-shift", &s.filler, &train_keys)?),
            None => None,
        };
        Ok(GeneratedTask { train, eval, eval_shift })
    }

    pub fn validate(&self) -> Result<(), WorkbenchError> {
        let j = self.labels.len();
        let fail = |m: String| Err(WorkbenchError::Spec(format!("{}: {m}", self.name)));
        if j < 2 {
            return fail("needs at least two labels".into());
        }
        if self.group_weights.len() != self.label_groups.len()
            || (!self.label_groups.is_empty() && (self.group_weights.iter().sum::<f64>() - 1.0).abs() > 1e-9)
        {
            return fail("group_weights must be a distribution over label_groups".into());
        }
        let secondary = self.secondary.as_ref().map(|s| s.group);
        for g in self.label_groups.iter().chain(&self.distractor_groups).chain(secondary.iter()) {
            match self.vocabulary.groups.get(*g) {
                None => return fail(format!("unknown cue group {g}")),
                Some(group) if group.cues.len() != j || group.cues.iter().any(Vec::is_empty) => {
                    return fail(format!("cue group {} must list cues for {j} labels", group.name))
                }
                _ => {}
            }
        }
        if self.no_cue_label_probs.len() != j || (self.no_cue_label_probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return fail("no_cue_label_probs must be a distribution over the labels".into());
        }
        if self.min_filler > self.max_filler || self.vocabulary.filler.is_empty() {
            return fail("bad filler configuration".into());
        }
        let report = self.pool()?.validate();
        if !report.is_valid() {
            return fail(format!("prompt pool violations {:?}", report.violations));
        }
        Ok(())
    }
}

pub struct GeneratedTask {
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
    pub eval_shift: Option<Vec<Example>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub master_seed: u64,
    pub config: SuiteConfig,
    pub pretraining: Vec<TaskSpec>,
    pub held_out: Vec<TaskSpec>,
}

impl SuiteManifest {
    pub fn new(master_seed: u64, config: SuiteConfig) -> Self {
        let (pretraining, held_out) = default_specs(master_seed, &config);
        SuiteManifest {
            master_seed,
            config,
            pretraining,
            held_out,
        }
    }

    pub fn validate(&self) -> Result<(), WorkbenchError> {
        let pre: BTreeSet<&str> = self.pretraining.iter().map(|t| t.name.as_str()).collect();
        for t in &self.held_out {
            if pre.contains(t.name.as_str()) {
                return Err(WorkbenchError::Spec(format!("{} is both pretraining and held-out", t.name)));
            }
            let verbalizer_sets: BTreeSet<&Vec<String>> = t.prompts.iter().map(|p| &p.choices).collect();
            if t.prompts.len() < 4 || verbalizer_sets.len() < 2 {
                return Err(WorkbenchError::Spec(format!(
                    "{} needs at least 4 prompts and 2 verbalizer sets",
                    t.name
                )));
            }
        }
        for t in self.pretraining.iter().chain(&self.held_out) {
            t.validate()?;
        }
        Ok(())
    }

    pub fn task(&self, name: &str) -> Option<&TaskSpec> {
        self.pretraining.iter().chain(&self.held_out).find(|t| t.name == name)
    }
}

/// A generated task directory: `task.json`, `pool.json`, `train.jsonl`,
/// `eval.jsonl` and optionally `eval_shift.jsonl`.
#[derive(Debug, Clone)]
pub struct TaskDir {
    pub path: PathBuf,
}

impl TaskDir {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        TaskDir { path: path.into() }
    }

    pub fn spec(&self) -> Result<TaskSpec, WorkbenchError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(self.path.join("task.json"))?)?)
    }

    pub fn pool(&self) -> Result<PromptPool, WorkbenchError> {
        Ok(PromptPool::load(&self.path.join("pool.json"))?)
    }

    pub fn split(&self, name: &str) -> Result<Vec<Example>, WorkbenchError> {
        let path = self.path.join(format!("{name}.jsonl"));
        if !path.exists() {
            return Err(WorkbenchError::Spec(format!("missing split {}", path.display())));
        }
        Ok(read_dataset(&path)?)
    }
}

pub const SUITE_FILE: &str = "suite.json";

pub fn task_dir(suite: &Path, task: &str) -> TaskDir {
    TaskDir::new(suite.join("tasks").join(task))
}

/// Writes every task of the manifest under `out` and the manifest itself.
pub fn generate_suite(manifest: &SuiteManifest, out: &Path) -> Result<(), WorkbenchError> {
    manifest.validate()?;
    std::fs::create_dir_all(out)?;
    for spec in manifest.pretraining.iter().chain(&manifest.held_out) {
        let dir = task_dir(out, &spec.name).path;
        std::fs::create_dir_all(&dir)?;
        let data = spec.generate()?;
        std::fs::write(dir.join("task.json"), serde_json::to_string_pretty(spec)?)?;
        spec.pool()?.save(&dir.join("pool.json"))?;
        write_dataset(&dir.join("train.jsonl"), &data.train)?;
        write_dataset(&dir.join("eval.jsonl"), &data.eval)?;
        if let Some(shift) = &data.eval_shift {
            write_dataset(&dir.join("eval_shift.jsonl"), shift)?;
        }
    }
    std::fs::write(out.join(SUITE_FILE), serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

pub fn load_suite(dir: &Path) -> Result<SuiteManifest, WorkbenchError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(dir.join(SUITE_FILE))?)?)
}

/// Deterministic subset of `n` examples.
pub fn subsample(data: &[Example], n: usize, seed: u64, tag: &str) -> Vec<Example> {
    if n >= data.len() {
        return data.to_vec();
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng_for(seed, tag));
    idx.truncate(n);
    idx.sort_unstable();
    idx.into_iter().map(|i| data[i].clone()).collect()
}
