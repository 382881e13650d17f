//! Ensemble and median accuracy over a prompt pool, plus delta tables.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agreement::{fleiss_kappa, majority_share, AgreementError};
use crate::scorer::{argmax, ScorerError, ScorerModel};
use crate::template::{Example, PromptPool};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Agreement(#[from] AgreementError),
    #[error("example {0} has no gold label")]
    Unlabeled(usize),
    #[error("empty dataset")]
    Empty,
    #[error("reports are not comparable: {0}")]
    Mismatch(String),
    #[error("need at least one report")]
    NoReports,
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Mean of the per-prompt label distributions.
pub fn ensemble_distribution(model: &ScorerModel, pool: &PromptPool, example: &Example) -> Result<Vec<f64>, ScorerError> {
    let mut mean = vec![0.0; pool.num_labels()];
    for t in &pool.templates {
        let d = model.label_distribution(t, example)?;
        for (m, p) in mean.iter_mut().zip(&d.probs) {
            *m += p;
        }
    }
    let k = pool.len() as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    Ok(mean)
}

pub fn ensemble_predict(model: &ScorerModel, pool: &PromptPool, example: &Example) -> Result<usize, ScorerError> {
    Ok(argmax(&ensemble_distribution(model, pool, example)?))
}

/// Median with the midpoint convention for an even count.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub n: usize,
    pub prompt_names: Vec<String>,
    pub per_prompt_accuracy: Vec<f64>,
    pub ensemble_accuracy: f64,
    pub median_accuracy: f64,
    /// Absent for single-prompt pools.
    pub kappa_on_eval: Option<f64>,
    pub collapsed: bool,
    pub majority_share: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    /// `N x K` per-prompt predictions.
    pub predictions: Vec<Vec<usize>>,
    pub ensemble_predictions: Vec<usize>,
}

pub fn evaluate(model: &ScorerModel, pool: &PromptPool, data: &[Example]) -> Result<EvalReport, EvalError> {
    Ok(evaluate_detailed(model, pool, data)?.report)
}

pub fn evaluate_detailed(model: &ScorerModel, pool: &PromptPool, data: &[Example]) -> Result<Evaluation, EvalError> {
    if data.is_empty() {
        return Err(EvalError::Empty);
    }
    let gold: Vec<usize> = data
        .iter()
        .enumerate()
        .map(|(i, ex)| ex.label.ok_or(EvalError::Unlabeled(i)))
        .collect::<Result<_, _>>()?;
    let rows: Vec<(Vec<usize>, usize)> = data
        .par_iter()
        .map(|ex| {
            let mut mean = vec![0.0; pool.num_labels()];
            let mut preds = Vec::with_capacity(pool.len());
            for t in &pool.templates {
                let d = model.label_distribution(t, ex)?;
                preds.push(d.argmax());
                for (m, p) in mean.iter_mut().zip(&d.probs) {
                    *m += p;
                }
            }
            let k = pool.len() as f64;
            mean.iter_mut().for_each(|m| *m /= k);
            Ok((preds, argmax(&mean)))
        })
        .collect::<Result<_, ScorerError>>()?;
    let n = data.len();
    let (predictions, ensemble_predictions): (Vec<Vec<usize>>, Vec<usize>) = rows.into_iter().unzip();
    let per_prompt_accuracy: Vec<f64> = (0..pool.len())
        .map(|k| predictions.iter().zip(&gold).filter(|(p, g)| p[k] == **g).count() as f64 / n as f64)
        .collect();
    let ensemble_accuracy = ensemble_predictions.iter().zip(&gold).filter(|(p, g)| p == g).count() as f64 / n as f64;
    let (kappa_on_eval, collapsed) = if pool.len() >= 2 {
        let r = fleiss_kappa(&predictions, pool.num_labels())?;
        (Some(r.kappa), r.collapsed)
    } else {
        (None, false)
    };
    Ok(Evaluation {
        report: EvalReport {
            task: pool.task_name.clone(),
            n,
            prompt_names: pool.templates.iter().map(|t| t.name.clone()).collect(),
            median_accuracy: median(&per_prompt_accuracy),
            per_prompt_accuracy,
            ensemble_accuracy,
            kappa_on_eval,
            collapsed,
            majority_share: majority_share(&predictions, pool.num_labels()),
        },
        predictions,
        ensemble_predictions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub metric: String,
    pub baseline: f64,
    pub candidate: f64,
    pub delta: f64,
    /// Population standard deviation of the candidate across runs.
    pub candidate_std: f64,
    pub runs: usize,
}

fn metrics(r: &EvalReport) -> Vec<(String, f64)> {
    let mut m = vec![
        ("ensemble_accuracy".to_string(), r.ensemble_accuracy),
        ("median_accuracy".to_string(), r.median_accuracy),
        ("kappa".to_string(), r.kappa_on_eval.unwrap_or(f64::NAN)),
    ];
    for (name, acc) in r.prompt_names.iter().zip(&r.per_prompt_accuracy) {
        m.push((format!("accuracy:{name}"), *acc));
    }
    m
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Deltas of the mean of `candidates` against `baseline`.
pub fn compare(baseline: &EvalReport, candidates: &[EvalReport]) -> Result<Vec<DeltaRow>, EvalError> {
    if candidates.is_empty() {
        return Err(EvalError::NoReports);
    }
    for c in candidates {
        if c.task != baseline.task || c.n != baseline.n || c.prompt_names != baseline.prompt_names {
            return Err(EvalError::Mismatch(format!(
                "{} (n={}, {} prompts) vs {} (n={}, {} prompts)",
                baseline.task,
                baseline.n,
                baseline.prompt_names.len(),
                c.task,
                c.n,
                c.prompt_names.len()
            )));
        }
    }
    let base = metrics(baseline);
    let cands: Vec<Vec<(String, f64)>> = candidates.iter().map(metrics).collect();
    Ok(base
        .iter()
        .enumerate()
        .map(|(i, (metric, b))| {
            let values: Vec<f64> = cands.iter().map(|c| c[i].1).collect();
            let (mean, std) = mean_std(&values);
            DeltaRow {
                metric: metric.clone(),
                baseline: *b,
                candidate: mean,
                delta: mean - b,
                candidate_std: std,
                runs: values.len(),
            }
        })
        .collect())
}

pub fn delta_csv(rows: &[DeltaRow]) -> Result<String, EvalError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| EvalError::Mismatch(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
