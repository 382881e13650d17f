//! Fleiss' kappa over prompt predictions and kappa-based checkpoint selection.

use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AgreementError {
    #[error("row {row} has {found} predictions, expected {expected}")]
    Ragged { row: usize, found: usize, expected: usize },
    #[error("label {label} out of range for {labels} labels")]
    LabelOutOfRange { label: usize, labels: usize },
    #[error("need at least 2 raters, got {0}")]
    TooFewRaters(usize),
    #[error("no examples")]
    Empty,
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("trajectory steps must be strictly increasing")]
    UnorderedSteps,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `counts[i][j]` is the number of prompts predicting label `j` on example `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionMatrix {
    counts: Vec<Vec<usize>>,
    raters: usize,
    labels: usize,
}

impl PredictionMatrix {
    /// Builds counts from an `N x K` table of predicted label indices.
    pub fn build(predictions: &[Vec<usize>], labels: usize) -> Result<Self, AgreementError> {
        let raters = predictions.first().map_or(0, Vec::len);
        let mut counts = Vec::with_capacity(predictions.len());
        for (row, preds) in predictions.iter().enumerate() {
            if preds.len() != raters {
                return Err(AgreementError::Ragged {
                    row,
                    found: preds.len(),
                    expected: raters,
                });
            }
            let mut c = vec![0; labels];
            for &p in preds {
                *c.get_mut(p).ok_or(AgreementError::LabelOutOfRange { label: p, labels })? += 1;
            }
            counts.push(c);
        }
        Ok(PredictionMatrix { counts, raters, labels })
    }

    pub fn counts(&self) -> &[Vec<usize>] {
        &self.counts
    }

    pub fn examples(&self) -> usize {
        self.counts.len()
    }

    pub fn raters(&self) -> usize {
        self.raters
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    /// Fraction of agreeing prompt pairs on each example.
    pub fn per_example_agreement(&self) -> Result<Vec<f64>, AgreementError> {
        if self.raters < 2 {
            return Err(AgreementError::TooFewRaters(self.raters));
        }
        let k = self.raters as f64;
        Ok(self
            .counts
            .iter()
            .map(|row| row.iter().map(|&n| (n * n.saturating_sub(1)) as f64).sum::<f64>() / (k * (k - 1.0)))
            .collect())
    }

    pub fn fleiss_kappa(&self) -> Result<AgreementReport, AgreementError> {
        let p_i = self.per_example_agreement()?;
        if self.counts.is_empty() {
            return Err(AgreementError::Empty);
        }
        let n = self.counts.len() as u128;
        let k = self.raters as u128;
        let agreeing: u128 = self
            .counts
            .iter()
            .flatten()
            .map(|&c| (c * c.saturating_sub(1)) as u128)
            .sum();
        let column: Vec<u128> = (0..self.labels)
            .map(|j| self.counts.iter().map(|row| row[j] as u128).sum())
            .collect();
        let pair_den = n * k * (k - 1);
        let total = n * k;
        let chance_num: u128 = column.iter().map(|c| c * c).sum();
        let chance_den = total * total;
        let p_bar = agreeing as f64 / pair_den as f64;
        let p_e = chance_num as f64 / chance_den as f64;
        let q = column.iter().map(|&c| c as f64 / total as f64).collect();
        let collapsed = column.iter().filter(|&&c| c > 0).count() == 1;
        let kappa = if collapsed {
            0.0
        } else {
            let num = agreeing as i128 * chance_den as i128 - chance_num as i128 * pair_den as i128;
            let den = pair_den as i128 * (chance_den - chance_num) as i128;
            num as f64 / den as f64
        };
        Ok(AgreementReport {
            p_i,
            p_bar,
            p_e,
            q,
            kappa,
            collapsed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub p_i: Vec<f64>,
    pub p_bar: f64,
    pub p_e: f64,
    pub q: Vec<f64>,
    pub kappa: f64,
    pub collapsed: bool,
}

pub fn fleiss_kappa(predictions: &[Vec<usize>], labels: usize) -> Result<AgreementReport, AgreementError> {
    PredictionMatrix::build(predictions, labels)?.fleiss_kappa()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaPoint {
    pub step: u64,
    pub kappa: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KappaTrajectory {
    points: Vec<KappaPoint>,
}

impl KappaTrajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_points(points: Vec<KappaPoint>) -> Result<Self, AgreementError> {
        let mut t = KappaTrajectory::new();
        for p in points {
            t.push(p.step, p.kappa)?;
        }
        Ok(t)
    }

    pub fn push(&mut self, step: u64, kappa: f64) -> Result<(), AgreementError> {
        if self.points.last().is_some_and(|p| p.step >= step) {
            return Err(AgreementError::UnorderedSteps);
        }
        self.points.push(KappaPoint { step, kappa });
        Ok(())
    }

    pub fn points(&self) -> &[KappaPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index where the final strictly decreasing run of kappa values begins.
    pub fn select_index(&self) -> Result<usize, AgreementError> {
        if self.points.is_empty() {
            return Err(AgreementError::EmptyTrajectory);
        }
        let mut t = self.points.len() - 1;
        while t > 0 && self.points[t - 1].kappa > self.points[t].kappa {
            t -= 1;
        }
        Ok(t)
    }

    pub fn select_checkpoint(&self) -> Result<u64, AgreementError> {
        Ok(self.points[self.select_index()?].step)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub example_id: usize,
    pub predictions: Vec<usize>,
}

pub fn parse_prediction_dump(reader: impl BufRead) -> Result<Vec<PredictionRecord>, AgreementError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| AgreementError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn read_prediction_dump(path: &Path) -> Result<Vec<PredictionRecord>, AgreementError> {
    parse_prediction_dump(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn write_prediction_dump(path: &Path, predictions: &[Vec<usize>]) -> Result<(), AgreementError> {
    let mut text = String::new();
    for (example_id, p) in predictions.iter().enumerate() {
        let record = PredictionRecord {
            example_id,
            predictions: p.clone(),
        };
        text.push_str(&serde_json::to_string(&record).expect("plain record serializes"));
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Fraction of all predictions that fall on the most common label.
pub fn majority_share(predictions: &[Vec<usize>], labels: usize) -> f64 {
    let mut counts = vec![0usize; labels];
    let mut total = 0usize;
    for &p in predictions.iter().flatten() {
        if p < labels {
            counts[p] += 1;
        }
        total += 1;
    }
    if total == 0 {
        return 0.0;
    }
    *counts.iter().max().unwrap_or(&0) as f64 / total as f64
}
