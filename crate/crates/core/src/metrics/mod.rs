//! Classification metrics, communication reporting and class maps.

mod classmap;
mod comm;

pub use classmap::{palette, render_class_map, write_class_map};
pub use comm::{comm_report, CommReport, RoundBytes};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `C × C` counts, rows are truth and columns predictions, classes `1..=C`
/// stored at index `class − 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::arg("confusion matrix needs at least one class"));
        }
        Ok(ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        })
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        let mut m = ConfusionMatrix::new(c)?;
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::dim("confusion matrix must be square"));
            }
            m.counts[i * c..(i + 1) * c].copy_from_slice(row);
        }
        Ok(m)
    }

    pub fn from_labels(preds: &[usize], truth: &[usize], classes: usize) -> Result<Self> {
        if preds.len() != truth.len() {
            return Err(Error::dim(format!(
                "{} predictions for {} labels",
                preds.len(),
                truth.len()
            )));
        }
        let mut m = ConfusionMatrix::new(classes)?;
        for (&p, &t) in preds.iter().zip(truth) {
            if !(1..=classes).contains(&p) || !(1..=classes).contains(&t) {
                return Err(Error::arg(format!("labels must lie in [1, {classes}], got {t} / {p}")));
            }
            m.counts[(t - 1) * classes + (p - 1)] += 1;
        }
        Ok(m)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[(truth - 1) * self.classes + (pred - 1)]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.classes).map(|i| self.counts[i * self.classes + i]).sum()
    }

    /// Row sums `N_r^i`.
    pub fn truth_totals(&self) -> Vec<u64> {
        self.counts.chunks(self.classes).map(|r| r.iter().sum()).collect()
    }

    /// Column sums `N_p^i`.
    pub fn pred_totals(&self) -> Vec<u64> {
        (0..self.classes)
            .map(|j| (0..self.classes).map(|i| self.counts[i * self.classes + j]).sum())
            .collect()
    }

    /// Chance agreement `Σ N_r^i N_p^i / N_a²`.
    pub fn expected_agreement(&self) -> f64 {
        let n = self.total() as f64;
        self.truth_totals()
            .iter()
            .zip(self.pred_totals())
            .map(|(&r, p)| r as f64 * p as f64)
            .sum::<f64>()
            / (n * n)
    }
}

/// Flat summary of a classification run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub oa: f64,
    pub aa: f64,
    /// `None` when chance agreement is 1 and κ is undefined.
    pub kappa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kappa_note: Option<String>,
    /// Per-class accuracy; `None` for classes without test samples.
    pub ca: Vec<Option<f64>>,
    /// Classes without test samples, left out of AA.
    pub empty_classes: Vec<usize>,
    pub samples: u64,
}

pub fn evaluate(preds: &[usize], truth: &[usize], classes: usize) -> Result<MetricsReport> {
    report(&ConfusionMatrix::from_labels(preds, truth, classes)?)
}

/// OA, AA, κ and per-class accuracy of a confusion matrix.
pub fn report(m: &ConfusionMatrix) -> Result<MetricsReport> {
    let n = m.total();
    if n == 0 {
        return Err(Error::arg("no samples to evaluate"));
    }
    let oa = m.correct() as f64 / n as f64;
    let rows = m.truth_totals();
    let mut ca = Vec::with_capacity(m.classes());
    let mut empty_classes = Vec::new();
    for (i, &r) in rows.iter().enumerate() {
        if r == 0 {
            ca.push(None);
            empty_classes.push(i + 1);
        } else {
            ca.push(Some(m.get(i + 1, i + 1) as f64 / r as f64));
        }
    }
    let present: Vec<f64> = ca.iter().flatten().copied().collect();
    let aa = present.iter().sum::<f64>() / present.len() as f64;
    let pe = m.expected_agreement();
    let (kappa, kappa_note) = if pe >= 1.0 {
        (
            None,
            Some("undefined: chance agreement is 1 (a single class in both truth and predictions)".to_string()),
        )
    } else {
        (Some((oa - pe) / (1.0 - pe)), None)
    };
    Ok(MetricsReport {
        oa,
        aa,
        kappa,
        kappa_note,
        ca,
        empty_classes,
        samples: n,
    })
}
