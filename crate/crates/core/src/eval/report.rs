//! Metric reports as aligned text and JSON, and mean ± std over repeats.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{classification_metrics, PredictionRecord, TaskMetrics};
use crate::data::TaskSpec;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tasks: Vec<TaskMetrics>,
}

/// Decimal places used by every text rendering.
pub const TEXT_DECIMALS: usize = 4;

impl MetricReport {
    /// One entry per task of `spec` that has records, in spec order.
    pub fn from_records(spec: &TaskSpec, records: &[PredictionRecord]) -> Result<Self> {
        if let Some(r) = records.iter().find(|r| r.task >= spec.task_count()) {
            return Err(Error::Contract(format!(
                "slide {:?} has task {} outside the spec",
                r.slide_id, r.task
            )));
        }
        let tasks = spec
            .tasks()
            .iter()
            .enumerate()
            .filter(|(t, _)| records.iter().any(|r| r.task == *t))
            .map(|(t, def)| classification_metrics(def, records.iter().filter(|r| r.task == t)))
            .collect::<Result<_>>()?;
        Ok(MetricReport { tasks })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Mean of the per-task penalized F1.
    pub fn mean_f1(&self) -> f64 {
        self.tasks.iter().map(|t| t.f1).sum::<f64>() / self.tasks.len().max(1) as f64
    }

    pub fn to_text(&self) -> String {
        let d = TEXT_DECIMALS;
        let width = self.tasks.iter().map(|t| t.task.len()).max().unwrap_or(4).max(4);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>9}  {:>8}  {:>8}  {:>9}  {:>3}  {:>3}  {:>5}",
            "task", "acc%", "f1", "recall", "precision", "N_c", "N_o", "bags"
        );
        for t in &self.tasks {
            let _ = writeln!(
                out,
                "{:<width$}  {:>9.d$}  {:>8.d$}  {:>8.d$}  {:>9.d$}  {:>3}  {:>3}  {:>5}",
                t.task, t.accuracy, t.f1, t.recall, t.precision, t.n_c, t.n_o, t.records
            );
        }
        for t in self.tasks.iter().filter(|t| !t.ood_terms.is_empty()) {
            let terms: Vec<String> = t.ood_terms.iter().map(|s| format!("{s:?}")).collect();
            let _ = writeln!(out, "out-of-distribution terms for {}: {}", t.task, terms.join(", "));
        }
        out
    }
}

/// Sample mean and standard deviation (`n − 1` denominator; 0 for one value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(MeanStd { mean, std, n })
    }

    pub fn display(&self, decimals: usize) -> String {
        format!("{:.decimals$} ± {:.decimals$}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: String,
    pub accuracy: MeanStd,
    pub f1: MeanStd,
    pub recall: MeanStd,
    pub precision: MeanStd,
    pub n_o: MeanStd,
}

/// Per-task mean ± std over repeated reports covering the same tasks.
pub fn summarize(reports: &[MetricReport]) -> Result<Vec<TaskSummary>> {
    let Some(first) = reports.first() else {
        return Ok(Vec::new());
    };
    let names: Vec<&str> = first.tasks.iter().map(|t| t.task.as_str()).collect();
    for r in reports {
        if r.tasks.iter().map(|t| t.task.as_str()).ne(names.iter().copied()) {
            return Err(Error::Contract("repeated reports cover different tasks".into()));
        }
    }
    Ok(names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let stat = |f: fn(&TaskMetrics) -> f64| {
                let v: Vec<f64> = reports.iter().map(|r| f(&r.tasks[i])).collect();
                MeanStd::of(&v).expect("at least one report")
            };
            TaskSummary {
                task: name.to_string(),
                accuracy: stat(|t| t.accuracy),
                f1: stat(|t| t.f1),
                recall: stat(|t| t.recall),
                precision: stat(|t| t.precision),
                n_o: stat(|t| t.n_o as f64),
            }
        })
        .collect())
}
