//! Per-task classification metrics with the out-of-distribution penalty.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{TaskDef, TaskSpec};
use crate::error::{Error, Result};

/// One evaluated slide.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub slide_id: String,
    pub task: usize,
    pub true_category: usize,
    pub predicted_term: String,
    /// Category of `task` whose term equals `predicted_term`; `None` marks an
    /// out-of-distribution prediction.
    pub predicted: Option<usize>,
    pub truncated: bool,
}

impl PredictionRecord {
    /// Resolves `predicted_term` against the categories of `task`.
    pub fn resolve(
        spec: &TaskSpec,
        slide_id: impl Into<String>,
        task: usize,
        true_category: usize,
        predicted_term: impl Into<String>,
        truncated: bool,
    ) -> Self {
        let predicted_term = predicted_term.into();
        PredictionRecord {
            slide_id: slide_id.into(),
            task,
            true_category,
            predicted: spec.resolve(task, &predicted_term),
            predicted_term,
            truncated,
        }
    }

    pub fn is_ood(&self) -> bool {
        self.predicted.is_none()
    }

    pub fn is_correct(&self) -> bool {
        self.predicted == Some(self.true_category)
    }
}

/// `Σ m_i / (N_c + N_o)` with `N_c = per_category.len()`.
pub fn penalized_overall(per_category: &[f64], n_ood: usize) -> Result<f64> {
    if per_category.is_empty() {
        return Err(Error::Contract("penalized metric needs at least one category".into()));
    }
    Ok(per_category.iter().sum::<f64>() / (per_category.len() + n_ood) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub term: String,
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    pub records: usize,
    /// Percent correct; OOD predictions count as wrong.
    pub accuracy: f64,
    pub f1: f64,
    pub recall: f64,
    pub precision: f64,
    pub n_c: usize,
    pub n_o: usize,
    /// Distinct invalid terms, verbatim and sorted.
    pub ood_terms: Vec<String>,
    pub truncated: usize,
    pub categories: Vec<CategoryMetrics>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metrics of one task from its records.
pub fn classification_metrics<'a, I>(task: &TaskDef, records: I) -> Result<TaskMetrics>
where
    I: IntoIterator<Item = &'a PredictionRecord>,
{
    let n_c = task.categories.len();
    let mut tp = vec![0usize; n_c];
    let mut predicted = vec![0usize; n_c];
    let mut support = vec![0usize; n_c];
    let mut ood = BTreeSet::new();
    let (mut total, mut correct, mut truncated) = (0, 0, 0);
    let mut task_id = None;
    for r in records {
        if *task_id.get_or_insert(r.task) != r.task {
            return Err(Error::Contract(format!(
                "records of tasks {} and {} mixed in one metric",
                task_id.unwrap_or_default(),
                r.task
            )));
        }
        if r.true_category >= n_c || r.predicted.is_some_and(|p| p >= n_c) {
            return Err(Error::Contract(format!(
                "slide {:?} refers to a category outside task {:?}",
                r.slide_id, task.name
            )));
        }
        total += 1;
        support[r.true_category] += 1;
        truncated += usize::from(r.truncated);
        match r.predicted {
            Some(p) => {
                predicted[p] += 1;
                if p == r.true_category {
                    tp[p] += 1;
                    correct += 1;
                }
            }
            None => {
                ood.insert(r.predicted_term.clone());
            }
        }
    }
    let categories: Vec<CategoryMetrics> = (0..n_c)
        .map(|c| {
            let precision = ratio(tp[c], predicted[c]);
            let recall = ratio(tp[c], support[c]);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            CategoryMetrics {
                term: task.categories[c].term.clone(),
                support: support[c],
                precision,
                recall,
                f1,
            }
        })
        .collect();
    let n_o = ood.len();
    let overall = |f: fn(&CategoryMetrics) -> f64| {
        penalized_overall(&categories.iter().map(f).collect::<Vec<_>>(), n_o)
    };
    Ok(TaskMetrics {
        task: task.name.clone(),
        records: total,
        accuracy: 100.0 * ratio(correct, total),
        f1: overall(|c| c.f1)?,
        recall: overall(|c| c.recall)?,
        precision: overall(|c| c.precision)?,
        n_c,
        n_o,
        ood_terms: ood.into_iter().collect(),
        truncated,
        categories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CategoryDef;

    fn binary() -> TaskSpec {
        let cat = |t: &str| CategoryDef {
            name: t.into(),
            term: t.into(),
        };
        TaskSpec::new(vec![TaskDef {
            name: "lymph".into(),
            categories: vec![cat("normal"), cat("tumor")],
        }])
        .unwrap()
    }

    fn rec(spec: &TaskSpec, i: usize, truth: usize, term: &str) -> PredictionRecord {
        PredictionRecord::resolve(spec, format!("s{i}"), 0, truth, term, false)
    }

    #[test]
    fn penalized_examples() {
        assert!((penalized_overall(&[0.8, 0.6], 0).unwrap() - 0.7).abs() < 1e-15);
        assert!((penalized_overall(&[0.8, 0.6], 1).unwrap() - 1.4 / 3.0).abs() < 1e-15);
        assert_eq!(penalized_overall(&[1.0; 4], 0).unwrap(), 1.0);
        assert!(matches!(penalized_overall(&[], 2), Err(Error::Contract(_))));
    }

    #[test]
    fn confusion_arithmetic() {
        // Positive class "tumor": TP 3, FP 1, FN 1, TN 5.
        let spec = binary();
        let mut rs = Vec::new();
        let mut push = |truth, term: &str, n| {
            for _ in 0..n {
                let i = rs.len();
                rs.push(rec(&spec, i, truth, term));
            }
        };
        push(1, "tumor", 3);
        push(0, "tumor", 1);
        push(1, "normal", 1);
        push(0, "normal", 5);
        let m = classification_metrics(&spec.tasks()[0], &rs).unwrap();
        let tumor = &m.categories[1];
        assert!((tumor.precision - 0.75).abs() < 1e-15);
        assert!((tumor.recall - 0.75).abs() < 1e-15);
        let normal = &m.categories[0];
        assert!((normal.precision - 5.0 / 6.0).abs() < 1e-15);
        assert!((normal.recall - 5.0 / 6.0).abs() < 1e-15);
        assert!((m.accuracy - 80.0).abs() < 1e-12);
        assert!((m.recall - (0.75 + 5.0 / 6.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn single_ood_widens_denominator() {
        let spec = binary();
        let rs = vec![
            rec(&spec, 0, 0, "normal"),
            rec(&spec, 1, 1, "tumor"),
            rec(&spec, 2, 1, "tumor tumor"),
        ];
        let m = classification_metrics(&spec.tasks()[0], &rs).unwrap();
        assert_eq!((m.n_c, m.n_o), (2, 1));
        assert_eq!(m.ood_terms, vec!["tumor tumor".to_string()]);
        // Per-category precision is 1 for both, so overall precision is 2/3.
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn undefined_precision_is_zero() {
        let spec = binary();
        let rs = vec![rec(&spec, 0, 0, "normal"), rec(&spec, 1, 1, "normal")];
        let m = classification_metrics(&spec.tasks()[0], &rs).unwrap();
        assert_eq!(m.categories[1].precision, 0.0);
        assert_eq!(m.categories[1].f1, 0.0);
    }

    #[test]
    fn mixed_tasks_rejected() {
        let spec = binary();
        let mut other = rec(&spec, 1, 0, "normal");
        other.task = 3;
        let rs = vec![rec(&spec, 0, 0, "normal"), other];
        assert!(classification_metrics(&spec.tasks()[0], &rs).is_err());
    }
}
