//! Prediction, metrics, embedding export and the ablation harness.

pub mod ablation;
mod embeddings;
mod metrics;
mod report;
mod silhouette;

pub use ablation::{run_ablation, AblationReport, AblationSetup, Cell, CellOutcome, Grid, SeedOutcome, SeedRun};
pub use embeddings::{embeddings_from_csv, embeddings_to_csv, export_embeddings, EmbeddingRow};
pub use metrics::{classification_metrics, penalized_overall, CategoryMetrics, PredictionRecord, TaskMetrics};
pub use report::{summarize, MeanStd, MetricReport, TaskSummary, TEXT_DECIMALS};
pub use silhouette::silhouette;

use crate::data::{FeatureBag, TaskSpec};
use crate::ecn::TaskIndicator;
use crate::error::{Error, Result};
use crate::model::Mecformer;

/// Checks that a model can be evaluated on bags of `d_f` features under `spec`.
pub fn check_compatible(model: &Mecformer, spec: &TaskSpec, d_f: Option<usize>) -> Result<()> {
    let c = model.config();
    let mut problems = Vec::new();
    if c.tasks != spec.task_count() {
        problems.push(format!("model has {} tasks, spec has {}", c.tasks, spec.task_count()));
    }
    if c.use_decoder && c.vocab_size != spec.vocab().len() {
        problems.push(format!(
            "model vocabulary has {} words, spec has {}",
            c.vocab_size,
            spec.vocab().len()
        ));
    }
    if !c.use_decoder && c.categories != spec.total_categories() {
        problems.push(format!(
            "model head has {} categories, spec has {}",
            c.categories,
            spec.total_categories()
        ));
    }
    if let Some(d) = d_f.filter(|&d| d != c.d_f) {
        problems.push(format!("model expects d_f {}, data has {d}", c.d_f));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Incompatible(problems.join("; ")))
    }
}

/// Predicts one bag's term, by greedy decoding or through the head-only
/// classifier.
pub fn predict(model: &Mecformer, spec: &TaskSpec, bag: &FeatureBag) -> Result<PredictionRecord> {
    let truth = spec.resolve(bag.task_id, &bag.label_term).ok_or_else(|| {
        Error::Ingestion(format!(
            "label {:?} of {:?} is not a category of its task",
            bag.label_term, bag.slide_id
        ))
    })?;
    let task = TaskIndicator::new(bag.task_id, spec.task_count())?;
    let x = bag.to_tensor();
    let (term, truncated) = if model.config().use_decoder {
        let g = model.generate(&x, task)?;
        (spec.detokenize(&g.tokens)?, g.truncated)
    } else {
        let (global, _) = model.predict_category(&x, task)?;
        let (t, c) = spec
            .split_global(global)
            .ok_or_else(|| Error::Contract(format!("head predicted unknown category {global}")))?;
        (spec.tasks()[t].categories[c].term.clone(), false)
    };
    Ok(PredictionRecord::resolve(spec, &bag.slide_id, bag.task_id, truth, term, truncated))
}

pub fn evaluate<'a, I>(model: &Mecformer, spec: &TaskSpec, bags: I) -> Result<(Vec<PredictionRecord>, MetricReport)>
where
    I: IntoIterator<Item = &'a FeatureBag>,
{
    let records = bags
        .into_iter()
        .map(|b| predict(model, spec, b))
        .collect::<Result<Vec<_>>>()?;
    let report = MetricReport::from_records(spec, &records)?;
    Ok((records, report))
}
