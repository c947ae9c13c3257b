//! Per-slide mean projected embeddings and their CSV form.

use crate::data::FeatureBag;
use crate::ecn::TaskIndicator;
use crate::error::{Error, Result};
use crate::model::Mecformer;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub slide_id: String,
    pub task: usize,
    pub values: Vec<f64>,
}

/// Channel mean of each bag's projected patch embeddings.
pub fn export_embeddings<'a, I>(model: &Mecformer, bags: I) -> Result<Vec<EmbeddingRow>>
where
    I: IntoIterator<Item = &'a FeatureBag>,
{
    let tasks = model.config().tasks;
    bags.into_iter()
        .map(|b| {
            let task = TaskIndicator::new(b.task_id, tasks)?;
            Ok(EmbeddingRow {
                slide_id: b.slide_id.clone(),
                task: b.task_id,
                values: model.mean_projection(&b.to_tensor(), task)?,
            })
        })
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Ingestion(format!("embedding csv: {e}"))
}

/// Header `slide_id,task,e0,…`; values with 9 significant digits.
pub fn embeddings_to_csv(rows: &[EmbeddingRow]) -> Result<String> {
    let dim = rows.first().map_or(0, |r| r.values.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["slide_id".to_string(), "task".to_string()];
    header.extend((0..dim).map(|i| format!("e{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        if r.values.len() != dim {
            return Err(Error::Contract(format!(
                "embedding of {:?} has {} values, expected {dim}",
                r.slide_id,
                r.values.len()
            )));
        }
        let mut rec = vec![r.slide_id.clone(), r.task.to_string()];
        rec.extend(r.values.iter().map(|v| format!("{v:.8e}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Ingestion(format!("embedding csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn embeddings_from_csv(text: &str) -> Result<Vec<EmbeddingRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let bad = |what: &str| Error::Ingestion(format!("embedding csv: bad {what}"));
    r.records()
        .map(|rec| {
            let rec = rec.map_err(csv_err)?;
            let mut fields = rec.iter();
            let slide_id = fields.next().ok_or_else(|| bad("row"))?.to_string();
            let task = fields.next().ok_or_else(|| bad("row"))?.parse().map_err(|_| bad("task"))?;
            let values = fields
                .map(|f| f.parse::<f64>().map_err(|_| bad("value")))
                .collect::<Result<_>>()?;
            Ok(EmbeddingRow { slide_id, task, values })
        })
        .collect()
}
