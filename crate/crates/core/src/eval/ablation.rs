//! Trains and evaluates a grid of model variants on shared splits.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{evaluate, export_embeddings, silhouette, summarize, MeanStd, MetricReport, TaskSummary};
use crate::data::{split, FeatureBag, Partition, Split, SplitFractions, TaskSpec};
use crate::error::{Error, Result};
use crate::model::{Mecformer, ModelConfig, ProjectionKind};
use crate::training::{examples, train, RunDir, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grid {
    /// P1, PT and ECN, all with the decoder.
    Projection,
    /// ECN with and without the decoder.
    Decoder,
}

impl Grid {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "projection" => Ok(Grid::Projection),
            "decoder" => Ok(Grid::Decoder),
            other => Err(Error::Config(format!(
                "unknown grid {other:?}, expected projection or decoder"
            ))),
        }
    }

    pub fn cells(self) -> Vec<Cell> {
        match self {
            Grid::Projection => ProjectionKind::ALL.iter().map(|&k| Cell::new(k, true)).collect(),
            Grid::Decoder => vec![Cell::new(ProjectionKind::Ecn, true), Cell::new(ProjectionKind::Ecn, false)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub name: String,
    pub projection: ProjectionKind,
    pub use_decoder: bool,
}

impl Cell {
    pub fn new(projection: ProjectionKind, use_decoder: bool) -> Self {
        let name = if use_decoder {
            projection.as_str().to_string()
        } else {
            format!("{}-headonly", projection.as_str())
        };
        Cell {
            name,
            projection,
            use_decoder,
        }
    }

    pub fn configure(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            projection: self.projection,
            use_decoder: self.use_decoder,
            ..base.clone()
        }
    }
}

pub struct AblationSetup<'a> {
    pub spec: &'a TaskSpec,
    pub bags: &'a [FeatureBag],
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fractions: SplitFractions,
    /// Each seed fixes one split, the initialisation and the shuffling.
    pub seeds: Vec<u64>,
    /// When set, every cell and seed gets a run directory below it.
    pub run_root: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub fingerprint: String,
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Test split metrics of the best-validation parameters.
    pub metrics: MetricReport,
    /// Test embeddings clustered by task; absent with a single task.
    pub silhouette: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub result: std::result::Result<SeedRun, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub cell: Cell,
    pub runs: Vec<SeedOutcome>,
}

impl CellOutcome {
    pub fn successes(&self) -> impl Iterator<Item = &SeedRun> {
        self.runs.iter().filter_map(|r| r.result.as_ref().ok())
    }

    pub fn failures(&self) -> impl Iterator<Item = (u64, &str)> {
        self.runs
            .iter()
            .filter_map(|r| r.result.as_ref().err().map(|e| (r.seed, e.as_str())))
    }

    pub fn summary(&self) -> Result<Vec<TaskSummary>> {
        summarize(&self.successes().map(|r| r.metrics.clone()).collect::<Vec<_>>())
    }

    /// Per-seed mean over tasks of the penalized F1.
    pub fn mean_f1(&self) -> Option<MeanStd> {
        MeanStd::of(&self.successes().map(|r| r.metrics.mean_f1()).collect::<Vec<_>>())
    }

    pub fn silhouette(&self) -> Option<MeanStd> {
        MeanStd::of(&self.successes().filter_map(|r| r.silhouette).collect::<Vec<_>>())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// `(seed, partition fingerprint)` as split before any cell ran.
    pub splits: Vec<(u64, String)>,
    pub cells: Vec<CellOutcome>,
}

impl AblationReport {
    pub fn cell(&self, name: &str) -> Option<&CellOutcome> {
        self.cells.iter().find(|c| c.cell.name == name)
    }

    /// True when every successful run trained on its seed's partition.
    pub fn splits_shared(&self) -> bool {
        self.cells.iter().flat_map(|c| c.successes()).all(|r| {
            self.splits
                .iter()
                .any(|(s, fp)| *s == r.seed && *fp == r.fingerprint)
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let width = self.cells.iter().map(|c| c.cell.name.len()).max().unwrap_or(4).max(4);
        let _ = writeln!(
            out,
            "{:<width$}  {:<12}  {:>15}  {:>15}  {:>15}  {:>15}",
            "cell", "task", "acc%", "f1", "recall", "precision"
        );
        for c in &self.cells {
            match c.summary() {
                Ok(rows) => {
                    for t in rows {
                        let _ = writeln!(
                            out,
                            "{:<width$}  {:<12}  {:>15}  {:>15}  {:>15}  {:>15}",
                            c.cell.name,
                            t.task,
                            t.accuracy.display(2),
                            t.f1.display(4),
                            t.recall.display(4),
                            t.precision.display(4)
                        );
                    }
                }
                Err(e) => {
                    let _ = writeln!(out, "{:<width$}  summary unavailable: {e}", c.cell.name);
                }
            }
        }
        let _ = writeln!(out);
        for c in &self.cells {
            let show = |m: Option<MeanStd>| m.map_or_else(|| "n/a".to_string(), |m| m.display(4));
            let _ = writeln!(
                out,
                "{:<width$}  mean f1 {}  silhouette {}  seeds ok {}/{}",
                c.cell.name,
                show(c.mean_f1()),
                show(c.silhouette()),
                c.successes().count(),
                c.runs.len()
            );
            for (seed, err) in c.failures() {
                let _ = writeln!(out, "{:<width$}  seed {seed} failed: {err}", c.cell.name);
            }
        }
        let _ = writeln!(out, "splits shared across cells: {}", self.splits_shared());
        out
    }
}

fn pick<'b>(bags: &'b [FeatureBag], p: &Partition, s: Split) -> Vec<&'b FeatureBag> {
    p.get(s).iter().map(|&i| &bags[i]).collect()
}

fn run_cell(
    setup: &AblationSetup<'_>,
    cell: &Cell,
    seed: u64,
    partition: &Partition,
    progress: &mut dyn FnMut(&str),
) -> Result<SeedRun> {
    let spec = setup.spec;
    let cfg = cell.configure(&setup.model);
    let train_bags = pick(setup.bags, partition, Split::Train);
    let val_bags = pick(setup.bags, partition, Split::Val);
    let test_bags = pick(setup.bags, partition, Split::Test);
    let train_set = examples(train_bags.iter().copied(), spec, cfg.use_decoder)?;
    let val_set = examples(val_bags.iter().copied(), spec, cfg.use_decoder)?;
    let train_cfg = TrainConfig {
        seed,
        ..setup.train.clone()
    };
    let run_dir = match &setup.run_root {
        Some(root) => {
            let snapshot = serde_json::json!({
                "cell": cell,
                "seed": seed,
                "model": cfg.to_kv(),
                "train": train_cfg,
            });
            let dir = root.join(&cell.name).join(format!("seed-{seed}"));
            Some(RunDir::create(&dir, &serde_json::to_string_pretty(&snapshot)?)?)
        }
        None => None,
    };
    let meta = spec.to_json();
    let mut model = Mecformer::new(cfg, seed)?;
    let outcome = train(&mut model, &train_set, &val_set, &train_cfg, |rec, m| {
        progress(&format!(
            "{} seed {seed} epoch {}: train {:.4} val {:.4}{}",
            cell.name,
            rec.epoch,
            rec.train_loss,
            rec.val_loss,
            if rec.improved { " *" } else { "" }
        ));
        match &run_dir {
            Some(d) => d.record_epoch(rec, m, &meta),
            None => Ok(()),
        }
    })?;
    let (_, metrics) = evaluate(&model, spec, test_bags.iter().copied())?;
    let embeddings = export_embeddings(&model, test_bags.iter().copied())?;
    let labels: Vec<usize> = embeddings.iter().map(|e| e.task).collect();
    let points: Vec<Vec<f64>> = embeddings.iter().map(|e| e.values.clone()).collect();
    let silhouette = if spec.task_count() > 1 {
        Some(silhouette(&points, &labels)?)
    } else {
        None
    };
    if let Some(d) = &run_dir {
        d.write_text("test_metrics.json", &metrics.to_json())?;
        d.write_text("embeddings.csv", &super::embeddings_to_csv(&embeddings)?)?;
    }
    Ok(SeedRun {
        seed,
        fingerprint: partition.fingerprint(setup.bags),
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.history.len(),
        metrics,
        silhouette,
    })
}

/// Runs every cell once per seed. A failing cell is recorded and the
/// remaining cells still run; only setup problems abort.
pub fn run_ablation(
    setup: &AblationSetup<'_>,
    cells: &[Cell],
    progress: &mut dyn FnMut(&str),
) -> Result<AblationReport> {
    if cells.is_empty() || setup.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one cell and one seed".into()));
    }
    setup.model.validate()?;
    setup.train.validate()?;
    let partitions = setup
        .seeds
        .iter()
        .map(|&s| split(setup.bags, setup.fractions, s))
        .collect::<Result<Vec<_>>>()?;
    let splits = setup
        .seeds
        .iter()
        .zip(&partitions)
        .map(|(&s, p)| (s, p.fingerprint(setup.bags)))
        .collect();
    let cells = cells
        .iter()
        .map(|cell| CellOutcome {
            cell: cell.clone(),
            runs: setup
                .seeds
                .iter()
                .zip(&partitions)
                .map(|(&seed, p)| {
                    let result = run_cell(setup, cell, seed, p, progress).map_err(|e| e.to_string());
                    if let Err(e) = &result {
                        progress(&format!("{} seed {seed} failed: {e}", cell.name));
                    }
                    SeedOutcome { seed, result }
                })
                .collect(),
        })
        .collect();
    Ok(AblationReport { splits, cells })
}
