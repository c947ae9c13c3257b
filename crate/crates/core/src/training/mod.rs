//! Per-bag training with early stopping on validation loss.

pub mod optim;
mod run_dir;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{Adam, Lookahead, Optimizer, OptimizerKind, Radam};
pub use run_dir::RunDir;

use crate::data::{FeatureBag, TaskSpec};
use crate::ecn::TaskIndicator;
use crate::error::{Error, Result};
use crate::model::{Mecformer, Target};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub lookahead_k: usize,
    pub lookahead_alpha: f64,
    pub optimizer: OptimizerKind,
    /// Bags whose gradients are averaged into one optimizer step.
    pub accumulate: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-5,
            epochs: 200,
            patience: 5,
            seed: 0,
            lookahead_k: 5,
            lookahead_alpha: 0.5,
            optimizer: OptimizerKind::RadamLookahead,
            accumulate: 1,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lr.is_finite() && self.lr > 0.0) {
            out.push(format!("lr must be finite and > 0, got {}", self.lr));
        }
        if self.epochs == 0 {
            out.push("epochs must be at least 1".into());
        }
        if self.patience == 0 {
            out.push("patience must be at least 1".into());
        }
        if self.lookahead_k == 0 {
            out.push("lookahead_k must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.lookahead_alpha) {
            out.push(format!("lookahead_alpha {} must be in [0, 1]", self.lookahead_alpha));
        }
        if self.accumulate == 0 {
            out.push("accumulate must be at least 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TargetSeq {
    Tokens(Vec<usize>),
    Category(usize),
}

/// A bag prepared for the model.
#[derive(Clone, Debug)]
pub struct Example {
    pub slide_id: String,
    pub x: Tensor,
    pub task: TaskIndicator,
    pub target: TargetSeq,
}

impl Example {
    pub fn from_bag(bag: &FeatureBag, spec: &TaskSpec, use_decoder: bool) -> Result<Self> {
        let task = TaskIndicator::new(bag.task_id, spec.task_count())?;
        let target = if use_decoder {
            TargetSeq::Tokens(spec.target_tokens(&bag.label_term)?)
        } else {
            let cat = spec.resolve(bag.task_id, &bag.label_term).ok_or_else(|| {
                Error::Ingestion(format!("label {:?} is not a category of its task", bag.label_term))
            })?;
            TargetSeq::Category(spec.global_category(bag.task_id, cat))
        };
        Ok(Example {
            slide_id: bag.slide_id.clone(),
            x: bag.to_tensor(),
            task,
            target,
        })
    }

    pub fn target(&self) -> Target<'_> {
        match &self.target {
            TargetSeq::Tokens(t) => Target::Tokens(t),
            TargetSeq::Category(c) => Target::Category(*c),
        }
    }
}

pub fn examples<'a, I>(bags: I, spec: &TaskSpec, use_decoder: bool) -> Result<Vec<Example>>
where
    I: IntoIterator<Item = &'a FeatureBag>,
{
    bags.into_iter()
        .map(|b| Example::from_bag(b, spec, use_decoder))
        .collect()
}

/// Mean loss over examples.
pub fn mean_loss(model: &Mecformer, data: &[Example]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("cannot average a loss over no examples".into()));
    }
    let mut total = 0.0;
    for ex in data {
        total += model.loss_value(&ex.x, ex.task, ex.target())?;
    }
    Ok(total / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub improved: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best_params: ParamStore,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Stop rule: halt once `patience` consecutive epochs fail to improve on the
/// best validation loss.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    waited: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            waited: 0,
        }
    }

    /// Records an epoch's validation loss; returns `(improved, stop)`.
    pub fn observe(&mut self, val_loss: f64) -> (bool, bool) {
        let improved = self.best.is_none_or(|b| val_loss < b);
        if improved {
            self.best = Some(val_loss);
            self.waited = 0;
        } else {
            self.waited += 1;
        }
        (improved, self.waited >= self.patience)
    }
}

/// Trains `model` in place, leaving the best-validation parameters in it.
/// `on_epoch` sees every epoch's record and current model, e.g. to persist them.
pub fn train<F>(
    model: &mut Mecformer,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochRecord, &Mecformer) -> Result<()>,
{
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Contract("training needs non-empty train and validation sets".into()));
    }
    let mut opt = Optimizer::new(cfg.optimizer, model.params(), cfg.lookahead_k, cfg.lookahead_alpha)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut history = Vec::new();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut pending: Option<Vec<Tensor>> = None;
        let mut in_batch = 0;
        for (pos, &i) in order.iter().enumerate() {
            let ex = &train_set[i];
            let (loss, grads) = model.loss_and_grads(&ex.x, ex.task, ex.target())?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {loss} at epoch {epoch}, bag {:?}",
                    ex.slide_id
                )));
            }
            total += loss;
            pending = Some(match pending {
                None => grads,
                Some(acc) => acc
                    .iter()
                    .zip(&grads)
                    .map(|(a, g)| a.add(g))
                    .collect::<Result<_>>()?,
            });
            in_batch += 1;
            if in_batch == cfg.accumulate || pos + 1 == order.len() {
                let mut g = pending.take().expect("at least one gradient");
                if in_batch > 1 {
                    g = g.iter().map(|t| t.scale(1.0 / in_batch as f64)).collect();
                }
                opt.step(model.params_mut(), &g, cfg.lr)?;
                in_batch = 0;
            }
        }
        let train_loss = total / train_set.len() as f64;
        let val_loss = mean_loss(model, val_set)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss {val_loss} at epoch {epoch}")));
        }
        let (improved, stop) = stopper.observe(val_loss);
        if improved {
            best = Some((epoch, val_loss, model.params().clone()));
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            improved,
        };
        on_epoch(&record, model)?;
        history.push(record);
        if stop {
            stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    let (best_epoch, best_val_loss, best_params) = best.expect("at least one epoch ran");
    model.params_mut().copy_from(&best_params)?;
    Ok(TrainOutcome {
        best_params,
        best_epoch,
        best_val_loss,
        history,
        stopped_early,
    })
}

#[cfg(test)]
mod tests;
