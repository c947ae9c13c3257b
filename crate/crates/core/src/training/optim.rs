//! RAdam with a Lookahead wrapper, and plain Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    RadamLookahead,
    Adam,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::RadamLookahead => "radam_lookahead",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "radam_lookahead" | "radam" => Ok(OptimizerKind::RadamLookahead),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

fn zeros_like(store: &ParamStore) -> Vec<Vec<f64>> {
    store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect()
}

fn check_grads(store: &ParamStore, grads: &[Tensor]) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            store.len()
        )));
    }
    for ((name, p), g) in store.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("optimizer step", p.shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {name}")));
        }
    }
    Ok(())
}

/// First and second moment buffers shared by Adam and RAdam.
#[derive(Clone, Debug)]
struct Moments {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Moments {
    fn new(store: &ParamStore) -> Self {
        Moments {
            m: zeros_like(store),
            v: zeros_like(store),
            step: 0,
        }
    }

    fn update(&mut self, grads: &[Tensor]) {
        self.step += 1;
        for ((m, v), g) in self.m.iter_mut().zip(&mut self.v).zip(grads) {
            for ((mi, vi), &gi) in m.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
            }
        }
    }
}

/// Variance rectification term, `None` while the variance estimate is
/// intractable (`ρ_t ≤ 5`).
pub fn rectification(step: u64) -> Option<f64> {
    let t = step as f64;
    let rho_inf = 2.0 / (1.0 - BETA2) - 1.0;
    let b2t = BETA2.powf(t);
    let rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
    (rho_t > 5.0).then(|| {
        ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt()
    })
}

#[derive(Clone, Debug)]
pub struct Radam {
    moments: Moments,
}

impl Radam {
    pub fn new(store: &ParamStore) -> Self {
        Radam {
            moments: Moments::new(store),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.moments.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        check_grads(store, grads)?;
        self.moments.update(grads);
        let t = self.moments.step as f64;
        let bc1 = 1.0 - BETA1.powf(t);
        let bc2 = 1.0 - BETA2.powf(t);
        let rect = rectification(self.moments.step);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let (m, v) = (&self.moments.m[i], &self.moments.v[i]);
            for ((p, &mi), &vi) in store.get_mut(id).data_mut().iter_mut().zip(m).zip(v) {
                let m_hat = mi / bc1;
                *p -= match rect {
                    Some(r) => lr * r * m_hat / ((vi / bc2).sqrt() + EPS),
                    None => lr * m_hat,
                };
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    moments: Moments,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Adam {
            moments: Moments::new(store),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        check_grads(store, grads)?;
        self.moments.update(grads);
        let t = self.moments.step as f64;
        let bc1 = 1.0 - BETA1.powf(t);
        let bc2 = 1.0 - BETA2.powf(t);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let (m, v) = (&self.moments.m[i], &self.moments.v[i]);
            for ((p, &mi), &vi) in store.get_mut(id).data_mut().iter_mut().zip(m).zip(v) {
                *p -= lr * (mi / bc1) / ((vi / bc2).sqrt() + EPS);
            }
        }
        Ok(())
    }
}

/// Slow weights that every `k` fast steps move `α` of the way towards the
/// fast weights, after which the fast weights restart from them.
#[derive(Clone, Debug)]
pub struct Lookahead {
    slow: Vec<Vec<f64>>,
    k: usize,
    alpha: f64,
    counter: usize,
}

impl Lookahead {
    pub fn new(store: &ParamStore, k: usize, alpha: f64) -> Result<Self> {
        if k == 0 || !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!(
                "lookahead needs k >= 1 and alpha in [0, 1], got k={k}, alpha={alpha}"
            )));
        }
        Ok(Lookahead {
            slow: store.iter().map(|(_, t)| t.data().to_vec()).collect(),
            k,
            alpha,
            counter: 0,
        })
    }

    /// Call once after every fast step. Returns true when a sync happened.
    pub fn after_step(&mut self, store: &mut ParamStore) -> bool {
        self.counter += 1;
        if self.counter % self.k != 0 {
            return false;
        }
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let fast = store.get_mut(id).data_mut();
            for (s, f) in self.slow[i].iter_mut().zip(fast.iter_mut()) {
                *s += self.alpha * (*f - *s);
                *f = *s;
            }
        }
        true
    }
}

#[derive(Clone, Debug)]
pub enum Optimizer {
    RadamLookahead(Radam, Lookahead),
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, store: &ParamStore, k: usize, alpha: f64) -> Result<Self> {
        Ok(match kind {
            OptimizerKind::RadamLookahead => {
                Optimizer::RadamLookahead(Radam::new(store), Lookahead::new(store, k, alpha)?)
            }
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(store)),
        })
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        match self {
            Optimizer::RadamLookahead(inner, la) => {
                inner.step(store, grads, lr)?;
                la.after_step(store);
                Ok(())
            }
            Optimizer::Adam(inner) => inner.step(store, grads, lr),
        }
    }
}
