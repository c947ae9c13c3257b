//! Seeded generator of multi-task feature bags.
//!
//! Every task category owns a prototype vector. A bag of `N` patches holds
//! `⌈ρN⌉` signal patches (prototype plus Gaussian noise) scattered among
//! background patches (a background vector shared by all tasks plus the same
//! noise).

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{FeatureBag, SplitFractions, TaskSpec};
use crate::error::{Error, Result};

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub tasks: TaskSpec,
    pub d_f: usize,
    pub signal_fraction: f64,
    pub noise_std: f64,
    pub bags_per_class: usize,
    pub min_patches: usize,
    pub max_patches: usize,
    pub seed: u64,
    /// `[task][category][d_f]`; drawn from the seed when absent.
    #[serde(default)]
    pub prototypes: Option<Vec<Vec<Vec<f64>>>>,
    /// Coordinate std of generated prototypes.
    #[serde(default = "one")]
    pub prototype_scale: f64,
    /// Coordinate std of the shared background vector; 0 centres background
    /// patches on the origin.
    #[serde(default = "one")]
    pub background_scale: f64,
    #[serde(default)]
    pub split: SplitFractions,
}

impl SyntheticSpec {
    /// Default benchmark shape on a given task spec: d_f 64, 200 bags per
    /// class, 50 to 150 patches, 15% signal, unit noise.
    pub fn benchmark(tasks: TaskSpec, seed: u64) -> Self {
        SyntheticSpec {
            tasks,
            d_f: 64,
            signal_fraction: 0.15,
            noise_std: 1.0,
            bags_per_class: 200,
            min_patches: 50,
            max_patches: 150,
            seed,
            prototypes: None,
            prototype_scale: 1.0,
            background_scale: 1.0,
            split: SplitFractions::default(),
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.d_f == 0 {
            out.push("d_f must be at least 1".into());
        }
        if !(self.signal_fraction > 0.0 && self.signal_fraction <= 1.0) {
            out.push(format!("signal_fraction {} must be in (0, 1]", self.signal_fraction));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            out.push(format!("noise_std {} must be finite and >= 0", self.noise_std));
        }
        for (name, v) in [("prototype_scale", self.prototype_scale), ("background_scale", self.background_scale)] {
            if !(v.is_finite() && v >= 0.0) {
                out.push(format!("{name} {v} must be finite and >= 0"));
            }
        }
        if self.bags_per_class == 0 {
            out.push("bags_per_class must be at least 1".into());
        }
        if self.min_patches == 0 || self.min_patches > self.max_patches {
            out.push(format!(
                "patch range {}..={} is empty or starts at 0",
                self.min_patches, self.max_patches
            ));
        }
        if self.signal_fraction * (self.min_patches as f64) < 1.0 {
            out.push(format!(
                "signal_fraction {} times min_patches {} is below one patch",
                self.signal_fraction, self.min_patches
            ));
        }
        if let Err(e) = self.split.validate() {
            out.push(e.to_string());
        }
        if let Some(protos) = &self.prototypes {
            let shape_ok = protos.len() == self.tasks.task_count()
                && protos.iter().zip(self.tasks.tasks()).all(|(p, t)| {
                    p.len() == t.categories.len() && p.iter().all(|v| v.len() == self.d_f)
                });
            if !shape_ok {
                out.push("prototypes must be [task][category][d_f] matching the task spec".into());
            } else if !pairwise_distinct(&protos.iter().flatten().collect::<Vec<_>>()) {
                out.push("prototypes must be pairwise distinct".into());
            }
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

fn pairwise_distinct(vs: &[&Vec<f64>]) -> bool {
    vs.iter()
        .enumerate()
        .all(|(i, a)| vs[i + 1..].iter().all(|b| a != b))
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

/// Latent vectors used by the generator.
#[derive(Clone, Debug, PartialEq)]
pub struct Latents {
    pub prototypes: Vec<Vec<Vec<f64>>>,
    pub background: Vec<f64>,
}

fn draw_latents(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Latents {
    let prototypes = match &spec.prototypes {
        Some(p) => p.clone(),
        None => spec
            .tasks
            .tasks()
            .iter()
            .map(|t| {
                t.categories
                    .iter()
                    .map(|_| gaussian(rng, spec.d_f, spec.prototype_scale))
                    .collect()
            })
            .collect(),
    };
    let background = gaussian(rng, spec.d_f, spec.background_scale);
    Latents {
        prototypes,
        background,
    }
}

/// Prototypes and background the spec's seed produces.
pub fn latents(spec: &SyntheticSpec) -> Result<Latents> {
    spec.validate()?;
    Ok(draw_latents(spec, &mut ChaCha8Rng::seed_from_u64(spec.seed)))
}

/// Bags ordered by task, then category, then index. Pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<FeatureBag>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lat = draw_latents(spec, &mut rng);
    let d = spec.d_f;
    let mut bags = Vec::new();
    for (t, task) in spec.tasks.tasks().iter().enumerate() {
        for (c, cat) in task.categories.iter().enumerate() {
            let proto = &lat.prototypes[t][c];
            for k in 0..spec.bags_per_class {
                let n = rng.gen_range(spec.min_patches..=spec.max_patches);
                let n_signal = ((spec.signal_fraction * n as f64).ceil() as usize).min(n);
                let mut is_signal = vec![false; n];
                for i in sample(&mut rng, n, n_signal) {
                    is_signal[i] = true;
                }
                let mut features = Vec::with_capacity(n * d);
                for &signal in &is_signal {
                    let centre = if signal { proto } else { &lat.background };
                    for &mu in centre {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        features.push((mu + spec.noise_std * z) as f32);
                    }
                }
                bags.push(FeatureBag::new(
                    format!("{}-{}-{k:04}", task.name, cat.name),
                    t,
                    cat.term.clone(),
                    d,
                    features,
                )?);
            }
        }
    }
    Ok(bags)
}

fn mean_pool(bag: &FeatureBag) -> Vec<f64> {
    let d = bag.d_f();
    let mut m = vec![0.0; d];
    for row in bag.features().chunks_exact(d) {
        for (acc, &v) in m.iter_mut().zip(row) {
            *acc += f64::from(v);
        }
    }
    m.iter_mut().for_each(|v| *v /= bag.patches() as f64);
    m
}

/// Accuracy of a nearest-centroid classifier on mean-pooled bags, with
/// per-(task, term) centroids estimated from `train`. A learnability check
/// that needs no model.
pub fn nearest_centroid_accuracy(train: &[FeatureBag], test: &[FeatureBag]) -> f64 {
    let mut centroids: Vec<((usize, &str), Vec<f64>, usize)> = Vec::new();
    for bag in train {
        let pooled = mean_pool(bag);
        let key = (bag.task_id, bag.label_term.as_str());
        match centroids.iter_mut().find(|(k, _, _)| *k == key) {
            Some((_, sum, count)) => {
                sum.iter_mut().zip(&pooled).for_each(|(s, v)| *s += v);
                *count += 1;
            }
            None => centroids.push((key, pooled, 1)),
        }
    }
    for (_, sum, count) in &mut centroids {
        sum.iter_mut().for_each(|v| *v /= *count as f64);
    }
    let correct = test
        .iter()
        .filter(|bag| {
            let pooled = mean_pool(bag);
            let dist = |c: &[f64]| -> f64 { c.iter().zip(&pooled).map(|(a, b)| (a - b) * (a - b)).sum() };
            centroids
                .iter()
                .filter(|((t, _), _, _)| *t == bag.task_id)
                .min_by(|a, b| dist(&a.1).total_cmp(&dist(&b.1)))
                .is_some_and(|((_, term), _, _)| *term == bag.label_term)
        })
        .count();
    correct as f64 / test.len().max(1) as f64
}
