//! Expert consultation projection and the single/per-task baselines it is
//! compared against.
//!
//! Given a bag `x: N×d_f` from task `t`, the router scores every patch for
//! every expert, the target task's scores are sharpened (scaling) and its
//! pooled weight is boosted (shifting), and the resulting weights blend the
//! expert matrices into a task-specific projection added to the shared one.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{uniform_fan_in, Bound, Linear, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Which task a bag belongs to. Stored zero-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskIndicator {
    task: usize,
    count: usize,
}

impl TaskIndicator {
    pub fn new(task: usize, count: usize) -> Result<Self> {
        if task >= count {
            return Err(Error::Config(format!(
                "task index {task} out of range for {count} tasks"
            )));
        }
        Ok(TaskIndicator { task, count })
    }

    pub fn index(self) -> usize {
        self.task
    }

    pub fn count(self) -> usize {
        self.count
    }

    pub fn one_hot(self) -> Vec<f64> {
        (0..self.count)
            .map(|i| if i == self.task { 1.0 } else { 0.0 })
            .collect()
    }
}

/// How the target row is sharpened before mixing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingForm {
    /// Softmax over tasks with the target logit multiplied by γ.
    #[default]
    Normalized,
    /// Denominator `Σ_{i≠t} exp(w_i) + γ·w_t` exactly as printed; columns need
    /// not sum to one and may blow up. Kept for comparison only.
    Literal,
}

impl ScalingForm {
    pub fn as_str(self) -> &'static str {
        match self {
            ScalingForm::Normalized => "normalized",
            ScalingForm::Literal => "literal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "normalized" => Ok(ScalingForm::Normalized),
            "literal" => Ok(ScalingForm::Literal),
            other => Err(Error::Config(format!("unknown scaling form {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EcnParams {
    /// `T×d_f×d_model`, one expert per task.
    pub experts: ParamId,
    /// Common knowledge `d_f×d_model`.
    pub common: ParamId,
    pub fc1: Linear,
    pub fc2: Linear,
    pub tasks: usize,
    pub gamma: f64,
    pub beta: f64,
    pub scaling: ScalingForm,
}

#[derive(Clone, Copy, Debug)]
pub struct EcnSettings {
    pub tasks: usize,
    pub d_f: usize,
    pub d_model: usize,
    pub gamma: f64,
    pub beta: f64,
    pub router_bias: bool,
    pub scaling: ScalingForm,
}

impl EcnParams {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, s: &EcnSettings) -> Result<Self> {
        if s.tasks == 0 {
            return Err(Error::Config("ECN needs at least one task".into()));
        }
        for (name, v) in [("gamma", s.gamma), ("beta", s.beta)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        let experts = store.insert(
            "ecn.experts",
            uniform_fan_in(rng, &[s.tasks, s.d_f, s.d_model], s.d_f),
        );
        let common = store.insert("ecn.common", uniform_fan_in(rng, &[s.d_f, s.d_model], s.d_f));
        let fc1 = Linear::new(store, rng, "ecn.router.fc1", s.d_f, s.d_model, s.router_bias);
        let fc2 = Linear::new(store, rng, "ecn.router.fc2", s.d_model, s.tasks, s.router_bias);
        Ok(EcnParams {
            experts,
            common,
            fc1,
            fc2,
            tasks: s.tasks,
            gamma: s.gamma,
            beta: s.beta,
            scaling: s.scaling,
        })
    }
}

/// Intermediate weights of one ECN forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ExpertWeights {
    /// Router output `W`, `T×N`.
    pub raw: Var,
    /// Scaled `W̃`, `T×N`.
    pub scaled: Var,
    /// Shifted `w̄`, length `T`.
    pub shifted: Var,
}

/// Router scores `W = (FC2(ReLU(FC1(x))))ᵀ`, shape `T×N`.
pub fn route(tape: &mut Tape, p: &Bound, params: &EcnParams, x: Var) -> Result<Var> {
    let h = params.fc1.forward(tape, p, x)?;
    let h = tape.relu(h);
    let scores = params.fc2.forward(tape, p, h)?;
    tape.transpose(scores)
}

/// Sharpens the target row of `w: T×N` by `gamma` and normalises every column
/// over tasks.
pub fn scale_weights(
    tape: &mut Tape,
    w: Var,
    task: TaskIndicator,
    gamma: f64,
    form: ScalingForm,
) -> Result<Var> {
    let (t, n) = tape.value(w).dims2()?;
    if t != task.count() {
        return Err(Error::shape("scale_weights", &[t, n], &[task.count(), n]));
    }
    let mut factors = Tensor::full(&[t, n], 1.0);
    for j in 0..n {
        factors.data_mut()[task.index() * n + j] = gamma;
    }
    let logits = tape.mul_const(w, factors)?;
    match form {
        ScalingForm::Normalized => tape.softmax(logits, 0),
        ScalingForm::Literal => {
            let numer = tape.exp(logits);
            let mut others = Tensor::full(&[t, n], 1.0);
            for j in 0..n {
                others.data_mut()[task.index() * n + j] = 0.0;
            }
            let e = tape.exp(w);
            let e = tape.mul_const(e, others)?;
            let rest = tape.sum(e, 0)?;
            let target = tape.slice(w, 0, task.index(), 1)?;
            let target = tape.reshape(target, &[n])?;
            let target = tape.scale(target, gamma);
            let denom = tape.add(rest, target)?;
            let denom = tape.reshape(denom, &[1, n])?;
            let ones = tape.constant(Tensor::full(&[t, 1], 1.0));
            let denom = tape.matmul(ones, denom)?;
            tape.div(numer, denom)
        }
    }
}

/// `w̄_i = mean_j W̃_ij + β·[i = t]`.
pub fn shift_weights(tape: &mut Tape, w_tilde: Var, task: TaskIndicator, beta: f64) -> Result<Var> {
    let pooled = tape.mean(w_tilde, 1)?;
    let shift: Vec<f64> = task.one_hot().into_iter().map(|v| v * beta).collect();
    tape.add_const(pooled, &Tensor::new(vec![task.count()], shift)?)
}

/// `θ*_p = θ_p + Σ_i w̄_i·τ_i`.
pub fn consulted_projection(tape: &mut Tape, p: &Bound, params: &EcnParams, w_bar: Var) -> Result<Var> {
    let experts = p[params.experts];
    let shape = tape.shape(experts).to_vec();
    let (t, d_f, d_model) = (shape[0], shape[1], shape[2]);
    if tape.value(w_bar).numel() != t {
        return Err(Error::shape("consult", tape.shape(w_bar), &[t]));
    }
    let flat = tape.reshape(experts, &[t, d_f * d_model])?;
    let row = tape.reshape(w_bar, &[1, t])?;
    let mixed = tape.matmul(row, flat)?;
    let mixed = tape.reshape(mixed, &[d_f, d_model])?;
    tape.add(p[params.common], mixed)
}

/// `v⁰ = x·θ*_p` (no bias).
pub fn consult(tape: &mut Tape, p: &Bound, params: &EcnParams, x: Var, w_bar: Var) -> Result<Var> {
    let theta = consulted_projection(tape, p, params, w_bar)?;
    tape.matmul(x, theta)
}

/// Full ECN projection of a bag.
pub fn project_ecn(
    tape: &mut Tape,
    p: &Bound,
    params: &EcnParams,
    x: Var,
    task: TaskIndicator,
) -> Result<(Var, ExpertWeights)> {
    let d_f = tape.shape(p[params.common])[0];
    let xs = tape.shape(x);
    if xs.len() != 2 || xs[1] != d_f {
        return Err(Error::shape("ecn", xs, &[xs[0], d_f]));
    }
    if task.count() != params.tasks {
        return Err(Error::Config(format!(
            "task indicator has {} tasks, ECN has {}",
            task.count(),
            params.tasks
        )));
    }
    let raw = route(tape, p, params, x)?;
    let scaled = scale_weights(tape, raw, task, params.gamma, params.scaling)?;
    let shifted = shift_weights(tape, scaled, task, params.beta)?;
    let v0 = consult(tape, p, params, x, shifted)?;
    Ok((
        v0,
        ExpertWeights {
            raw,
            scaled,
            shifted,
        },
    ))
}

/// Projection layer variants compared in the ablation.
#[derive(Clone, Debug)]
pub enum Projection {
    /// One shared linear map for all tasks.
    Single(Linear),
    /// One linear map per task, selected by the task indicator.
    PerTask(Vec<Linear>),
    Ecn(EcnParams),
}

impl Projection {
    pub fn single(store: &mut ParamStore, rng: &mut ChaCha8Rng, d_f: usize, d_model: usize) -> Self {
        Projection::Single(Linear::new(store, rng, "proj.p1", d_f, d_model, false))
    }

    pub fn per_task(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        tasks: usize,
        d_f: usize,
        d_model: usize,
    ) -> Self {
        Projection::PerTask(
            (0..tasks)
                .map(|t| Linear::new(store, rng, &format!("proj.pt.{t}"), d_f, d_model, false))
                .collect(),
        )
    }

    /// `v⁰` for a bag. `task` is required by the per-task and ECN variants.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        task: Option<TaskIndicator>,
    ) -> Result<Var> {
        match self {
            Projection::Single(lin) => lin.forward(tape, p, x),
            Projection::PerTask(maps) => {
                let task = task.ok_or_else(|| {
                    Error::Contract("per-task projection needs a task indicator".into())
                })?;
                let lin = maps.get(task.index()).ok_or_else(|| {
                    Error::Config(format!("no projection for task {}", task.index()))
                })?;
                lin.forward(tape, p, x)
            }
            Projection::Ecn(params) => {
                let task = task
                    .ok_or_else(|| Error::Contract("ECN needs a task indicator".into()))?;
                Ok(project_ecn(tape, p, params, x, task)?.0)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::tensor::gradcheck::{self, random_tensor};

    fn settings(tasks: usize, d_f: usize, d_model: usize) -> EcnSettings {
        EcnSettings {
            tasks,
            d_f,
            d_model,
            gamma: 5.0,
            beta: 5.0,
            router_bias: true,
            scaling: ScalingForm::Normalized,
        }
    }

    fn build(s: &EcnSettings, seed: u64) -> (ParamStore, EcnParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = EcnParams::new(&mut store, &mut rng, s).unwrap();
        (store, params)
    }

    fn scaled(w: &Tensor, task: usize, gamma: f64) -> Tensor {
        let mut tape = Tape::new();
        let wv = tape.constant(w.clone());
        let ind = TaskIndicator::new(task, w.rows()).unwrap();
        let s = scale_weights(&mut tape, wv, ind, gamma, ScalingForm::Normalized).unwrap();
        tape.value(s).clone()
    }

    fn shifted(w_tilde: &Tensor, task: usize, beta: f64) -> Vec<f64> {
        let mut tape = Tape::new();
        let wv = tape.constant(w_tilde.clone());
        let ind = TaskIndicator::new(task, w_tilde.rows()).unwrap();
        let s = shift_weights(&mut tape, wv, ind, beta).unwrap();
        tape.value(s).data().to_vec()
    }

    fn scalar_softmax(logits: &[f64]) -> Vec<f64> {
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        logits.iter().map(|l| l.exp() / z).collect()
    }

    #[test]
    fn route_zero_input_zero_bias_is_zero() {
        let (mut store, params) = build(&settings(3, 4, 6), 0);
        for b in [params.fc1.bias.unwrap(), params.fc2.bias.unwrap()] {
            *store.get_mut(b) = Tensor::zeros(store.get(b).shape());
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[5, 4]));
        let w = route(&mut tape, &p, &params, x).unwrap();
        assert_eq!(tape.value(w), &Tensor::zeros(&[3, 5]));
    }

    #[test]
    fn route_matches_explicit_two_layer_computation() {
        let (store, params) = build(&settings(3, 4, 6), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&mut rng, &[1, 4]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let w = route(&mut tape, &p, &params, xv).unwrap();
        assert_eq!(tape.shape(w), &[3, 1]);

        let w1 = store.get(params.fc1.weight);
        let b1 = store.get(params.fc1.bias.unwrap());
        let w2 = store.get(params.fc2.weight);
        let b2 = store.get(params.fc2.bias.unwrap());
        let hidden: Vec<f64> = (0..6)
            .map(|c| ((0..4).map(|k| x.at(0, k) * w1.at(k, c)).sum::<f64>() + b1.data()[c]).max(0.0))
            .collect();
        for t in 0..3 {
            let expected = (0..6).map(|c| hidden[c] * w2.at(c, t)).sum::<f64>() + b2.data()[t];
            assert!((tape.value(w).at(t, 0) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn route_rejects_wrong_feature_dim() {
        let (store, params) = build(&settings(2, 4, 6), 1);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[3, 5]));
        assert!(matches!(route(&mut tape, &p, &params, x), Err(Error::Shape { .. })));
    }

    #[test]
    fn scaling_examples() {
        let w = Tensor::from_rows(&[vec![0.0], vec![0.0]]).unwrap();
        assert_eq!(scaled(&w, 0, 5.0).data(), &[0.5, 0.5]);

        let w = Tensor::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let e5 = 5f64.exp();
        assert!((scaled(&w, 0, 5.0).data()[0] - e5 / (e5 + 1.0)).abs() < 1e-15);

        let w = Tensor::from_rows(&[vec![0.1, 0.2], vec![0.3, -0.1], vec![0.0, 0.0]]).unwrap();
        let s = scaled(&w, 1, 5.0);
        let c0 = scalar_softmax(&[0.1, 1.5, 0.0]);
        let c1 = scalar_softmax(&[0.2, -0.5, 0.0]);
        for t in 0..3 {
            assert!((s.at(t, 0) - c0[t]).abs() < 1e-15);
            assert!((s.at(t, 1) - c1[t]).abs() < 1e-15);
        }
    }

    #[test]
    fn literal_scaling_uses_unexponentiated_target_in_denominator() {
        let w = Tensor::from_rows(&[vec![1.0], vec![0.5]]).unwrap();
        let mut tape = Tape::new();
        let wv = tape.constant(w);
        let ind = TaskIndicator::new(0, 2).unwrap();
        let s = scale_weights(&mut tape, wv, ind, 5.0, ScalingForm::Literal).unwrap();
        let denom = 0.5f64.exp() + 5.0;
        let got = tape.value(s).data();
        assert!((got[0] - 5f64.exp() / denom).abs() < 1e-12);
        assert!((got[1] - 0.5f64.exp() / denom).abs() < 1e-12);
    }

    #[test]
    fn shifting_examples() {
        let wt = Tensor::from_rows(&[vec![0.7, 0.5], vec![0.3, 0.5]]).unwrap();
        let wb = shifted(&wt, 0, 5.0);
        assert!((wb[0] - 5.6).abs() < 1e-12 && (wb[1] - 0.4).abs() < 1e-12);

        let single = scaled(&Tensor::from_rows(&[vec![0.3, -2.0, 1.0]]).unwrap(), 0, 5.0);
        assert_eq!(shifted(&single, 0, 5.0), vec![6.0]);

        let wt = scaled(&Tensor::from_rows(&[vec![0.3, -2.0], vec![1.0, 0.0], vec![0.2, 0.2]]).unwrap(), 2, 5.0);
        let total: f64 = shifted(&wt, 2, 0.0).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn consult_identity_and_zero_experts() {
        let s = settings(1, 3, 3);
        let (mut store, params) = build(&s, 3);
        *store.get_mut(params.common) = Tensor::zeros(&[3, 3]);
        *store.get_mut(params.experts) = Tensor::eye(3).reshaped(&[1, 3, 3]).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.0, 3.0, 1.0]]).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let wb = tape.constant(Tensor::new(vec![1], vec![2.0]).unwrap());
        let v0 = consult(&mut tape, &p, &params, xv, wb).unwrap();
        assert_eq!(tape.value(v0), &x.scale(2.0));

        let s = settings(3, 3, 4);
        let (mut store, params) = build(&s, 4);
        *store.get_mut(params.experts) = Tensor::zeros(&[3, 3, 4]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let wb = tape.constant(Tensor::new(vec![3], vec![7.0, -1.0, 0.2]).unwrap());
        let v0 = consult(&mut tape, &p, &params, xv, wb).unwrap();
        assert_eq!(tape.value(v0), &x.matmul(store.get(params.common)).unwrap());
    }

    #[test]
    fn consult_matches_dense_recomputation() {
        let s = settings(3, 4, 5);
        let (store, params) = build(&s, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_tensor(&mut rng, &[6, 4]);
        let wbar = [5.2, 0.3, 0.5];
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let wb = tape.constant(Tensor::new(vec![3], wbar.to_vec()).unwrap());
        let v0 = consult(&mut tape, &p, &params, xv, wb).unwrap();

        let experts = store.get(params.experts).data();
        let common = store.get(params.common);
        let mut theta = vec![0.0; 20];
        for (k, th) in theta.iter_mut().enumerate() {
            *th = common.data()[k] + (0..3).map(|i| wbar[i] * experts[i * 20 + k]).sum::<f64>();
        }
        for r in 0..6 {
            for c in 0..5 {
                let expected: f64 = (0..4).map(|k| x.at(r, k) * theta[k * 5 + c]).sum();
                assert!((tape.value(v0).at(r, c) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_task_reduces_to_closed_form() {
        let s = settings(1, 4, 5);
        let (store, params) = build(&s, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_tensor(&mut rng, &[7, 4]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let (v0, _) = project_ecn(&mut tape, &p, &params, xv, TaskIndicator::new(0, 1).unwrap()).unwrap();
        let tau = store.get(params.experts).reshaped(&[4, 5]).unwrap();
        let theta = store.get(params.common).add(&tau.scale(1.0 + s.beta)).unwrap();
        assert!(tape.value(v0).max_abs_diff(&x.matmul(&theta).unwrap()) < 1e-12);
    }

    #[test]
    fn target_dominates_and_columns_normalise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let t = rng.gen_range(1..=5);
            let n = rng.gen_range(1..=8);
            let w = random_tensor(&mut rng, &[t, n]).scale(4.0);
            let task = rng.gen_range(0..t);
            let s = scaled(&w, task, 5.0);
            for j in 0..n {
                let col: f64 = (0..t).map(|i| s.at(i, j)).sum();
                assert!((col - 1.0).abs() < 1e-9);
                assert!((0..t).all(|i| (0.0..=1.0).contains(&s.at(i, j))));
            }
            let wb = shifted(&s, task, 5.0);
            let argmax = (0..t).max_by(|&a, &b| wb[a].total_cmp(&wb[b])).unwrap();
            assert_eq!(argmax, task);
            assert!((0.0..=1.0).contains(&(wb[task] - 5.0)));
        }
    }

    #[test]
    fn larger_gamma_never_lowers_positive_target_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..200 {
            let t = rng.gen_range(2..=4);
            let n = rng.gen_range(1..=5);
            let task = rng.gen_range(0..t);
            let mut w = random_tensor(&mut rng, &[t, n]);
            for j in 0..n {
                w.data_mut()[task * n + j] = rng.gen_range(0.01..2.0);
            }
            let (g1, g2) = (rng.gen_range(0.5..5.0), rng.gen_range(5.0..10.0));
            let (a, b) = (scaled(&w, task, g1), scaled(&w, task, g2));
            for j in 0..n {
                assert!(b.at(task, j) >= a.at(task, j));
            }
        }
    }

    #[test]
    fn ecn_is_permutation_equivariant_over_patches() {
        let s = settings(3, 4, 6);
        let (store, params) = build(&s, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_tensor(&mut rng, &[5, 4]);
        let perm = [4usize, 2, 0, 1, 3];
        let xp = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let run = |input: &Tensor| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let xv = tape.constant(input.clone());
            let (v0, _) = project_ecn(&mut tape, &p, &params, xv, TaskIndicator::new(1, 3).unwrap()).unwrap();
            tape.value(v0).clone()
        };
        let (a, b) = (run(&x), run(&xp));
        for (new_row, &old_row) in perm.iter().enumerate() {
            for c in 0..6 {
                assert!((b.at(new_row, c) - a.at(old_row, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ecn_gradients_match_finite_differences() {
        let s = settings(3, 3, 4);
        let (store, params) = build(&s, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = random_tensor(&mut rng, &[4, 3]);
        let mut inputs = vec![x];
        inputs.extend(store.iter().map(|(_, t)| t.clone()));
        for form in [ScalingForm::Normalized, ScalingForm::Literal] {
            let params = EcnParams { scaling: form, ..params };
            let err = gradcheck::check(
                &inputs,
                |t, v| {
                    let bound = Bound::from_vars(v[1..].to_vec());
                    let ind = TaskIndicator::new(2, 3)?;
                    let (v0, _) = project_ecn(t, &bound, &params, v[0], ind)?;
                    let sq = t.mul(v0, v0)?;
                    Ok(t.sum_all(sq))
                },
                None,
            )
            .unwrap();
            assert!(err < 1e-4, "{form:?}: {err}");
        }
    }

    #[test]
    fn changing_task_moves_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for seed in 0..20 {
            let s = settings(3, 4, 5);
            let (store, params) = build(&s, 100 + seed);
            let x = random_tensor(&mut rng, &[6, 4]);
            let theta = |task: usize| {
                let mut tape = Tape::new();
                let p = store.bind(&mut tape, false);
                let xv = tape.constant(x.clone());
                let ind = TaskIndicator::new(task, 3).unwrap();
                let (_, w) = project_ecn(&mut tape, &p, &params, xv, ind).unwrap();
                let th = consulted_projection(&mut tape, &p, &params, w.shifted).unwrap();
                tape.value(th).clone()
            };
            let experts = store.get(params.experts);
            let tau = |i: usize| Tensor::new(vec![20], experts.data()[i * 20..(i + 1) * 20].to_vec()).unwrap();
            let mut min_dist = f64::INFINITY;
            for i in 0..3 {
                for j in i + 1..3 {
                    min_dist = min_dist.min(tau(i).sub(&tau(j)).unwrap().frobenius());
                }
            }
            let delta = theta(0).sub(&theta(1)).unwrap().frobenius();
            assert!(delta >= (s.beta - 1.0) * min_dist - 1.0, "{delta} vs {min_dist}");
        }
    }

    #[test]
    fn baselines() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut store = ParamStore::new();
        let p1 = Projection::single(&mut store, &mut rng, 3, 4);
        let pt = Projection::per_task(&mut store, &mut rng, 2, 3, 4);
        let x = random_tensor(&mut rng, &[5, 3]);

        let run = |store: &ParamStore, proj: &Projection, input: &Tensor, task: Option<usize>| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let xv = tape.constant(input.clone());
            let ind = task.map(|t| TaskIndicator::new(t, 2).unwrap());
            proj.forward(&mut tape, &p, xv, ind).map(|v| tape.value(v).clone())
        };
        assert_eq!(run(&store, &p1, &Tensor::zeros(&[2, 3]), None).unwrap(), Tensor::zeros(&[2, 4]));
        assert!(matches!(run(&store, &pt, &x, None), Err(Error::Contract(_))));

        let before = run(&store, &pt, &x, Some(1)).unwrap();
        let Projection::PerTask(maps) = &pt else { unreachable!() };
        let first = maps[0].weight;
        let mut perturbed = store.clone();
        for v in perturbed.get_mut(first).data_mut() {
            *v += 1.0;
        }
        assert_eq!(run(&perturbed, &pt, &x, Some(1)).unwrap(), before);
        assert_ne!(run(&perturbed, &pt, &x, Some(0)).unwrap(), run(&store, &pt, &x, Some(0)).unwrap());
    }

    #[test]
    fn per_task_with_one_task_equals_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut store = ParamStore::new();
        let p1 = Projection::single(&mut store, &mut rng, 3, 4);
        let pt = Projection::per_task(&mut store, &mut rng, 1, 3, 4);
        let (Projection::Single(a), Projection::PerTask(b)) = (&p1, &pt) else { unreachable!() };
        let w = store.get(a.weight).clone();
        *store.get_mut(b[0].weight) = w;
        let x = random_tensor(&mut rng, &[4, 3]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x);
        let ya = p1.forward(&mut tape, &p, xv, None).unwrap();
        let yb = pt.forward(&mut tape, &p, xv, Some(TaskIndicator::new(0, 1).unwrap())).unwrap();
        assert_eq!(tape.value(ya), tape.value(yb));
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let mut s = settings(2, 3, 4);
        s.beta = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(EcnParams::new(&mut ParamStore::new(), &mut rng, &s).is_err());
        s.beta = 5.0;
        s.tasks = 0;
        assert!(EcnParams::new(&mut ParamStore::new(), &mut rng, &s).is_err());
        assert!(TaskIndicator::new(2, 2).is_err());
    }
}
