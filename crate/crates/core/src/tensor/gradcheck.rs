//! Central finite-difference checks of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{OpKind, Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, zero when both vanish.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.frobenius().max(numeric.frobenius());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of a scalar function of several tensors.
pub fn numeric_gradients<F>(inputs: &[Tensor], f: &F, step: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };
    let mut work = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[k].shape());
        for i in 0..inputs[k].numel() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Tape gradients of a scalar function, optionally with a corrupted op.
pub fn analytic_gradients<F>(inputs: &[Tensor], f: &F, fault: Option<OpKind>) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_fault(kind);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let mut grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .map(|&v| grads.take(v).expect("param leaves always receive a gradient"))
        .collect())
}

/// Worst relative error over all inputs of `f`.
pub fn check<F>(inputs: &[Tensor], f: F, fault: Option<OpKind>) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(inputs, &f, fault)?;
    let numeric = numeric_gradients(inputs, &f, DEFAULT_STEP)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

/// Result of checking one op over many random shapes.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub cases: usize,
    pub worst_rel_error: f64,
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Projects an arbitrary output onto a fixed random direction so every output
/// element contributes to the scalar objective.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(&mut rng, tape.shape(out));
    let y = tape.mul_const(out, w)?;
    Ok(tape.sum_all(y))
}

type Case = Box<dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, CaseFn)>;
type CaseFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=4)
}

fn case_table() -> Vec<(&'static str, Case)> {
    vec![
        (
            "matmul",
            Box::new(|rng| {
                let (m, k, n) = (dim(rng), dim(rng), dim(rng));
                let ins = vec![random_tensor(rng, &[m, k]), random_tensor(rng, &[k, n])];
                let f: CaseFn = Box::new(|t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    project(t, y, 1)
                });
                (ins, f)
            }),
        ),
        (
            "matmul_nt",
            Box::new(|rng| {
                let (m, k, n) = (dim(rng), dim(rng), dim(rng));
                let ins = vec![random_tensor(rng, &[m, k]), random_tensor(rng, &[n, k])];
                let f: CaseFn = Box::new(|t, v| {
                    let y = t.matmul_nt(v[0], v[1])?;
                    project(t, y, 2)
                });
                (ins, f)
            }),
        ),
        elementwise("add", |t, a, b| t.add(a, b)),
        elementwise("sub", |t, a, b| t.sub(a, b)),
        elementwise("mul", |t, a, b| t.mul(a, b)),
        (
            "div",
            Box::new(|rng| {
                let s = [dim(rng), dim(rng)];
                let num = random_tensor(rng, &s);
                let den = random_tensor(rng, &s).map(|v| 1.5 + v);
                let f: CaseFn = Box::new(|t, v| {
                    let y = t.div(v[0], v[1])?;
                    project(t, y, 3)
                });
                (vec![num, den], f)
            }),
        ),
        (
            "add_row",
            Box::new(|rng| {
                let (r, c) = (dim(rng), dim(rng));
                let ins = vec![random_tensor(rng, &[r, c]), random_tensor(rng, &[c])];
                let f: CaseFn = Box::new(|t, v| {
                    let y = t.add_row(v[0], v[1])?;
                    project(t, y, 4)
                });
                (ins, f)
            }),
        ),
        unary("scale", |t, x| Ok(t.scale(x, -1.7))),
        unary("add_const", |t, x| {
            let c = Tensor::full(t.shape(x), 0.3);
            t.add_const(x, &c)
        }),
        unary("mul_const", |t, x| {
            let c = Tensor::full(t.shape(x), -0.6);
            t.mul_const(x, c)
        }),
        // Inputs are kept away from the kink at zero.
        (
            "relu",
            Box::new(|rng| {
                let s = [dim(rng), dim(rng)];
                let x = random_tensor(rng, &s).map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
                let f: CaseFn = Box::new(|t, v| {
                    let y = t.relu(v[0]);
                    project(t, y, 5)
                });
                (vec![x], f)
            }),
        ),
        unary("gelu", |t, x| Ok(t.gelu(x))),
        unary("exp", |t, x| Ok(t.exp(x))),
        unary("softmax_axis0", |t, x| t.softmax(x, 0)),
        unary("softmax_axis1", |t, x| t.softmax(x, 1)),
        (
            "layer_norm",
            Box::new(|rng| {
                let (r, c) = (dim(rng), dim(rng) + 1);
                let ins = vec![
                    random_tensor(rng, &[r, c]),
                    random_tensor(rng, &[c]),
                    random_tensor(rng, &[c]),
                ];
                let f: CaseFn = Box::new(|t, v| {
                    let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                    project(t, y, 6)
                });
                (ins, f)
            }),
        ),
        unary("sum_axis0", |t, x| t.sum(x, 0)),
        unary("mean_axis1", |t, x| t.mean(x, 1)),
        unary("sum_all", |t, x| Ok(t.sum_all(x))),
        unary("max_all", |t, x| Ok(t.max_all(x))),
        unary("transpose", |t, x| t.transpose(x)),
        unary("reshape", |t, x| {
            let n = t.value(x).numel();
            t.reshape(x, &[n])
        }),
        (
            "concat",
            Box::new(|rng| {
                let (r, c1, c2) = (dim(rng), dim(rng), dim(rng));
                let axis = rng.gen_range(0..2);
                let ins = if axis == 1 {
                    vec![random_tensor(rng, &[r, c1]), random_tensor(rng, &[r, c2])]
                } else {
                    vec![random_tensor(rng, &[c1, r]), random_tensor(rng, &[c2, r])]
                };
                let f: CaseFn = Box::new(move |t, v| {
                    let y = t.concat(&[v[0], v[1], v[0]], axis)?;
                    project(t, y, 7)
                });
                (ins, f)
            }),
        ),
        (
            "slice",
            Box::new(|rng| {
                let (r, c) = (dim(rng) + 1, dim(rng) + 1);
                let start = rng.gen_range(0..c - 1);
                let len = rng.gen_range(1..=c - start);
                let ins = vec![random_tensor(rng, &[r, c])];
                let f: CaseFn = Box::new(move |t, v| {
                    let y = t.slice(v[0], 1, start, len)?;
                    project(t, y, 8)
                });
                (ins, f)
            }),
        ),
        (
            "gather",
            Box::new(|rng| {
                let (r, c) = (dim(rng) + 1, dim(rng));
                let ids: Vec<usize> = (0..dim(rng) + 1).map(|_| rng.gen_range(0..r)).collect();
                let ins = vec![random_tensor(rng, &[r, c])];
                let f: CaseFn = Box::new(move |t, v| {
                    let y = t.gather_rows(v[0], &ids)?;
                    project(t, y, 9)
                });
                (ins, f)
            }),
        ),
        (
            "cross_entropy",
            Box::new(|rng| {
                let (r, c) = (dim(rng), dim(rng) + 1);
                let targets: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c)).collect();
                let ins = vec![random_tensor(rng, &[r, c]).scale(3.0)];
                let f: CaseFn = Box::new(move |t, v| t.cross_entropy(v[0], &targets));
                (ins, f)
            }),
        ),
    ]
}

fn unary(
    name: &'static str,
    op: fn(&mut Tape, Var) -> Result<Var>,
) -> (&'static str, Case) {
    (
        name,
        Box::new(move |rng| {
            let s = [dim(rng), dim(rng)];
            let f: CaseFn = Box::new(move |t, v| {
                let y = op(t, v[0])?;
                project(t, y, 10)
            });
            (vec![random_tensor(rng, &s)], f)
        }),
    )
}

fn elementwise(
    name: &'static str,
    op: fn(&mut Tape, Var, Var) -> Result<Var>,
) -> (&'static str, Case) {
    (
        name,
        Box::new(move |rng| {
            let s = [dim(rng), dim(rng)];
            let ins = vec![random_tensor(rng, &s), random_tensor(rng, &s)];
            let f: CaseFn = Box::new(move |t, v| {
                let y = op(t, v[0], v[1])?;
                project(t, y, 11)
            });
            (ins, f)
        }),
    )
}

/// Checks every differentiable op on `cases` random small shapes.
pub fn op_suite(cases: usize, seed: u64, fault: Option<OpKind>) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Vec::new();
    for (name, make) in case_table() {
        let mut worst = 0.0f64;
        for _ in 0..cases {
            let (inputs, f) = make(&mut rng);
            worst = worst.max(check(&inputs, f, fault)?);
        }
        report.push(OpCheck {
            op: name,
            cases,
            worst_rel_error: worst,
        });
    }
    Ok(report)
}
