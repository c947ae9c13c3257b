//! Multi-head attention: exact (optionally causal), cross, and the Nyström
//! landmark approximation used by the encoder.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{uniform_fan_in, Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Nyström approximation settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NystromConfig {
    pub num_landmarks: usize,
    pub pinv_iterations: usize,
    pub head_count: usize,
}

impl NystromConfig {
    pub const DEFAULT_PINV_ITERATIONS: usize = 6;
}

/// Square projections of one attention block. Heads split `W_Q`, `W_K`, `W_V`
/// by contiguous column blocks of width `d_model / heads`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_model: usize) -> Self {
        let mut mat = |suffix: &str| {
            store.insert(
                format!("{name}.{suffix}"),
                uniform_fan_in(rng, &[d_model, d_model], d_model),
            )
        };
        AttentionParams {
            wq: mat("wq"),
            wk: mat("wk"),
            wv: mat("wv"),
            wo: mat("wo"),
        }
    }
}

fn head_dim(d_model: usize, heads: usize) -> Result<usize> {
    if heads == 0 || d_model % heads != 0 {
        return Err(Error::Config(format!(
            "head count {heads} must divide d_model {d_model}"
        )));
    }
    Ok(d_model / heads)
}

/// Strictly-upper-triangular `−∞` mask.
pub fn causal_mask(s: usize) -> Tensor {
    let mut m = Tensor::zeros(&[s, s]);
    for i in 0..s {
        for j in i + 1..s {
            m.data_mut()[i * s + j] = f64::NEG_INFINITY;
        }
    }
    m
}

/// `softmax(q·kᵀ/√d_h)` row-wise, with future positions masked when `causal`.
pub fn attention_weights(tape: &mut Tape, q: Var, k: Var, causal: bool) -> Result<Var> {
    let dh = tape.shape(q)[1];
    let logits = tape.matmul_nt(q, k)?;
    let mut logits = tape.scale(logits, 1.0 / (dh as f64).sqrt());
    if causal {
        let (s, t) = tape.value(logits).dims2()?;
        if s != t {
            return Err(Error::shape("causal attention", &[s, t], &[s, s]));
        }
        logits = tape.add_const(logits, &causal_mask(s))?;
    }
    tape.softmax(logits, 1)
}

/// Projects queries from `h` and keys/values from `kv`, attends head by head,
/// concatenates and applies `W_O`.
fn multi_head(
    tape: &mut Tape,
    p: &Bound,
    params: &AttentionParams,
    h: Var,
    kv: Var,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let d_model = tape.shape(h)[1];
    let dh = head_dim(d_model, heads)?;
    let q = tape.matmul(h, p[params.wq])?;
    let k = tape.matmul(kv, p[params.wk])?;
    let v = tape.matmul(kv, p[params.wv])?;
    let mut outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice(q, 1, head * dh, dh)?,
                tape.slice(k, 1, head * dh, dh)?,
                tape.slice(v, 1, head * dh, dh)?,
            )
        };
        let w = attention_weights(tape, qh, kh, causal)?;
        outs.push(tape.matmul(w, vh)?);
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        tape.concat(&outs, 1)?
    };
    tape.matmul(cat, p[params.wo])
}

/// Exact multi-head self-attention over `x: S×d_model`.
pub fn exact_mhsa(
    tape: &mut Tape,
    p: &Bound,
    params: &AttentionParams,
    x: Var,
    heads: usize,
    causal_mask: bool,
) -> Result<Var> {
    multi_head(tape, p, params, x, x, heads, causal_mask)
}

/// Multi-head cross-attention: queries from `h: S×d`, keys and values from `v: N×d`.
pub fn mhca(
    tape: &mut Tape,
    p: &Bound,
    params: &AttentionParams,
    h: Var,
    v: Var,
    heads: usize,
) -> Result<Var> {
    let (dh, dv) = (tape.shape(h)[1], tape.shape(v)[1]);
    if dh != dv {
        return Err(Error::shape("mhca", tape.shape(h), tape.shape(v)));
    }
    multi_head(tape, p, params, h, v, heads, false)
}

/// Moore–Penrose pseudoinverse by the Newton–Schulz-type iteration
/// `Z ← ¼·Z·(13I − AZ·(15I − AZ·(7I − AZ)))`, started from
/// `Z₀ = Aᵀ / (max row-sum · max col-sum)`.
pub fn iterative_pinv(tape: &mut Tape, a: Var, iters: usize) -> Result<Var> {
    let (m, m2) = tape.value(a).dims2()?;
    if m != m2 {
        return Err(Error::shape("iterative_pinv", &[m, m2], &[m, m]));
    }
    let row_sums = tape.sum(a, 1)?;
    let col_sums = tape.sum(a, 0)?;
    let max_row = tape.max_all(row_sums);
    let max_col = tape.max_all(col_sums);
    let denom = tape.mul(max_row, max_col)?;
    let one = tape.constant(Tensor::scalar(1.0));
    let inv = tape.div(one, denom)?;
    let inv = tape.reshape(inv, &[1, 1])?;
    let at = tape.transpose(a)?;
    let flat = tape.reshape(at, &[m * m, 1])?;
    let scaled = tape.matmul(flat, inv)?;
    let mut z = tape.reshape(scaled, &[m, m])?;

    let eye = Tensor::eye(m);
    let eye7 = eye.scale(7.0);
    let eye15 = eye.scale(15.0);
    let eye13 = eye.scale(13.0);
    for _ in 0..iters {
        let az = tape.matmul(a, z)?;
        let neg_az = tape.scale(az, -1.0);
        let t = tape.add_const(neg_az, &eye7)?;
        let t = tape.matmul(az, t)?;
        let t = tape.scale(t, -1.0);
        let t = tape.add_const(t, &eye15)?;
        let t = tape.matmul(az, t)?;
        let t = tape.scale(t, -1.0);
        let t = tape.add_const(t, &eye13)?;
        let t = tape.matmul(z, t)?;
        z = tape.scale(t, 0.25);
    }
    Ok(z)
}

/// `‖A·Z·A − A‖_F / ‖A‖_F`.
pub fn pinv_residual(a: &Tensor, z: &Tensor) -> Result<f64> {
    let aza = a.matmul(z)?.matmul(a)?;
    Ok(aza.rel_frobenius(a))
}

/// Nyström-approximated multi-head self-attention over `x: N×d_model`.
///
/// Zero rows are prepended so the padded length is a multiple of
/// `num_landmarks`; landmarks are means of contiguous segments of the padded
/// queries and keys. The padding rows are dropped from the output.
pub fn nystrom_attention(
    tape: &mut Tape,
    p: &Bound,
    params: &AttentionParams,
    x: Var,
    cfg: &NystromConfig,
) -> Result<Var> {
    let (n, d_model) = tape.value(x).dims2()?;
    let dh = head_dim(d_model, cfg.head_count)?;
    let m = cfg.num_landmarks;
    if m == 0 || m > n {
        return Err(Error::Config(format!(
            "num_landmarks {m} must be in 1..={n} for a sequence of length {n}"
        )));
    }
    let padded = n.div_ceil(m) * m;
    let pad = padded - n;
    let seg = padded / m;
    let xp = if pad > 0 {
        let zeros = tape.constant(Tensor::zeros(&[pad, d_model]));
        tape.concat(&[zeros, x], 0)?
    } else {
        x
    };
    let q = tape.matmul(xp, p[params.wq])?;
    let k = tape.matmul(xp, p[params.wk])?;
    let v = tape.matmul(xp, p[params.wv])?;

    let mut outs = Vec::with_capacity(cfg.head_count);
    for head in 0..cfg.head_count {
        let (qh, kh, vh) = if cfg.head_count == 1 {
            (q, k, v)
        } else {
            (
                tape.slice(q, 1, head * dh, dh)?,
                tape.slice(k, 1, head * dh, dh)?,
                tape.slice(v, 1, head * dh, dh)?,
            )
        };
        let (q_land, k_land) = if seg == 1 {
            (qh, kh)
        } else {
            let q3 = tape.reshape(qh, &[m, seg, dh])?;
            let k3 = tape.reshape(kh, &[m, seg, dh])?;
            (tape.mean(q3, 1)?, tape.mean(k3, 1)?)
        };
        let kernel1 = attention_weights(tape, qh, k_land, false)?;
        let kernel2 = attention_weights(tape, q_land, k_land, false)?;
        let kernel3 = attention_weights(tape, q_land, kh, false)?;
        let z = iterative_pinv(tape, kernel2, cfg.pinv_iterations)?;
        let kv = tape.matmul(kernel3, vh)?;
        let zkv = tape.matmul(z, kv)?;
        outs.push(tape.matmul(kernel1, zkv)?);
    }
    let cat = if cfg.head_count == 1 {
        outs[0]
    } else {
        tape.concat(&outs, 1)?
    };
    let out = tape.matmul(cat, p[params.wo])?;
    if pad > 0 {
        tape.slice(out, 0, pad, n)
    } else {
        Ok(out)
    }
}

/// Sinusoidal positional encoding, `S×d_model`.
pub fn sinusoidal_pe(s: usize, d_model: usize) -> Result<Tensor> {
    if d_model % 2 != 0 || d_model == 0 {
        return Err(Error::Config(format!(
            "positional encoding needs an even d_model, got {d_model}"
        )));
    }
    let mut pe = Tensor::zeros(&[s, d_model]);
    for pos in 0..s {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            pe.data_mut()[pos * d_model + 2 * i] = angle.sin();
            pe.data_mut()[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Ok(pe)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::tensor::gradcheck;

    fn setup(d: usize, seed: u64) -> (ParamStore, AttentionParams, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = AttentionParams::new(&mut store, &mut rng, "attn", d);
        (store, params, rng)
    }

    fn random_softmax_kernel(rng: &mut ChaCha8Rng, m: usize) -> Tensor {
        let logits = gradcheck::random_tensor(rng, &[m, m]).scale(2.0);
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let k = tape.softmax(l, 1).unwrap();
        tape.value(k).clone()
    }

    /// Single-head scaled dot-product attention computed with plain loops.
    fn reference_attention(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Tensor {
        let (s, d) = q.dims2().unwrap();
        let t = k.rows();
        let mut out = Tensor::zeros(&[s, v.cols()]);
        for i in 0..s {
            let limit = if causal { i + 1 } else { t };
            let logits: Vec<f64> = (0..limit)
                .map(|j| (0..d).map(|c| q.at(i, c) * k.at(j, c)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for (j, l) in logits.iter().enumerate() {
                let w = (l - max).exp() / z;
                for c in 0..v.cols() {
                    out.data_mut()[i * v.cols() + c] += w * v.at(j, c);
                }
            }
        }
        out
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&[vec![0.3, -1.2]]).unwrap());
        let w = attention_weights(&mut tape, q, q, true).unwrap();
        assert_eq!(tape.value(w).data(), &[1.0]);
    }

    #[test]
    fn causal_first_row_is_one_hot() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.5]]).unwrap());
        let w = attention_weights(&mut tape, q, q, true).unwrap();
        assert_eq!(tape.value(w).row(0), &[1.0, 0.0]);
    }

    #[test]
    fn exact_mhsa_matches_loop_reference_per_head() {
        let d = 6;
        let (store, params, mut rng) = setup(d, 4);
        let x = gradcheck::random_tensor(&mut rng, &[5, d]);
        for causal in [false, true] {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let xv = tape.constant(x.clone());
            let out = exact_mhsa(&mut tape, &p, &params, xv, 2, causal).unwrap();
            let q = x.matmul(store.get(params.wq)).unwrap();
            let k = x.matmul(store.get(params.wk)).unwrap();
            let v = x.matmul(store.get(params.wv)).unwrap();
            let cols = |t: &Tensor, h: usize| {
                let rows: Vec<Vec<f64>> = (0..t.rows()).map(|r| t.row(r)[h * 3..h * 3 + 3].to_vec()).collect();
                Tensor::from_rows(&rows).unwrap()
            };
            let heads: Vec<Tensor> = (0..2)
                .map(|h| reference_attention(&cols(&q, h), &cols(&k, h), &cols(&v, h), causal))
                .collect();
            let rows: Vec<Vec<f64>> = (0..5).map(|r| [heads[0].row(r), heads[1].row(r)].concat()).collect();
            let expected = Tensor::from_rows(&rows).unwrap().matmul(store.get(params.wo)).unwrap();
            assert!(tape.value(out).max_abs_diff(&expected) < 1e-12);
        }
    }

    #[test]
    fn uncausal_mhsa_is_permutation_equivariant() {
        let d = 8;
        let (store, params, mut rng) = setup(d, 5);
        let x = gradcheck::random_tensor(&mut rng, &[6, d]);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let xp = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let run = |input: &Tensor| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let xv = tape.constant(input.clone());
            let o = exact_mhsa(&mut tape, &p, &params, xv, 2, false).unwrap();
            tape.value(o).clone()
        };
        let (a, b) = (run(&x), run(&xp));
        for (new_row, &old_row) in perm.iter().enumerate() {
            for c in 0..d {
                assert!((b.at(new_row, c) - a.at(old_row, c)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn causal_rows_ignore_future_tokens() {
        let d = 4;
        let (store, params, mut rng) = setup(d, 6);
        let x = gradcheck::random_tensor(&mut rng, &[5, d]);
        let mut changed = x.clone();
        for c in 0..d {
            changed.data_mut()[4 * d + c] += 3.0;
        }
        let run = |input: &Tensor| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let xv = tape.constant(input.clone());
            let o = exact_mhsa(&mut tape, &p, &params, xv, 2, true).unwrap();
            tape.value(o).clone()
        };
        let (a, b) = (run(&x), run(&changed));
        for r in 0..4 {
            assert_eq!(a.row(r), b.row(r));
        }
    }

    #[test]
    fn mhca_single_key_returns_projected_value() {
        let d = 4;
        let (store, params, mut rng) = setup(d, 7);
        let h = gradcheck::random_tensor(&mut rng, &[3, d]);
        let v = gradcheck::random_tensor(&mut rng, &[1, d]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let (hv, vv) = (tape.constant(h), tape.constant(v.clone()));
        let out = mhca(&mut tape, &p, &params, hv, vv, 2).unwrap();
        let expected = v
            .matmul(store.get(params.wv))
            .unwrap()
            .matmul(store.get(params.wo))
            .unwrap();
        for s in 0..3 {
            for c in 0..d {
                assert!((tape.value(out).at(s, c) - expected.at(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mhca_duplicate_keys_and_key_permutation() {
        let d = 4;
        let (store, params, mut rng) = setup(d, 8);
        let h = gradcheck::random_tensor(&mut rng, &[3, d]);
        let v = gradcheck::random_tensor(&mut rng, &[4, d]);
        let run = |kv: &Tensor| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let (hv, vv) = (tape.constant(h.clone()), tape.constant(kv.clone()));
            let o = mhca(&mut tape, &p, &params, hv, vv, 2).unwrap();
            tape.value(o).clone()
        };
        let single = Tensor::from_rows(&[v.row(1).to_vec()]).unwrap();
        let dup = Tensor::from_rows(&[v.row(1).to_vec(), v.row(1).to_vec(), v.row(1).to_vec()]).unwrap();
        assert!(run(&single).max_abs_diff(&run(&dup)) < 1e-12);
        let perm = Tensor::from_rows(&[2, 0, 3, 1].iter().map(|&i| v.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        assert!(run(&v).max_abs_diff(&run(&perm)) < 1e-9);
    }

    #[test]
    fn pinv_of_identity_is_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::eye(4));
        let z = iterative_pinv(&mut tape, a, 6).unwrap();
        assert!(tape.value(z).max_abs_diff(&Tensor::eye(4)) < 1e-12);
    }

    #[test]
    fn pinv_of_rank_one_kernel_satisfies_aza() {
        let a = Tensor::full(&[2, 2], 0.5);
        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let z = iterative_pinv(&mut tape, av, 6).unwrap();
        assert!(pinv_residual(&a, tape.value(z)).unwrap() < 1e-12);
    }

    #[test]
    fn pinv_residual_on_random_kernel_m8() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_softmax_kernel(&mut rng, 8);
        let residual = |iters| {
            let mut tape = Tape::new();
            let av = tape.constant(a.clone());
            let z = iterative_pinv(&mut tape, av, iters).unwrap();
            pinv_residual(&a, tape.value(z)).unwrap()
        };
        // Six steps from this initialisation leave a residual of order 1e-2 on
        // generic kernels; 1e-3 takes roughly a dozen.
        assert!(residual(6) < 5e-2);
        assert!(residual(12) <= 1e-3);
    }

    #[test]
    fn pinv_residual_decreases_monotonically() {
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let m = rng.gen_range(4..=16);
            let a = random_softmax_kernel(&mut rng, m);
            let mut prev = f64::INFINITY;
            for iters in 0..=8 {
                let mut tape = Tape::new();
                let av = tape.constant(a.clone());
                let z = iterative_pinv(&mut tape, av, iters).unwrap();
                let r = pinv_residual(&a, tape.value(z)).unwrap();
                assert!(r <= prev + 1e-12, "seed {seed} iter {iters}: {r} > {prev}");
                prev = r;
            }
        }
    }

    #[test]
    fn nystrom_single_token() {
        let d = 4;
        let (store, params, mut rng) = setup(d, 9);
        let x = gradcheck::random_tensor(&mut rng, &[1, d]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let cfg = NystromConfig { num_landmarks: 1, pinv_iterations: 6, head_count: 2 };
        let out = nystrom_attention(&mut tape, &p, &params, xv, &cfg).unwrap();
        let expected = x.matmul(store.get(params.wv)).unwrap().matmul(store.get(params.wo)).unwrap();
        assert!(tape.value(out).max_abs_diff(&expected) < 1e-12);
    }

    fn nystrom_vs_exact(n: usize, d: usize, m: usize, heads: usize, iters: usize, seed: u64) -> f64 {
        let (store, params, mut rng) = setup(d, seed);
        let x = gradcheck::random_tensor(&mut rng, &[n, d]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x);
        let cfg = NystromConfig { num_landmarks: m, pinv_iterations: iters, head_count: heads };
        let approx = nystrom_attention(&mut tape, &p, &params, xv, &cfg).unwrap();
        let exact = exact_mhsa(&mut tape, &p, &params, xv, heads, false).unwrap();
        tape.value(approx).rel_frobenius(tape.value(exact))
    }

    #[test]
    fn singleton_segments_match_exact_attention() {
        let err = nystrom_vs_exact(6, 8, 6, 2, 40, 12);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn landmark_approximation_close_to_exact_at_n128() {
        let err = nystrom_vs_exact(128, 64, 32, 8, 6, 0);
        assert!(err < 0.15, "{err}");
    }

    #[test]
    fn nystrom_pads_and_drops_rows() {
        let (store, params, mut rng) = setup(4, 13);
        let x = gradcheck::random_tensor(&mut rng, &[7, 4]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x);
        let cfg = NystromConfig { num_landmarks: 3, pinv_iterations: 6, head_count: 2 };
        let out = nystrom_attention(&mut tape, &p, &params, xv, &cfg).unwrap();
        assert_eq!(tape.shape(out), &[7, 4]);
        let bad = NystromConfig { num_landmarks: 8, ..cfg };
        assert!(matches!(nystrom_attention(&mut tape, &p, &params, xv, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn nystrom_gradients_match_finite_differences() {
        let (store, params, mut rng) = setup(4, 14);
        let x = gradcheck::random_tensor(&mut rng, &[6, 4]);
        let inputs = vec![
            x,
            store.get(params.wq).clone(),
            store.get(params.wk).clone(),
            store.get(params.wv).clone(),
            store.get(params.wo).clone(),
        ];
        let err = gradcheck::check(
            &inputs,
            |t, v| {
                let mut s = ParamStore::new();
                let ap = AttentionParams {
                    wq: s.insert("q", Tensor::zeros(&[1])),
                    wk: s.insert("k", Tensor::zeros(&[1])),
                    wv: s.insert("v", Tensor::zeros(&[1])),
                    wo: s.insert("o", Tensor::zeros(&[1])),
                };
                let bound = Bound::from_vars(vec![v[1], v[2], v[3], v[4]]);
                let cfg = NystromConfig { num_landmarks: 3, pinv_iterations: 6, head_count: 2 };
                let _ = s;
                let y = nystrom_attention(t, &bound, &ap, v[0], &cfg)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            },
            None,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn positional_encoding_values() {
        let pe = sinusoidal_pe(3, 6).unwrap();
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((pe.at(1, 0) - 0.841_470_984_807_896_5).abs() < 1e-15);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(matches!(sinusoidal_pe(3, 5), Err(Error::Config(_))));
    }
}
