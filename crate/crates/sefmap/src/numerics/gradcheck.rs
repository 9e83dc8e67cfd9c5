//! Finite-difference verification of tape gradients.
//!
//! Central differences at step h, compared coordinate-by-coordinate against
//! the analytic gradient. The objective must be deterministic; this is
//! checked by evaluating it twice at the baseline before perturbing.

use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Result, SefError};

const REL_EPS: Real = 1e-12;

/// Max over coordinates of |analytic - central| / (|analytic| + |central| + eps)
/// for one parameter. `eval` is the scalar objective as a function of the
/// store; `analytic` is the already-computed gradient for `id`.
pub fn finite_diff_check<F>(
    params: &mut ParamStore,
    id: ParamId,
    h: Real,
    analytic: &Tensor,
    mut eval: F,
) -> Result<Real>
where
    F: FnMut(&ParamStore) -> Result<Real>,
{
    if h <= 0.0 {
        return Err(SefError::Config(format!("finite difference step must be positive, got {h}")));
    }
    {
        let p = params.get(id);
        if p.value.shape() != analytic.shape() {
            return Err(SefError::shape(
                format!("finite_diff_check for `{}`", p.name),
                p.value.shape_str(),
                analytic.shape_str(),
            ));
        }
    }
    let base_a = eval(params)?;
    let base_b = eval(params)?;
    if base_a != base_b {
        return Err(SefError::Domain {
            context: "finite_diff_check".into(),
            detail: format!(
                "objective is not deterministic: {base_a} vs {base_b} at the same point"
            ),
        });
    }

    let n = params.get(id).value.len();
    let mut max_rel = 0.0 as Real;
    for k in 0..n {
        let orig = params.get(id).value.data()[k];
        params.get_mut(id).value.data_mut()[k] = orig + h;
        let f_plus = eval(params)?;
        params.get_mut(id).value.data_mut()[k] = orig - h;
        let f_minus = eval(params)?;
        params.get_mut(id).value.data_mut()[k] = orig;
        let central = (f_plus - f_minus) / (2.0 * h);
        let a = analytic.data()[k];
        let rel = (a - central).abs() / (a.abs() + central.abs() + REL_EPS);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::super::{NodeId, Tape};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// Build-once / rebuild-per-eval harness: `build` constructs the scalar
    /// objective from the store on a fresh tape. Checks every parameter.
    fn check_all<F>(label: &str, params: &mut ParamStore, tol: Real, build: F)
    where
        F: Fn(&ParamStore, &mut Tape) -> Result<NodeId>,
    {
        params.zero_grads();
        let mut tape = Tape::new();
        let loss = build(params, &mut tape).expect("forward failed");
        tape.backward(loss, params).expect("backward failed");
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            let analytic = params.get(id).grad.clone();
            let name = params.get(id).name.clone();
            let rel = finite_diff_check(params, id, 1e-5, &analytic, |ps| {
                let mut t = Tape::new();
                let l = build(ps, &mut t)?;
                t.value(l).item()
            })
            .expect("finite_diff_check failed");
            assert!(rel < tol, "{label}: param `{name}`: rel err {rel:.3e} >= {tol:.1e}");
        }
    }

    fn rand_tensor(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn sum_of_squares_is_tight() {
        // the classic: f(p) = sum(p^2) at [1, 2], analytic [2, 4]
        let mut params = ParamStore::new();
        let p = params.add("p", Tensor::from_vec(1, 2, vec![1.0, 2.0]).unwrap());
        let mut tape = Tape::new();
        let x = tape.param(&params, p).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss, &mut params).unwrap();
        let analytic = params.get(p).grad.clone();
        let rel = finite_diff_check(&mut params, p, 1e-5, &analytic, |ps| {
            let mut t = Tape::new();
            let x = t.param(ps, p)?;
            let sq = t.mul(x, x)?;
            let l = t.sum_all(sq)?;
            t.value(l).item()
        })
        .unwrap();
        assert!(rel < 1e-8, "rel err {rel:.3e}");
    }

    #[test]
    fn constant_objective_reports_zero() {
        let mut params = ParamStore::new();
        let p = params.add("p", Tensor::from_vec(1, 2, vec![1.0, 2.0]).unwrap());
        let analytic = Tensor::zeros(1, 2);
        let rel = finite_diff_check(&mut params, p, 1e-5, &analytic, |_| Ok(7.25)).unwrap();
        assert_eq!(rel, 0.0);
    }

    #[test]
    fn nondeterministic_objective_rejected() {
        use std::cell::Cell;
        let counter = Cell::new(0.0 as Real);
        let mut params = ParamStore::new();
        let p = params.add("p", Tensor::scalar(1.0));
        let analytic = Tensor::zeros(1, 1);
        let err = finite_diff_check(&mut params, p, 1e-5, &analytic, |_| {
            counter.set(counter.get() + 1.0);
            Ok(counter.get())
        })
        .unwrap_err();
        assert!(err.to_string().contains("deterministic"), "{err}");
    }

    /// Every differentiable op, 20 seeds each, rel err < 1e-3 at h = 1e-5.
    /// Each case composes the op into a scalar via a fixed random weighting
    /// so all coordinates receive signal.
    #[test]
    fn every_op_passes_finite_difference_sweep() {
        for seed in 0..20u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let n = 3 + (seed % 3) as usize;
            let m = 2 + (seed % 4) as usize;

            // weighting tensor to make scalar objectives sensitive everywhere
            let wn_m = rand_tensor(&mut rng, n, m);
            let w1_m = rand_tensor(&mut rng, 1, m);
            let wn_1 = rand_tensor(&mut rng, n, 1);

            // matmul, all four transpose combinations
            for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
                let mut params = ParamStore::new();
                let k = 3;
                let (ar, ac) = if ta { (k, n) } else { (n, k) };
                let (br, bc) = if tb { (m, k) } else { (k, m) };
                let a = params.add("a", rand_tensor(&mut rng, ar, ac));
                let b = params.add("b", rand_tensor(&mut rng, br, bc));
                let w = wn_m.clone();
                check_all(&format!("matmul ta={ta} tb={tb}"), &mut params, 1e-3, move |ps, t| {
                    let an = t.param(ps, a)?;
                    let bn = t.param(ps, b)?;
                    let c = t.matmul_opts(an, bn, ta, tb)?;
                    let wn = t.input(w.clone())?;
                    let prod = t.mul(c, wn)?;
                    t.sum_all(prod)
                });
            }

            // linear_map with bias
            {
                let mut params = ParamStore::new();
                let x = params.add("x", rand_tensor(&mut rng, n, 3));
                let w = params.add("w", rand_tensor(&mut rng, m, 3));
                let b = params.add("b", rand_tensor(&mut rng, 1, m));
                let wt = wn_m.clone();
                check_all("linear_map", &mut params, 1e-3, move |ps, t| {
                    let xn = t.param(ps, x)?;
                    let wn = t.param(ps, w)?;
                    let bn = t.param(ps, b)?;
                    let y = t.linear_map(xn, wn, bn)?;
                    let ww = t.input(wt.clone())?;
                    let prod = t.mul(y, ww)?;
                    t.sum_all(prod)
                });
            }

            // binary elementwise: add, sub, mul, div (denominator kept away from 0)
            {
                let mut params = ParamStore::new();
                let a = params.add("a", rand_tensor(&mut rng, n, m));
                let braw = rand_tensor(&mut rng, n, m);
                let b = params.add("b", braw.map(|v| v + if v >= 0.0 { 2.0 } else { -2.0 }));
                let wt = wn_m.clone();
                check_all("binary elementwise", &mut params, 1e-3, move |ps, t| {
                    let an = t.param(ps, a)?;
                    let bn = t.param(ps, b)?;
                    let s1 = t.add(an, bn)?;
                    let s2 = t.mul(s1, an)?;
                    let s3 = t.div(s2, bn)?;
                    let s4 = t.sub(s3, bn)?;
                    let ww = t.input(wt.clone())?;
                    let prod = t.mul(s4, ww)?;
                    t.sum_all(prod)
                });
            }

            // unary chain: scale, add_const, gelu, soft_clamp, relu
            {
                let mut params = ParamStore::new();
                let x = params.add("x", rand_tensor(&mut rng, n, m));
                let wt = wn_m.clone();
                check_all("unary chain", &mut params, 1e-3, move |ps, t| {
                    let xn = t.param(ps, x)?;
                    let a = t.scale(xn, 1.7)?;
                    let b = t.add_const(a, -0.3)?;
                    let c = t.gelu(b)?;
                    let d = t.soft_clamp(c, 2.0)?;
                    let e = t.relu(d)?;
                    let ww = t.input(wt.clone())?;
                    let prod = t.mul(e, ww)?;
                    t.sum_all(prod)
                });
            }

            // exp -> ln -> sqrt chain on a positive-safe path
            {
                let mut params = ParamStore::new();
                let x = params.add("x", rand_tensor(&mut rng, n, m));
                let wt = wn_m.clone();
                check_all("log chain", &mut params, 1e-3, move |ps, t| {
                    let xn = t.param(ps, x)?;
                    let sq = t.mul(xn, xn)?;
                    let pos = t.add_const(sq, 0.5)?;
                    let l = t.ln(pos)?;
                    let e = t.exp(l)?;
                    let r = t.sqrt(e)?;
                    let ww = t.input(wt.clone())?;
                    let prod = t.mul(r, ww)?;
                    t.sum_all(prod)
                });
            }

            // softmax_rows and logsumexp_rows
            {
                let mut params = ParamStore::new();
                let x = params.add("x", rand_tensor(&mut rng, n, m));
                let wt = wn_m.clone();
                let wc = wn_1.clone();
                check_all("softmax+lse", &mut params, 1e-3, move |ps, t| {
                    let xn = t.param(ps, x)?;
                    let s = t.softmax_rows(xn)?;
                    let ww = t.input(wt.clone())?;
                    let p1 = t.mul(s, ww)?;
                    let t1 = t.sum_all(p1)?;
                    let lse = t.logsumexp_rows(xn)?;
                    let wwc = t.input(wc.clone())?;
                    let p2 = t.mul(lse, wwc)?;
                    let t2 = t.sum_all(p2)?;
                    t.add(t1, t2)
                });
            }

            // fused cross-entropy, with and without class weights
            {
                let mut params = ParamStore::new();
                let x = params.add("x", rand_tensor(&mut rng, n, m));
                let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
                let weights: Vec<Real> = (0..m).map(|_| rng.random_range(0.5..2.0)).collect();
                let use_weights = seed % 2 == 0;
                check_all("cross entropy", &mut params, 1e-3, move |ps, t| {
                    let xn = t.param(ps, x)?;
                    let ce = t.softmax_ce_rows(
                        xn,
                        &targets,
                        if use_weights { Some(&weights) } else { None },
                    )?;
                    t.mean_all(ce)
                });
            }

            // reductions and structure: row_sum, col_sum, transpose, concat,
            // slice, gather (with duplicate), broadcast_mul_col
            {
                let mut params = ParamStore::new();
                let x = params.add("x", rand_tensor(&mut rng, n, m));
                let s = params.add("s", rand_tensor(&mut rng, n, 1));
                let w1 = w1_m.clone();
                let idx: Vec<usize> = vec![0, n - 1, 0];
                check_all("structure ops", &mut params, 1e-3, move |ps, t| {
                    let xn = t.param(ps, x)?;
                    let sn = t.param(ps, s)?;
                    let scaled = t.broadcast_mul_col(xn, sn)?;
                    let cat = t.concat_cols(&[scaled, xn])?;
                    let sl = t.slice_cols(cat, m / 2, m)?;
                    let ga = t.gather_rows(sl, &idx)?;
                    let tt = t.transpose(ga)?;
                    let rs = t.row_sum(tt)?;
                    let t1 = t.sum_all(rs)?;
                    let cs = t.col_sum(xn)?;
                    let ww = t.input(w1.clone())?;
                    let p2 = t.mul(cs, ww)?;
                    let t2 = t.sum_all(p2)?;
                    t.add(t1, t2)
                });
            }

            // centering ops and row_cosine
            {
                let mut params = ParamStore::new();
                let x = params.add("x", rand_tensor(&mut rng, n, m));
                let y = params.add("y", rand_tensor(&mut rng, n, m));
                let g = params.add("g", rand_tensor(&mut rng, n, n));
                let wc = wn_1.clone();
                check_all("centering+cosine", &mut params, 1e-3, move |ps, t| {
                    let xn = t.param(ps, x)?;
                    let yn = t.param(ps, y)?;
                    let gn = t.param(ps, g)?;
                    let cx = t.center_cols(xn)?;
                    let cos = t.row_cosine(cx, yn)?;
                    let ww = t.input(wc.clone())?;
                    let p1 = t.mul(cos, ww)?;
                    let t1 = t.sum_all(p1)?;
                    let dc = t.double_center(gn)?;
                    let sq = t.mul(dc, dc)?;
                    let t2 = t.mean_all(sq)?;
                    t.add(t1, t2)
                });
            }
        }
    }
}
