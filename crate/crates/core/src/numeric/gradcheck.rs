//! Central finite-difference verification of tape gradients.

use std::collections::BTreeMap;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::Result;

/// Finite-difference step applied to each coordinate.
pub const FD_STEP: f64 = 1e-5;

/// Smallest denominator in [`relative_error`]. Central differences at
/// [`FD_STEP`] on an order-one loss carry roundoff near `1e-10`, so
/// smaller components cannot be resolved to a relative `1e-4`.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a - f| / max(|a|, |f|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Worst disagreement found for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    /// [`relative_error`] of the whole tensor, using 2-norms.
    pub norm_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    /// Worst error per parameter group, where the group is the name
    /// prefix before the first `.`.
    pub fn by_group(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for p in &self.per_param {
            let group = p.name.split('.').next().unwrap_or(&p.name).to_string();
            let e = out.entry(group).or_insert(0.0f64);
            *e = e.max(p.max_rel_err);
        }
        out
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.per_param
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Compares tape gradients of a scalar computation with central differences.
///
/// `build` records the computation on the supplied graph and returns the
/// `1 x 1` loss node. It is re-run for every perturbed coordinate, so it must
/// be deterministic (evaluation-mode graph, no dropout). `only` restricts the
/// check to a subset of parameters; `None` checks all of them.
pub fn grad_check<F>(
    store: &mut ParamStore,
    tol: f64,
    only: Option<&[ParamId]>,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = build(&mut g)?;
        g.backward(loss)?
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let loss = build(&mut g)?;
        Ok(g.scalar(loss))
    };
    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.iter().map(|(id, _)| id).collect(),
    };

    let mut per_param = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.value(id).len();
        let grad = analytic.get(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            coords: n,
            max_rel_err: 0.0,
            norm_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        let (mut diff2, mut a2, mut f2) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + FD_STEP;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig - FD_STEP;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            diff2 += (grad[i] - fd).powi(2);
            a2 += grad[i] * grad[i];
            f2 += fd * fd;
            let err = relative_error(grad[i], fd);
            if err > check.max_rel_err {
                check.max_rel_err = err;
                check.worst_index = i;
                check.analytic = grad[i];
                check.numeric = fd;
            }
        }
        check.norm_rel_err = diff2.sqrt() / a2.sqrt().max(f2.sqrt()).max(REL_ERR_FLOOR);
        per_param.push(check);
    }
    let max_rel_err = per_param.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_err,
        tol,
        passed: max_rel_err < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::graph::CeTarget;
    use crate::numeric::kernels::AttnSegment;
    use crate::numeric::params::{Init, ParamGroup};
    use crate::numeric::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn squared_error_closed_form() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let w = store.add("w", &[1, 1], Init::Constant(2.0), ParamGroup::Base, false, &mut r);
        // loss = (w x - t)^2 at x = 3, t = 1 -> d/dw = 2 (w x - t) x = 30
        let build = |g: &mut Graph| {
            let wv = g.param(w);
            let x = g.input(Tensor::scalar(3.0));
            let t = g.input(Tensor::scalar(-1.0));
            let wx = g.linear(x, wv, None);
            let diff = g.add(wx, t);
            let sq = g.matmul_nt(diff, diff);
            Ok(sq)
        };
        let grads = {
            let mut g = Graph::new(&store);
            let l = build(&mut g).unwrap();
            assert_eq!(g.scalar(l), 25.0);
            g.backward(l).unwrap()
        };
        assert!((grads.get(w).unwrap()[0] - 30.0).abs() < 1e-12);
        let report = grad_check(&mut store, 1e-6, None, build).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn constant_loss_passes_at_any_tolerance() {
        let mut r = rng();
        let mut store = ParamStore::new();
        store.add("w", &[2, 2], Init::Normal(1.0), ParamGroup::Base, false, &mut r);
        let report = grad_check(&mut store, 1e-300, None, |g| Ok(g.input(Tensor::scalar(1.5))))
            .unwrap();
        assert!(report.passed);
        assert_eq!(report.max_rel_err, 0.0);
    }

    /// Every primitive in isolation, composed into a scalar through a
    /// fixed random projection.
    #[test]
    fn every_primitive_passes_in_isolation() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let x = store.add("x", &[5, 4], Init::Normal(1.0), ParamGroup::Base, false, &mut r);
        let w = store.add("w", &[4, 4], Init::Normal(0.7), ParamGroup::Base, false, &mut r);
        let b = store.add("b", &[1, 4], Init::Normal(0.3), ParamGroup::Base, false, &mut r);
        let y = store.add("y", &[3, 4], Init::Normal(1.0), ParamGroup::Base, false, &mut r);
        let gain = store.add("gain", &[1, 4], Init::Normal(1.0), ParamGroup::Base, false, &mut r);
        let s = store.add("s", &[1, 1], Init::Constant(0.3), ParamGroup::Base, false, &mut r);
        let proj = store.add("proj", &[5, 4], Init::Normal(1.0), ParamGroup::Base, false, &mut r);
        let proj_v: &'static Tensor = Box::leak(Box::new(store.value(proj).clone()));

        type Build = Box<dyn Fn(&mut Graph) -> Result<Var>>;
        let reduce = move |g: &mut Graph, v: Var| -> Var {
            let (rows, cols) = g.shape(v);
            let mut p = Tensor::zeros(&[rows, cols]);
            for i in 0..rows * cols {
                p.data_mut()[i] = proj_v.data()[i % proj_v.len()];
            }
            let flat_v = {
                let idx: Vec<usize> = (0..rows).collect();
                g.gather(v, idx)
            };
            let pv = g.input(p);
            let t = g.transpose(pv);
            let prod = g.linear(flat_v, t, None); // rows x rows
            let ones = g.input(Tensor::full(&[1, rows], 1.0));
            let col = g.linear(ones, prod, None); // 1 x rows
            let ones2 = g.input(Tensor::full(&[1, rows], 1.0));
            g.matmul_nt(col, ones2)
        };

        let cases: Vec<(&str, Build)> = vec![
            ("linear", Box::new(move |g| { let (xv, wv, bv) = (g.param(x), g.param(w), g.param(b)); let o = g.linear(xv, wv, Some(bv)); Ok(reduce(g, o)) })),
            ("matmul_nt", Box::new(move |g| { let (xv, yv) = (g.param(x), g.param(y)); let o = g.matmul_nt(xv, yv); Ok(reduce(g, o)) })),
            ("layer_norm", Box::new(move |g| { let (xv, gv, bv) = (g.param(x), g.param(gain), g.param(b)); let o = g.layer_norm(xv, gv, bv, 1e-5); Ok(reduce(g, o)) })),
            ("gelu", Box::new(move |g| { let xv = g.param(x); let o = g.gelu(xv); Ok(reduce(g, o)) })),
            ("mul_exp", Box::new(move |g| { let (xv, sv) = (g.param(x), g.param(s)); let o = g.mul_exp(xv, sv, -1.0); Ok(reduce(g, o)) })),
            ("gather_concat", Box::new(move |g| { let (xv, yv) = (g.param(x), g.param(y)); let c = g.concat_rows(vec![xv, yv]); let o = g.gather(c, vec![7, 0, 0, 3, 5]); Ok(reduce(g, o)) })),
            ("segment_mean", Box::new(move |g| { let xv = g.param(x); let o = g.segment_mean(xv, vec![0..2, 2..5, 1..4]); Ok(reduce(g, o)) })),
            ("l2_normalize", Box::new(move |g| { let xv = g.param(x); let o = g.l2_normalize(xv); Ok(reduce(g, o)) })),
            ("transpose_scale", Box::new(move |g| { let xv = g.param(x); let t = g.transpose(xv); let t = g.scale(t, 0.7); let o = g.transpose(t); Ok(reduce(g, o)) })),
            ("cross_entropy", Box::new(move |g| {
                let (xv, yv) = (g.param(x), g.param(y));
                let logits = g.matmul_nt(xv, yv);
                Ok(g.cross_entropy(logits, vec![
                    CeTarget { candidates: vec![0, 1, 2], label: 1 },
                    CeTarget { candidates: vec![2, 0], label: 0 },
                    CeTarget { candidates: vec![1], label: 0 },
                    CeTarget { candidates: vec![0, 2], label: 1 },
                    CeTarget { candidates: vec![0, 1, 2], label: 2 },
                ]))
            })),
            ("attention", Box::new(move |g| {
                let (xv, yv, wv) = (g.param(x), g.param(y), g.param(w));
                let q = g.linear(xv, wv, None);
                let segs = vec![
                    AttnSegment { q_rows: 0..2, kv_rows: 0..3 },
                    AttnSegment { q_rows: 2..5, kv_rows: 1..2 },
                ];
                let o = g.attention(q, yv, yv, 2, segs, 0.0);
                Ok(reduce(g, o))
            })),
        ];
        for (name, build) in cases {
            let report = grad_check(&mut store, 1e-4, None, |g| build(g)).unwrap();
            assert!(report.passed, "{name}: {:?}", report.worst());
        }
    }
}
