//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Every node holds a matrix (scalars are `1 x 1`). Operations are recorded
//! in creation order, so a reverse sweep over the node list is a valid
//! topological order for the backward pass. Parameter nodes borrow their
//! values from the [`ParamStore`] rather than copying them.
//!
//! Batches are represented as stacked rows; attention and reductions take
//! explicit row ranges so independent samples never mix.

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, AttnSegment};
use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Softmax cross-entropy target for one logits row: the columns that form
/// the candidate set and the position of the correct one inside it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CeTarget {
    pub candidates: Vec<usize>,
    pub label: usize,
}

enum Op {
    Input,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMulNt {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    MulExp {
        x: Var,
        s: Var,
        sign: f64,
    },
    Gather {
        src: Var,
        idx: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu {
        x: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<AttnSegment>,
        probs: Vec<f64>,
        keep: Option<Vec<f64>>,
    },
    SegmentMean {
        x: Var,
        segments: Vec<Range<usize>>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<CeTarget>,
        probs: Vec<Vec<f64>>,
    },
    Transpose {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording context for one forward (and optional backward) pass.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    train: bool,
    rng: Option<ChaCha8Rng>,
}

impl<'p> Graph<'p> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            train: false,
            rng: None,
        }
    }

    /// Training-mode graph with its own dropout stream.
    pub fn training(params: &'p ParamStore, rng: ChaCha8Rng) -> Self {
        Graph {
            train: true,
            rng: Some(rng),
            ..Graph::new(params)
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.value(id),
            _ => &node.value,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "scalar() on non-scalar node");
        t.data()[0]
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        let t = if t.rank() == 2 {
            t
        } else {
            let (r, c) = (t.rows(), t.cols());
            t.reshape(vec![r, c]).expect("matrix view")
        };
        self.push(t, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let v = self.push(Tensor::zeros(&[0]), Op::Param(id), true);
        self.param_nodes[id.0] = Some(v);
        v
    }

    /// `x W (+ b)`, with `b` a `1 x m` row broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, k) = (xv.rows(), xv.cols());
        assert_eq!(wv.rows(), k, "linear: input width {} vs weight rows {}", k, wv.rows());
        let m = wv.cols();
        let mut out = vec![0.0; n * m];
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.len(), m, "linear: bias width");
            for r in 0..n {
                out[r * m..(r + 1) * m].copy_from_slice(bv.data());
            }
        }
        kernels::gemm(n, k, m, xv.data(), false, wv.data(), false, 1.0, &mut out);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::matrix(n, m, out).unwrap(), Op::Linear { x, w, b }, ng)
    }

    /// `a b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (n, k) = (av.rows(), av.cols());
        assert_eq!(bv.cols(), k, "matmul_nt: inner dims");
        let m = bv.rows();
        let mut out = vec![0.0; n * m];
        kernels::gemm(n, k, m, av.data(), false, bv.data(), true, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::matrix(n, m, out).unwrap(), Op::MatMulNt { a, b }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(
            (av.rows(), av.cols()),
            (bv.rows(), bv.cols()),
            "add: shape mismatch"
        );
        let data: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::matrix(av.rows(), av.cols(), data).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add { a, b }, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * c).collect();
        let t = Tensor::matrix(xv.rows(), xv.cols(), data).unwrap();
        let ng = self.ng(x);
        self.push(t, Op::Scale { x, c }, ng)
    }

    /// `x * exp(sign * s)` for a `1 x 1` node `s`.
    pub fn mul_exp(&mut self, x: Var, s: Var, sign: f64) -> Var {
        let f = (sign * self.scalar(s)).exp();
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * f).collect();
        let t = Tensor::matrix(xv.rows(), xv.cols(), data).unwrap();
        let ng = self.ng(x) || self.ng(s);
        self.push(t, Op::MulExp { x, s, sign }, ng)
    }

    /// Rows of `src` picked by `idx` (repeats allowed).
    pub fn gather(&mut self, src: Var, idx: Vec<usize>) -> Var {
        let sv = self.value(src);
        let rows = sv.rows();
        assert!(idx.iter().all(|&i| i < rows), "gather: index out of range");
        let t = sv.select_rows(&idx);
        let ng = self.ng(src);
        self.push(t, Op::Gather { src, idx }, ng)
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows: width mismatch");
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::matrix(rows, cols, data).unwrap(), Op::Concat { parts }, ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let (out, stats) = kernels::layer_norm_rows(
            xv.data(),
            cols,
            self.value(gain).data(),
            self.value(bias).data(),
            eps,
        );
        let t = Tensor::matrix(xv.rows(), cols, out).unwrap();
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized: stats.normalized,
                inv_std: stats.inv_std,
            },
            ng,
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| kernels::gelu(v)).collect();
        let t = Tensor::matrix(xv.rows(), xv.cols(), data).unwrap();
        let ng = self.ng(x);
        self.push(t, Op::Gelu { x }, ng)
    }

    /// Inverted dropout; identity outside training or for `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let rng = self.rng.as_mut().expect("training graph has an rng");
        let xv = &self.nodes[x.0];
        let n = match xv.op {
            Op::Param(id) => self.params.value(id).len(),
            _ => xv.value.len(),
        };
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::matrix(xv.rows(), xv.cols(), data).unwrap();
        let ng = self.ng(x);
        self.push(t, Op::Dropout { x, mask }, ng)
    }

    /// Scaled dot-product attention on projected `q`, `k`, `v` with
    /// block structure given by `segments`; `dropout` applies to weights.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<AttnSegment>,
        dropout: f64,
    ) -> Var {
        let d = self.value(q).cols();
        assert_eq!(d % heads, 0, "attention: width not divisible by heads");
        assert_eq!(self.value(k).cols(), d);
        assert_eq!(self.value(v).cols(), d);
        assert_eq!(self.value(k).rows(), self.value(v).rows());
        assert!(
            segments.iter().all(|s| !s.kv_rows.is_empty()),
            "attention: empty key segment"
        );
        let keep = if self.train && dropout > 0.0 {
            let total: usize = segments
                .iter()
                .map(|s| heads * s.q_rows.len() * s.kv_rows.len())
                .sum();
            let kp = 1.0 / (1.0 - dropout);
            let rng = self.rng.as_mut().expect("training graph has an rng");
            Some(
                (0..total)
                    .map(|_| if rng.gen::<f64>() < dropout { 0.0 } else { kp })
                    .collect::<Vec<f64>>(),
            )
        } else {
            None
        };
        let rq = self.value(q).rows();
        let (out, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            d,
            heads,
            &segments,
            None,
            keep.as_deref(),
        );
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            Tensor::matrix(rq, d, out).unwrap(),
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
                keep,
            },
            ng,
        )
    }

    /// One output row per segment: the mean of that segment's rows.
    pub fn segment_mean(&mut self, x: Var, segments: Vec<Range<usize>>) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut data = vec![0.0; segments.len() * cols];
        for (s, seg) in segments.iter().enumerate() {
            assert!(!seg.is_empty(), "segment_mean: empty segment");
            let out = &mut data[s * cols..(s + 1) * cols];
            for r in seg.clone() {
                for (o, v) in out.iter_mut().zip(xv.row(r)) {
                    *o += v;
                }
            }
            let inv = 1.0 / seg.len() as f64;
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let t = Tensor::matrix(segments.len(), cols, data).unwrap();
        let ng = self.ng(x);
        self.push(t, Op::SegmentMean { x, segments }, ng)
    }

    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut data = xv.data().to_vec();
        let mut norms = Vec::with_capacity(xv.rows());
        for row in data.chunks_mut(cols) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let t = Tensor::matrix(xv.rows(), cols, data).unwrap();
        let ng = self.ng(x);
        self.push(t, Op::L2Normalize { x, norms }, ng)
    }

    /// Mean softmax cross-entropy over rows, each restricted to its own
    /// candidate columns. Returns a `1 x 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<CeTarget>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "cross_entropy: one target per row");
        assert!(!targets.is_empty(), "cross_entropy: empty batch");
        let mut total = 0.0;
        let mut probs = Vec::with_capacity(targets.len());
        for (r, t) in targets.iter().enumerate() {
            assert!(t.label < t.candidates.len(), "cross_entropy: label out of range");
            let row = lv.row(r);
            let mut p: Vec<f64> = t.candidates.iter().map(|&c| row[c]).collect();
            let lse = kernels::log_sum_exp(&p);
            total += lse - p[t.label];
            kernels::softmax_slice(&mut p);
            probs.push(p);
        }
        let loss = total / targets.len() as f64;
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            ng,
        )
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xv.data()[i * c + j];
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::matrix(c, r, data).unwrap(), Op::Transpose { x }, ng)
    }

    /// Reverse sweep from a `1 x 1` node; returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        if !lv.data()[0].is_finite() {
            return Err(Error::numeric(format!("non-finite loss {}", lv.data()[0])));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::new(self.params.len());

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads, &mut out);
        }
        if !out.all_finite() {
            return Err(Error::numeric("non-finite gradient"));
        }
        Ok(out)
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.ng(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backward_node(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        match &node.op {
            Op::Input => {}
            Op::Param(id) => out.accumulate(*id, g),
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, k, m) = (xv.rows(), xv.cols(), wv.cols());
                if let Some(dx) = self.buf(grads, *x) {
                    kernels::gemm(n, m, k, g, false, wv.data(), true, 1.0, dx);
                }
                if let Some(dw) = self.buf(grads, *w) {
                    kernels::gemm(k, n, m, xv.data(), true, g, false, 1.0, dw);
                }
                if let Some(b) = b {
                    if let Some(db) = self.buf(grads, *b) {
                        for row in g.chunks(m) {
                            db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                    }
                }
            }
            Op::MatMulNt { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (n, k, m) = (av.rows(), av.cols(), bv.rows());
                if let Some(da) = self.buf(grads, *a) {
                    kernels::gemm(n, m, k, g, false, bv.data(), false, 1.0, da);
                }
                if let Some(db) = self.buf(grads, *b) {
                    kernels::gemm(m, n, k, g, true, av.data(), false, 1.0, db);
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(d) = self.buf(grads, *v) {
                        d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(d) = self.buf(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::MulExp { x, s, sign } => {
                let f = (sign * self.scalar(*s)).exp();
                if let Some(d) = self.buf(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += f * y);
                }
                if let Some(ds) = self.buf(grads, *s) {
                    let dot: f64 = g.iter().zip(node.value.data()).map(|(a, b)| a * b).sum();
                    ds[0] += sign * dot;
                }
            }
            Op::Gather { src, idx } => {
                let cols = node.value.cols();
                if let Some(d) = self.buf(grads, *src) {
                    for (r, &i) in idx.iter().enumerate() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        d[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(d) = self.buf(grads, p) {
                        d.iter_mut()
                            .zip(&g[off..off + len])
                            .for_each(|(a, b)| *a += b);
                    }
                    off += len;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let cols = node.value.cols();
                let gv = self.value(*gain).data();
                if let Some(dg) = self.buf(grads, *gain) {
                    for (gr, nr) in g.chunks(cols).zip(normalized.chunks(cols)) {
                        for c in 0..cols {
                            dg[c] += gr[c] * nr[c];
                        }
                    }
                }
                if let Some(db) = self.buf(grads, *bias) {
                    for gr in g.chunks(cols) {
                        db.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                }
                if let Some(dx) = self.buf(grads, *x) {
                    let inv_n = 1.0 / cols as f64;
                    let mut dn = vec![0.0; cols];
                    for (r, (gr, nr)) in g.chunks(cols).zip(normalized.chunks(cols)).enumerate() {
                        let mut mean_dn = 0.0;
                        let mut mean_dn_n = 0.0;
                        for c in 0..cols {
                            dn[c] = gr[c] * gv[c];
                            mean_dn += dn[c];
                            mean_dn_n += dn[c] * nr[c];
                        }
                        mean_dn *= inv_n;
                        mean_dn_n *= inv_n;
                        let istd = inv_std[r];
                        let dxr = &mut dx[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dxr[c] += istd * (dn[c] - mean_dn - nr[c] * mean_dn_n);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(*x);
                if let Some(d) = self.buf(grads, *x) {
                    for ((a, gv), xx) in d.iter_mut().zip(g).zip(xv.data()) {
                        *a += gv * kernels::gelu_grad(*xx);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(d) = self.buf(grads, *x) {
                    for ((a, gv), m) in d.iter_mut().zip(g).zip(mask) {
                        *a += gv * m;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
                keep,
            } => self.attention_backward(
                g,
                grads,
                (*q, *k, *v),
                *heads,
                segments,
                probs,
                keep.as_deref(),
            ),
            Op::SegmentMean { x, segments } => {
                let cols = node.value.cols();
                if let Some(d) = self.buf(grads, *x) {
                    for (s, seg) in segments.iter().enumerate() {
                        let inv = 1.0 / seg.len() as f64;
                        let gs = &g[s * cols..(s + 1) * cols];
                        for r in seg.clone() {
                            d[r * cols..(r + 1) * cols]
                                .iter_mut()
                                .zip(gs)
                                .for_each(|(a, b)| *a += b * inv);
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let cols = node.value.cols();
                if let Some(d) = self.buf(grads, *x) {
                    for (r, (gr, yr)) in g.chunks(cols).zip(node.value.data().chunks(cols)).enumerate() {
                        let yg = kernels::dot(yr, gr);
                        let inv = 1.0 / norms[r];
                        let dr = &mut d[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dr[c] += (gr[c] - yr[c] * yg) * inv;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let cols = self.value(*logits).cols();
                let scale = g[0] / targets.len() as f64;
                if let Some(d) = self.buf(grads, *logits) {
                    for (r, (t, p)) in targets.iter().zip(probs).enumerate() {
                        for (j, (&c, &pj)) in t.candidates.iter().zip(p).enumerate() {
                            let y = if j == t.label { 1.0 } else { 0.0 };
                            d[r * cols + c] += scale * (pj - y);
                        }
                    }
                }
            }
            Op::Transpose { x } => {
                let (r, c) = (node.value.rows(), node.value.cols());
                if let Some(d) = self.buf(grads, *x) {
                    // node is r x c, source is c x r
                    for i in 0..r {
                        for j in 0..c {
                            d[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        (q, k, v): (Var, Var, Var),
        heads: usize,
        segments: &[AttnSegment],
        probs: &[f64],
        keep: Option<&[f64]>,
    ) {
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let d = self.value(q).cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut dp = Vec::new();
        let mut off = 0;
        for seg in segments {
            let nk = seg.kv_rows.len();
            dp.resize(nk, 0.0);
            for h in 0..heads {
                let c0 = h * dh;
                for i in seg.q_rows.clone() {
                    let p = &probs[off..off + nk];
                    let go = &g[i * d + c0..i * d + c0 + dh];
                    let mut sum = 0.0;
                    for (jj, j) in seg.kv_rows.clone().enumerate() {
                        let kf = keep.map_or(1.0, |kp| kp[off + jj]);
                        let vj = &vv[j * d + c0..j * d + c0 + dh];
                        dp[jj] = kernels::dot(go, vj) * kf;
                        sum += dp[jj] * p[jj];
                        let w = p[jj] * kf;
                        if w != 0.0 {
                            let dvj = &mut dv[j * d + c0..j * d + c0 + dh];
                            dvj.iter_mut().zip(go).for_each(|(a, b)| *a += w * b);
                        }
                    }
                    let qi = &qv[i * d + c0..i * d + c0 + dh];
                    for (jj, j) in seg.kv_rows.clone().enumerate() {
                        let ds = p[jj] * (dp[jj] - sum) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &kv[j * d + c0..j * d + c0 + dh];
                        let dqi = &mut dq[i * d + c0..i * d + c0 + dh];
                        dqi.iter_mut().zip(kj).for_each(|(a, b)| *a += ds * b);
                        let dkj = &mut dk[j * d + c0..j * d + c0 + dh];
                        dkj.iter_mut().zip(qi).for_each(|(a, b)| *a += ds * b);
                    }
                    off += nk;
                }
            }
        }
        for (var, local) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(buf) = self.buf(grads, var) {
                buf.iter_mut().zip(&local).for_each(|(a, b)| *a += b);
            }
        }
    }
}
