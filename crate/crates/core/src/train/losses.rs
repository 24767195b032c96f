//! Objectives: candidate cross-entropy, video/caption contrastive
//! alignment and the two ways of combining them.

use std::collections::HashMap;

use crate::config::LossCombination;
use crate::error::{Error, Result};
use crate::numeric::kernels::log_sum_exp;
use crate::numeric::{CeTarget, Graph, Var};

/// Softmax cross-entropy of `logits` against `label`.
pub fn trm_loss(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::argument(format!(
            "label {label} outside {} candidates",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite logit"));
    }
    Ok(log_sum_exp(logits) - logits[label])
}

/// Symmetric in-batch contrastive loss over unit-norm projections `pv`
/// (videos) and `pc` (captions); row `i` of each forms the positive pair.
/// Similarities are divided by `exp(log_temp)`.
pub fn contrastive(g: &mut Graph, pv: Var, pc: Var, log_temp: Var) -> Var {
    let n = g.shape(pv).0;
    assert_eq!(n, g.shape(pc).0, "contrastive: pair count");
    let sims = g.matmul_nt(pv, pc);
    let scaled = g.mul_exp(sims, log_temp, -1.0);
    let targets = |n: usize| -> Vec<CeTarget> {
        (0..n)
            .map(|i| CeTarget {
                candidates: (0..n).collect(),
                label: i,
            })
            .collect()
    };
    let v2c = g.cross_entropy(scaled, targets(n));
    let t = g.transpose(scaled);
    let c2v = g.cross_entropy(t, targets(n));
    let sum = g.add(v2c, c2v);
    g.scale(sum, 0.5)
}

/// Unweighted sum, or the uncertainty-weighted form
/// `exp(-s1)/2 * l1 + exp(-s2)/2 * l2 + s1 + s2` with `s = log sigma^2`.
pub fn combine_losses(
    g: &mut Graph,
    l_trm: Var,
    l_align: Var,
    mode: LossCombination,
    s1: Var,
    s2: Var,
) -> Var {
    match mode {
        LossCombination::Unweighted => g.add(l_trm, l_align),
        LossCombination::Uncertainty => {
            let a = g.mul_exp(l_trm, s1, -1.0);
            let a = g.scale(a, 0.5);
            let b = g.mul_exp(l_align, s2, -1.0);
            let b = g.scale(b, 0.5);
            let ab = g.add(a, b);
            let ab = g.add(ab, s1);
            g.add(ab, s2)
        }
    }
}

/// Scalar form of [`combine_losses`].
pub fn combine_values(l_trm: f64, l_align: f64, mode: LossCombination, s1: f64, s2: f64) -> f64 {
    match mode {
        LossCombination::Unweighted => l_trm + l_align,
        LossCombination::Uncertainty => {
            0.5 * (-s1).exp() * l_trm + 0.5 * (-s2).exp() * l_align + s1 + s2
        }
    }
}

/// Maps answers to their position in the answer vocabulary and counts
/// those that are missing.
#[derive(Clone, Debug)]
pub struct AnswerIndex {
    index: HashMap<Vec<u32>, usize>,
    pub skipped: u64,
}

impl AnswerIndex {
    pub fn new(vocab: &[Vec<u32>]) -> Self {
        AnswerIndex {
            index: vocab.iter().enumerate().map(|(i, a)| (a.clone(), i)).collect(),
            skipped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn lookup(&self, answer: &[u32]) -> Option<usize> {
        self.index.get(answer).copied()
    }

    /// Target over the whole vocabulary, or `None` (counted) when the
    /// answer is not in it.
    pub fn target(&mut self, answer: &[u32]) -> Option<CeTarget> {
        match self.lookup(answer) {
            Some(label) => Some(CeTarget {
                candidates: (0..self.len()).collect(),
                label,
            }),
            None => {
                self.skipped += 1;
                None
            }
        }
    }
}

/// Cross-entropy over the full answer vocabulary; `None` when the answer
/// is outside it (the skip is counted on `index`).
pub fn qa_loss(logits: &[f64], answer: &[u32], index: &mut AnswerIndex) -> Result<Option<f64>> {
    if logits.len() != index.len() {
        return Err(Error::shape("one logit per vocabulary answer"));
    }
    match index.target(answer) {
        Some(t) => trm_loss(logits, t.label).map(Some),
        None => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{Init, ParamGroup, ParamStore, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trm_loss_examples() {
        assert!((trm_loss(&[0.3, 0.3, 0.3], 1).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert!(trm_loss(&[20.0, 0.0, 0.0], 0).unwrap() < 1e-8);
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((trm_loss(&[1.0, 0.0], 0).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.3133).abs() < 1e-4);
        assert!(matches!(trm_loss(&[1.0], 1), Err(Error::Argument(_))));
    }

    fn contrastive_value(pv: Tensor, pc: Tensor, log_temp: f64) -> f64 {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let (a, b) = (g.input(pv), g.input(pc));
        let t = g.input(Tensor::scalar(log_temp));
        let l = contrastive(&mut g, a, b, t);
        g.scalar(l)
    }

    #[test]
    fn contrastive_examples() {
        let one = Tensor::from_rows(&[vec![0.6, 0.8]]);
        assert_eq!(contrastive_value(one.clone(), one, 0.0), 0.0);
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((contrastive_value(eye.clone(), eye, 0.0) - expected).abs() < 1e-12);
    }

    #[test]
    fn combine_examples() {
        use LossCombination::*;
        assert!((combine_values(0.5, 0.3, Unweighted, 0.0, 0.0) - 0.8).abs() < 1e-15);
        assert!((combine_values(0.5, 0.3, Uncertainty, 0.0, 0.0) - 0.4).abs() < 1e-15);
        let h = 0.5f64.ln();
        let v = combine_values(0.5, 0.3, Uncertainty, h, h);
        assert!((v - (0.8 - 2.0 * 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn uncertainty_gradient_vanishes_at_balance() {
        // dL/ds1 = -exp(-s1)/2 * l1 + 1 = 0 exactly when l1 = 2 exp(s1)
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for zero in [true, false] {
            let mut store = ParamStore::new();
            let sid = store.add("s1", &[1, 1], Init::Constant(0.3), ParamGroup::Mlp, false, &mut rng);
            let s1 = store.value(sid).data()[0];
            let l1 = if zero { 2.0 * s1.exp() } else { 1.0 };
            let loss = |s: f64| combine_values(l1, 0.7, LossCombination::Uncertainty, s, 0.0);
            let h = 1e-5;
            let fd = (loss(s1 + h) - loss(s1 - h)) / (2.0 * h);
            let analytic = {
                let mut g = Graph::new(&store);
                let s = g.param(sid);
                let z = g.input(Tensor::scalar(0.0));
                let a = g.input(Tensor::scalar(l1));
                let b = g.input(Tensor::scalar(0.7));
                let l = combine_losses(&mut g, a, b, LossCombination::Uncertainty, s, z);
                assert!((g.scalar(l) - loss(s1)).abs() < 1e-15);
                g.backward(l).unwrap().get(sid).unwrap()[0]
            };
            if zero {
                assert!(analytic.abs() < 1e-12 && fd.abs() < 1e-8, "{analytic} {fd}");
            } else {
                assert!(analytic.abs() > 0.1);
                assert!((analytic - fd).abs() / analytic.abs() < 1e-6);
            }
        }
    }

    #[test]
    fn qa_loss_examples() {
        let vocab = vec![vec![1u32], vec![2]];
        let mut idx = AnswerIndex::new(&vocab);
        let l = qa_loss(&[0.0, 0.0], &[2], &mut idx).unwrap().unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert_eq!(qa_loss(&[0.0, 0.0], &[9], &mut idx).unwrap(), None);
        assert_eq!(idx.skipped, 1);
    }
}
