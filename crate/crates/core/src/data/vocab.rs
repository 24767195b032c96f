use std::collections::{BTreeMap, HashSet};

use crate::error::{Error, Result};

/// Answers seen more than once, most frequent first, ties broken by
/// ascending token list.
pub fn build_answer_vocabulary<'a>(answers: impl IntoIterator<Item = &'a [u32]>) -> Result<Vec<Vec<u32>>> {
    let mut freq: BTreeMap<&[u32], usize> = BTreeMap::new();
    let mut any = false;
    for a in answers {
        *freq.entry(a).or_default() += 1;
        any = true;
    }
    if !any {
        return Err(Error::argument("no training answers"));
    }
    let mut kept: Vec<(&[u32], usize)> = freq.into_iter().filter(|&(_, n)| n > 1).collect();
    if kept.is_empty() {
        return Err(Error::config("no answer occurs more than once; world too small"));
    }
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(kept.into_iter().map(|(a, _)| a.to_vec()).collect())
}

/// Fraction of `test` answers present in `vocab`, or `None` when `test`
/// is empty.
pub fn coverage<'a>(vocab: &[Vec<u32>], test: impl IntoIterator<Item = &'a [u32]>) -> Option<f64> {
    let known: HashSet<&[u32]> = vocab.iter().map(|v| v.as_slice()).collect();
    let (mut hit, mut n) = (0usize, 0usize);
    for a in test {
        n += 1;
        hit += known.contains(a) as usize;
    }
    (n > 0).then(|| hit as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_rule_and_order() {
        let (a, b, c) = (vec![1u32], vec![2u32], vec![3u32]);
        let answers = [&a, &a, &a, &b, &c, &c];
        let v = build_answer_vocabulary(answers.iter().map(|x| x.as_slice())).unwrap();
        assert_eq!(v, vec![a.clone(), c.clone()]);
    }

    #[test]
    fn singletons_only_is_config_error() {
        let answers = [vec![1u32], vec![2]];
        let err = build_answer_vocabulary(answers.iter().map(|x| x.as_slice())).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn ties_broken_by_tokens() {
        let answers = [vec![9u32], vec![4], vec![9], vec![4], vec![4, 1], vec![4, 1]];
        let v = build_answer_vocabulary(answers.iter().map(|x| x.as_slice())).unwrap();
        assert_eq!(v, vec![vec![4], vec![4, 1], vec![9]]);
    }

    #[test]
    fn coverage_bounds() {
        let v = vec![vec![1u32], vec![2]];
        assert_eq!(coverage(&v, v.iter().map(|a| a.as_slice())), Some(1.0));
        let other = [vec![7u32]];
        assert_eq!(coverage(&v, other.iter().map(|a| a.as_slice())), Some(0.0));
    }
}
