//! Concatenation of clips into one feature sequence with exact boundaries.

use rand::seq::index;
use rand::Rng;

use super::world::{gen_clip, Clip, EventVocab};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Ground-truth layout of a concatenated sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub event_ids: Vec<usize>,
    pub captions: Vec<Vec<u32>>,
    pub attribute_ids: Vec<usize>,
    /// `K + 1` cumulative row offsets, starting at 0 and ending at `M`.
    pub boundaries: Vec<usize>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.event_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.event_ids.is_empty()
    }

    pub fn total_rows(&self) -> usize {
        *self.boundaries.last().unwrap_or(&0)
    }
}

/// Per-clip row counts after shrinking a total of `sum(lengths)` to at
/// most `max_total`, keeping every clip non-empty.
pub fn subsampled_lengths(lengths: &[usize], max_total: usize) -> Vec<usize> {
    let total: usize = lengths.iter().sum();
    if total <= max_total {
        return lengths.to_vec();
    }
    let mut out: Vec<usize> = lengths
        .iter()
        .map(|&d| ((d * max_total) / total).max(1))
        .collect();
    while out.iter().sum::<usize>() > max_total {
        let (i, _) = out
            .iter()
            .enumerate()
            .max_by_key(|&(i, &n)| (n, std::cmp::Reverse(i)))
            .expect("non-empty");
        out[i] -= 1;
    }
    out
}

/// Concatenates clip features in order. Clips longer than their share of
/// `max_len` are uniformly subsampled.
pub fn synthesize_sequence(clips: &[Clip], max_len: usize) -> Result<(Tensor, Manifest)> {
    if clips.len() < 2 {
        return Err(Error::argument("a sequence needs at least two clips"));
    }
    if let Some(w) = clips.windows(2).find(|w| w[0].event_id == w[1].event_id) {
        return Err(Error::argument(format!("adjacent clips share event {}", w[0].event_id)));
    }
    concat_clips(clips, max_len)
}

/// Row-wise concatenation without the multi-clip requirement; used for
/// single-clip videos as well.
pub fn concat_clips(clips: &[Clip], max_len: usize) -> Result<(Tensor, Manifest)> {
    if clips.is_empty() || clips.len() > max_len {
        return Err(Error::argument(format!(
            "{} clips cannot fill a video of at most {max_len} rows",
            clips.len()
        )));
    }
    let lengths: Vec<usize> = clips.iter().map(|c| c.duration).collect();
    let kept = subsampled_lengths(&lengths, max_len);
    let h = clips[0].features.cols();
    let mut data = Vec::new();
    let mut boundaries = vec![0];
    for (clip, &n) in clips.iter().zip(&kept) {
        if clip.features.cols() != h {
            return Err(Error::argument("clips differ in feature width"));
        }
        let d = clip.duration;
        for j in 0..n {
            let src = (((j as f64 + 0.5) * d as f64 / n as f64).floor() as usize).min(d - 1);
            data.extend_from_slice(clip.features.row(src));
        }
        boundaries.push(boundaries.last().unwrap() + n);
    }
    let m = *boundaries.last().unwrap();
    Ok((
        Tensor::matrix(m, h, data)?,
        Manifest {
            event_ids: clips.iter().map(|c| c.event_id).collect(),
            captions: clips.iter().map(|c| c.caption.clone()).collect(),
            attribute_ids: clips.iter().map(|c| c.attribute_id).collect(),
            boundaries,
        },
    ))
}

/// `k` clips of distinct events in random order.
pub fn gen_distinct_clips(vocab: &EventVocab, k: usize, rng: &mut impl Rng) -> Result<Vec<Clip>> {
    if k > vocab.event_count() {
        return Err(Error::argument(format!(
            "{k} distinct events requested from {}",
            vocab.event_count()
        )));
    }
    let events = index::sample(rng, vocab.event_count(), k).into_vec();
    events.into_iter().map(|e| gen_clip(vocab, e, rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn clip(event_id: usize, duration: usize) -> Clip {
        let data = (0..duration * 2).map(|i| (event_id * 100 + i) as f64).collect();
        Clip {
            event_id,
            duration,
            features: Tensor::matrix(duration, 2, data).unwrap(),
            caption: vec![event_id as u32],
            attribute_id: 0,
        }
    }

    #[test]
    fn concatenation_arithmetic() {
        let (f, m) = synthesize_sequence(&[clip(0, 3), clip(1, 4)], 100).unwrap();
        assert_eq!(f.rows(), 7);
        assert_eq!(m.boundaries, vec![0, 3, 7]);
        assert_eq!(f.row(3), clip(1, 4).features.row(0));
    }

    #[test]
    fn rejects_short_or_colliding_sequences() {
        assert!(synthesize_sequence(&[clip(0, 3)], 100).is_err());
        assert!(synthesize_sequence(&[clip(0, 3), clip(0, 2)], 100).is_err());
    }

    #[test]
    fn eight_clips_accepted() {
        let clips: Vec<Clip> = (0..8).map(|e| clip(e, 2 + e % 3)).collect();
        let (_, m) = synthesize_sequence(&clips, 100).unwrap();
        assert_eq!(m.len(), 8);
    }

    proptest! {
        #[test]
        fn subsampling_keeps_order_and_every_clip(
            durations in proptest::collection::vec(1usize..30, 2..9),
            max_len in 9usize..40,
        ) {
            let clips: Vec<Clip> = durations.iter().enumerate().map(|(e, &d)| clip(e, d)).collect();
            let (f, m) = synthesize_sequence(&clips, max_len).unwrap();
            prop_assert!(f.rows() <= max_len);
            prop_assert_eq!(f.rows(), m.total_rows());
            for k in 0..clips.len() {
                let (a, b) = (m.boundaries[k], m.boundaries[k + 1]);
                prop_assert!(b > a);
                // every row of clip k came from clip k, in non-decreasing source order
                let mut last = None;
                for r in a..b {
                    let v = f.row(r)[0] as usize;
                    prop_assert_eq!(v / 100, k);
                    if let Some(l) = last { prop_assert!(v >= l); }
                    last = Some(v);
                }
            }
        }
    }
}
