use rand::Rng;

use super::layers::{BlockDims, Builder, CrossInput, Stack};
use super::{segments_from_lengths, SeqBatch};
use crate::error::{Error, Result};
use crate::numeric::{AttnSegment, Graph};

/// Fusion stack: text rows self-attend, then attend to visual rows as
/// keys and values. Output has one row per text row.
#[derive(Clone, Debug)]
pub struct CrossEncoder {
    pub stack: Stack,
}

impl CrossEncoder {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, layers: usize, dims: BlockDims) -> Self {
        CrossEncoder {
            stack: Stack::new(b, name, layers, dims, true),
        }
    }

    /// Fuses text item `t` with visual item `v` for every `(t, v)` in
    /// `pairs`; output item `i` corresponds to `pairs[i]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        text: &SeqBatch,
        visual: &SeqBatch,
        pairs: &[(usize, usize)],
    ) -> Result<SeqBatch> {
        if pairs.is_empty() {
            return Err(Error::argument("no text/visual pairs to fuse"));
        }
        let mut idx = Vec::new();
        let mut lengths = Vec::with_capacity(pairs.len());
        for &(t, v) in pairs {
            let (Some(ts), Some(vs)) = (text.segments.get(t), visual.segments.get(v)) else {
                return Err(Error::argument(format!("pair ({t}, {v}) out of range")));
            };
            if vs.is_empty() {
                return Err(Error::argument("empty visual input"));
            }
            idx.extend(ts.clone());
            lengths.push(ts.len());
        }
        let segments = segments_from_lengths(lengths);
        let cross_segments = segments
            .iter()
            .zip(pairs)
            .map(|(s, &(_, v))| AttnSegment {
                q_rows: s.clone(),
                kv_rows: visual.segments[v].clone(),
            })
            .collect();
        let x = g.gather(text.rows, idx);
        let batch = SeqBatch { rows: x, segments };
        let cross = CrossInput {
            kv: visual.rows,
            segments: cross_segments,
        };
        let rows = self.stack.forward(g, x, &batch.self_segments(), Some(&cross));
        Ok(SeqBatch { rows, ..batch })
    }
}
