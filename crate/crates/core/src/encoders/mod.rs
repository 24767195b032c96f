//! Encoding stacks: question/answer text, frame patches, video feature
//! sequences and cross-attention fusion.
//!
//! All encoders work on batches laid out as stacked rows. A [`SeqBatch`]
//! records which rows belong to which item; attention never crosses items.

pub mod cross;
pub mod layers;
pub mod text;
pub mod visual;

use std::ops::Range;

use crate::numeric::{AttnSegment, Var};

pub use cross::CrossEncoder;
pub use layers::{BlockDims, Builder, Linear, Mlp};
pub use text::TextEncoder;
pub use visual::{FrameEncoder, VideoContextualizer};

/// Encoded sequences stacked row-wise, one row range per item. Row
/// `segments[i].start` is item `i`'s classification (or BOS) row.
#[derive(Clone, Debug)]
pub struct SeqBatch {
    pub rows: Var,
    pub segments: Vec<Range<usize>>,
}

impl SeqBatch {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn total_rows(&self) -> usize {
        self.segments.last().map_or(0, |s| s.end)
    }

    pub fn first_rows(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.start).collect()
    }

    /// Block-diagonal self-attention layout.
    pub fn self_segments(&self) -> Vec<AttnSegment> {
        self.segments
            .iter()
            .map(|s| AttnSegment {
                q_rows: s.clone(),
                kv_rows: s.clone(),
            })
            .collect()
    }
}

/// Contiguous row ranges for items of the given lengths.
pub fn segments_from_lengths(lengths: impl IntoIterator<Item = usize>) -> Vec<Range<usize>> {
    let mut start = 0;
    lengths
        .into_iter()
        .map(|n| {
            let r = start..start + n;
            start += n;
            r
        })
        .collect()
}
