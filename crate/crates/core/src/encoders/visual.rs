use rand::Rng;

use super::layers::{BlockDims, Builder, Linear, Stack};
use super::{segments_from_lengths, SeqBatch};
use crate::error::{Error, Result};
use crate::numeric::{Graph, Init, ParamId, Tensor};

fn stack_inputs(mats: &[&Tensor]) -> Tensor {
    let cols = mats[0].cols();
    let mut data = Vec::with_capacity(mats.iter().map(|m| m.len()).sum());
    let mut rows = 0;
    for m in mats {
        data.extend_from_slice(m.data());
        rows += m.rows();
    }
    Tensor::matrix(rows, cols, data).expect("stacked shape")
}

/// Per-frame patch encoder. Frames never attend to each other.
#[derive(Clone, Debug)]
pub struct FrameEncoder {
    pub proj: Linear,
    pub cls: ParamId,
    /// `(N + 1) x D`.
    pub positions: ParamId,
    pub stack: Stack,
    pub num_patches: usize,
    pub patch_size: usize,
    pub dropout: f64,
}

impl FrameEncoder {
    pub fn new<R: Rng>(
        b: &mut Builder<R>,
        name: &str,
        num_patches: usize,
        patch_size: usize,
        layers: usize,
        dims: BlockDims,
    ) -> Self {
        let d = dims.d;
        FrameEncoder {
            proj: Linear::new(b, &format!("{name}.proj"), patch_size, d, true),
            cls: b.param(&format!("{name}.cls"), &[1, d], Init::Normal(0.5), false),
            positions: b.param(&format!("{name}.pos"), &[num_patches + 1, d], Init::Normal(0.5), false),
            stack: Stack::new(b, name, layers, dims, false),
            num_patches,
            patch_size,
            dropout: dims.dropout,
        }
    }

    /// Encodes each `N x patch_size` frame into `N + 1` rows.
    pub fn forward(&self, g: &mut Graph, frames: &[&Tensor]) -> Result<SeqBatch> {
        if frames.is_empty() {
            return Err(Error::argument("empty frame list"));
        }
        for f in frames {
            if f.rank() != 2 || f.rows() != self.num_patches || f.cols() != self.patch_size {
                return Err(Error::argument(format!(
                    "frame shape {:?}, expected [{}, {}]",
                    f.shape(),
                    self.num_patches,
                    self.patch_size
                )));
            }
        }
        let n = self.num_patches;
        let raw = g.input(stack_inputs(frames));
        let projected = self.proj.forward(g, raw);
        let cls = g.param(self.cls);
        let pool = g.concat_rows(vec![cls, projected]);
        let mut idx = Vec::with_capacity(frames.len() * (n + 1));
        let mut pos_idx = Vec::with_capacity(idx.capacity());
        for f in 0..frames.len() {
            idx.push(0);
            idx.extend((0..n).map(|p| 1 + f * n + p));
            pos_idx.extend(0..=n);
        }
        let x = g.gather(pool, idx);
        let positions = g.param(self.positions);
        let pos = g.gather(positions, pos_idx);
        let x = g.add(x, pos);
        let x = g.dropout(x, self.dropout);
        let batch = SeqBatch {
            rows: x,
            segments: segments_from_lengths(std::iter::repeat(n + 1).take(frames.len())),
        };
        let rows = self.stack.forward(g, x, &batch.self_segments(), None);
        Ok(SeqBatch { rows, ..batch })
    }
}

/// Initial scale of the temporal position table. Large enough that order
/// survives the input layer norm next to the projected features.
pub const TEMPORAL_POSITION_AMPLITUDE: f64 = 3.0;

/// Video feature contextualizer: `H -> D` projection, learnable BOS/EOS
/// rows, temporal positions over all `M + 2` rows, self-attention stack.
#[derive(Clone, Debug)]
pub struct VideoContextualizer {
    pub proj: Linear,
    pub bos: ParamId,
    pub eos: ParamId,
    /// `(max_len + 2) x D`.
    pub positions: ParamId,
    pub stack: Stack,
    pub feature_size: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl VideoContextualizer {
    pub fn new<R: Rng>(
        b: &mut Builder<R>,
        name: &str,
        feature_size: usize,
        max_len: usize,
        layers: usize,
        dims: BlockDims,
    ) -> Self {
        let d = dims.d;
        VideoContextualizer {
            proj: Linear::new(b, &format!("{name}.proj"), feature_size, d, true),
            bos: b.param(&format!("{name}.bos"), &[1, d], Init::Normal(0.5), false),
            eos: b.param(&format!("{name}.eos"), &[1, d], Init::Normal(0.5), false),
            positions: b.param(&format!("{name}.pos"), &[max_len + 2, d], Init::Sinusoidal(TEMPORAL_POSITION_AMPLITUDE), false),
            stack: Stack::new(b, name, layers, dims, false),
            feature_size,
            max_len,
            dropout: dims.dropout,
        }
    }

    pub fn validate(&self, e: &Tensor) -> Result<()> {
        if e.rank() != 2 || e.rows() == 0 {
            return Err(Error::argument("video has no feature rows"));
        }
        if e.rows() > self.max_len {
            return Err(Error::argument(format!(
                "video length {} exceeds maximum {}",
                e.rows(),
                self.max_len
            )));
        }
        if e.cols() != self.feature_size {
            return Err(Error::argument(format!(
                "feature width {}, expected {}",
                e.cols(),
                self.feature_size
            )));
        }
        Ok(())
    }

    /// Encodes each `M x H` video into `M + 2` rows `[bos, v_1..v_M, eos]`.
    pub fn forward(&self, g: &mut Graph, videos: &[&Tensor]) -> Result<SeqBatch> {
        if videos.is_empty() {
            return Err(Error::argument("no videos to contextualize"));
        }
        for v in videos {
            self.validate(v)?;
        }
        let raw = g.input(stack_inputs(videos));
        let projected = self.proj.forward(g, raw);
        let bos = g.param(self.bos);
        let eos = g.param(self.eos);
        let pool = g.concat_rows(vec![bos, eos, projected]);
        let mut idx = Vec::new();
        let mut pos_idx = Vec::new();
        let mut offset = 2;
        for v in videos {
            let m = v.rows();
            idx.push(0);
            idx.extend(offset..offset + m);
            idx.push(1);
            pos_idx.extend(0..m + 2);
            offset += m;
        }
        let x = g.gather(pool, idx);
        let positions = g.param(self.positions);
        let pos = g.gather(positions, pos_idx);
        let x = g.add(x, pos);
        let x = g.dropout(x, self.dropout);
        let batch = SeqBatch {
            rows: x,
            segments: segments_from_lengths(videos.iter().map(|v| v.rows() + 2)),
        };
        let rows = self.stack.forward(g, x, &batch.self_segments(), None);
        Ok(SeqBatch { rows, ..batch })
    }
}
