use rand::Rng;

use super::layers::{BlockDims, Builder, Stack};
use super::{segments_from_lengths, SeqBatch};
use crate::error::{Error, Result};
use crate::numeric::{Graph, Init, ParamId};

/// Token embedding, learned positions and a self-attention stack. Row 0
/// of every encoded item is the classification slot.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    /// `(1 + vocab) x D`; row 0 is the classification embedding.
    pub table: ParamId,
    /// `(max_len + 1) x D`.
    pub positions: ParamId,
    pub stack: Stack,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl TextEncoder {
    pub fn new<R: Rng>(
        b: &mut Builder<R>,
        name: &str,
        vocab_size: usize,
        max_len: usize,
        layers: usize,
        dims: BlockDims,
    ) -> Self {
        let d = dims.d;
        TextEncoder {
            table: b.param(&format!("{name}.embed"), &[vocab_size + 1, d], Init::Normal(0.5), false),
            positions: b.param(&format!("{name}.pos"), &[max_len + 1, d], Init::Normal(0.5), false),
            stack: Stack::new(b, name, layers, dims, false),
            vocab_size,
            max_len,
            dropout: dims.dropout,
        }
    }

    pub fn validate(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::argument("empty token list"));
        }
        if tokens.len() > self.max_len {
            return Err(Error::argument(format!(
                "{} tokens exceeds maximum length {}",
                tokens.len(),
                self.max_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::argument(format!(
                "token id {t} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Encodes each token list into `len + 1` rows.
    pub fn forward(&self, g: &mut Graph, items: &[&[u32]]) -> Result<SeqBatch> {
        if items.is_empty() {
            return Err(Error::argument("no token lists to encode"));
        }
        let mut tok_idx = Vec::new();
        let mut pos_idx = Vec::new();
        for tokens in items {
            self.validate(tokens)?;
            tok_idx.push(0);
            tok_idx.extend(tokens.iter().map(|&t| t as usize + 1));
            pos_idx.extend(0..=tokens.len());
        }
        let table = g.param(self.table);
        let positions = g.param(self.positions);
        let emb = g.gather(table, tok_idx);
        let pos = g.gather(positions, pos_idx);
        let x = g.add(emb, pos);
        let x = g.dropout(x, self.dropout);
        let segments = segments_from_lengths(items.iter().map(|t| t.len() + 1));
        let batch = SeqBatch { rows: x, segments };
        let rows = self.stack.forward(g, x, &batch.self_segments(), None);
        Ok(SeqBatch { rows, ..batch })
    }
}
