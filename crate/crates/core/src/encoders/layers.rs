//! Transformer building blocks recorded on a [`Graph`].

use rand::Rng;

use crate::numeric::{AttnSegment, Graph, Init, ParamGroup, ParamId, ParamStore, Var};

pub const LN_EPS: f64 = 1e-5;

/// Shared construction context: parameter table, group and init stream.
pub struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub group: ParamGroup,
    pub rng: &'a mut R,
}

impl<'a, R: Rng> Builder<'a, R> {
    pub fn new(store: &'a mut ParamStore, group: ParamGroup, rng: &'a mut R) -> Self {
        Builder { store, group, rng }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init, decay: bool) -> ParamId {
        self.store.add(name, shape, init, self.group, decay, self.rng)
    }

    pub fn with_group(&mut self, group: ParamGroup) -> Builder<'_, R> {
        Builder {
            store: self.store,
            group,
            rng: self.rng,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Self::with_std(b, name, fan_in, fan_out, bias, 1.0 / (fan_in as f64).sqrt())
    }

    pub fn with_std<R: Rng>(
        b: &mut Builder<R>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        std: f64,
    ) -> Self {
        let w = b.param(&format!("{name}.weight"), &[fan_in, fan_out], Init::Normal(std), true);
        let bias = bias.then(|| b.param(&format!("{name}.bias"), &[1, fan_out], Init::Zeros, false));
        Linear { w, b: bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: b.param(&format!("{name}.gain"), &[1, d], Init::Ones, false),
            bias: b.param(&format!("{name}.bias"), &[1, d], Init::Zeros, false),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Multi-head attention with learned projections. The key projection has
/// no bias: a per-query constant added to every score cancels in softmax.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dropout: f64,
}

impl Attention {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, d: usize, heads: usize, dropout: f64) -> Self {
        Attention {
            q: Linear::new(b, &format!("{name}.q"), d, d, true),
            k: Linear::new(b, &format!("{name}.k"), d, d, false),
            v: Linear::new(b, &format!("{name}.v"), d, d, true),
            o: Linear::new(b, &format!("{name}.o"), d, d, true),
            heads,
            dropout,
        }
    }

    pub fn forward(&self, g: &mut Graph, queries: Var, kv: Var, segments: Vec<AttnSegment>) -> Var {
        let q = self.q.forward(g, queries);
        let k = self.k.forward(g, kv);
        let v = self.v.forward(g, kv);
        let ctx = g.attention(q, k, v, self.heads, segments, self.dropout);
        self.o.forward(g, ctx)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, d: usize, hidden: usize) -> Self {
        FeedForward {
            up: Linear::new(b, &format!("{name}.up"), d, hidden, true),
            down: Linear::new(b, &format!("{name}.down"), hidden, d, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Cross-attention input for a layer: visual rows and the block structure
/// pairing each text segment with its visual segment.
pub struct CrossInput {
    pub kv: Var,
    pub segments: Vec<AttnSegment>,
}

/// Pre-norm residual block: self-attention, optional cross-attention,
/// feed-forward.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub cross: Option<(LayerNorm, Attention)>,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
    pub dropout: f64,
}

/// Shape parameters shared by the blocks of one stack.
#[derive(Clone, Copy, Debug)]
pub struct BlockDims {
    pub d: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
}

impl Block {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, dims: BlockDims, with_cross: bool) -> Self {
        let BlockDims {
            d,
            heads,
            ffn_hidden,
            dropout,
            attention_dropout,
        } = dims;
        let cross = with_cross.then(|| {
            (
                LayerNorm::new(b, &format!("{name}.ln_cross"), d),
                Attention::new(b, &format!("{name}.cross_attn"), d, heads, attention_dropout),
            )
        });
        Block {
            ln_self: LayerNorm::new(b, &format!("{name}.ln_self"), d),
            self_attn: Attention::new(b, &format!("{name}.self_attn"), d, heads, attention_dropout),
            cross,
            ln_ffn: LayerNorm::new(b, &format!("{name}.ln_ffn"), d),
            ffn: FeedForward::new(b, &format!("{name}.ffn"), d, ffn_hidden),
            dropout,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        self_segments: &[AttnSegment],
        cross: Option<&CrossInput>,
    ) -> Var {
        let h = self.ln_self.forward(g, x);
        let h = self.self_attn.forward(g, h, h, self_segments.to_vec());
        let h = g.dropout(h, self.dropout);
        let mut x = g.add(x, h);
        if let (Some((ln, attn)), Some(c)) = (&self.cross, cross) {
            let h = ln.forward(g, x);
            let h = attn.forward(g, h, c.kv, c.segments.clone());
            let h = g.dropout(h, self.dropout);
            x = g.add(x, h);
        }
        let h = self.ln_ffn.forward(g, x);
        let h = self.ffn.forward(g, h);
        let h = g.dropout(h, self.dropout);
        g.add(x, h)
    }
}

/// Blocks followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct Stack {
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
}

impl Stack {
    pub fn new<R: Rng>(
        b: &mut Builder<R>,
        name: &str,
        layers: usize,
        dims: BlockDims,
        with_cross: bool,
    ) -> Self {
        let blocks = (0..layers)
            .map(|i| Block::new(b, &format!("{name}.layer{i}"), dims, with_cross))
            .collect();
        Stack {
            blocks,
            ln_final: LayerNorm::new(b, &format!("{name}.ln_final"), dims.d),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        mut x: Var,
        self_segments: &[AttnSegment],
        cross: Option<&CrossInput>,
    ) -> Var {
        for block in &self.blocks {
            x = block.forward(g, x, self_segments, cross);
        }
        self.ln_final.forward(g, x)
    }
}

/// Two-layer head with GELU between, hidden width equal to the input.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, d: usize) -> Self {
        Mlp {
            hidden: Linear::new(b, &format!("{name}.hidden"), d, d, true),
            // small output init keeps initial answer logits near zero
            out: Linear::with_std(b, &format!("{name}.out"), d, d, true, 0.1 / (d as f64).sqrt()),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.hidden.forward(g, x);
        let h = g.gelu(h);
        self.out.forward(g, h)
    }
}
