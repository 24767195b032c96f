//! The two-stream model: an image-language stream over sampled frames and
//! a video-language stream over the contextualized feature sequence,
//! scored against encoded answer candidates by dot product.

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, Variant};
use crate::encoders::layers::Builder;
use crate::encoders::{
    BlockDims, CrossEncoder, FrameEncoder, Linear, Mlp, SeqBatch, TextEncoder,
    VideoContextualizer,
};
use crate::error::{Error, Result};
use crate::numeric::{Graph, Init, ParamGroup, ParamId, ParamStore, Tensor, Var};

/// Which streams contribute to the answer logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamMask {
    pub use_il: bool,
    pub use_vl: bool,
}

impl StreamMask {
    pub const BOTH: StreamMask = StreamMask {
        use_il: true,
        use_vl: true,
    };
    pub const IL_ONLY: StreamMask = StreamMask {
        use_il: true,
        use_vl: false,
    };
    pub const VL_ONLY: StreamMask = StreamMask {
        use_il: false,
        use_vl: true,
    };

    pub fn label(&self) -> &'static str {
        match (self.use_il, self.use_vl) {
            (true, true) => "both",
            (true, false) => "il",
            (false, true) => "vl",
            (false, false) => "none",
        }
    }
}

/// Fused representations and candidate scores for one item.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamOutputs {
    pub r: Vec<f64>,
    pub s: Vec<f64>,
    pub logits: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Train,
    Eval,
}

/// Frame indices for one video: uniform slots at evaluation, a random
/// sorted subset during training.
pub fn sample_frames(frame_count: usize, t: usize, mode: SampleMode, rng: &mut impl Rng) -> Vec<usize> {
    if frame_count == 0 || t == 0 {
        return Vec::new();
    }
    let mut out: Vec<usize> = match mode {
        SampleMode::Eval => {
            // evenly spaced over [0, frame_count - 1], endpoints included
            let last = (frame_count - 1) as f64;
            let mut v: Vec<usize> = (0..t)
                .map(|j| {
                    if t == 1 {
                        (last / 2.0).round() as usize
                    } else {
                        (j as f64 * last / (t - 1) as f64).round() as usize
                    }
                })
                .collect();
            v.dedup();
            v
        }
        SampleMode::Train if frame_count >= t => index::sample(rng, frame_count, t).into_vec(),
        SampleMode::Train => (0..t).map(|_| rng.gen_range(0..frame_count)).collect(),
    };
    out.sort_unstable();
    out
}

/// `(r' + s') . z` for every candidate `z`, with masked streams zeroed.
pub fn answer_logits(r: &[f64], s: &[f64], answers: &[Vec<f64>], mask: StreamMask) -> Result<Vec<f64>> {
    if answers.is_empty() {
        return Err(Error::argument("empty answer list"));
    }
    let d = r.len().max(s.len());
    let combined: Vec<f64> = (0..d)
        .map(|i| {
            let a = if mask.use_il { r.get(i).copied().unwrap_or(0.0) } else { 0.0 };
            let b = if mask.use_vl { s.get(i).copied().unwrap_or(0.0) } else { 0.0 };
            a + b
        })
        .collect();
    answers
        .iter()
        .map(|z| {
            if z.len() != d {
                return Err(Error::shape("answer vector width"));
            }
            Ok(combined.iter().zip(z).map(|(a, b)| a * b).sum())
        })
        .collect()
}

/// One question with its visual inputs. `frames` are the already-sampled
/// patch matrices; they may be empty when the image stream is masked.
#[derive(Clone, Debug)]
pub struct StreamInput<'a> {
    pub question: &'a [u32],
    pub frames: Vec<&'a Tensor>,
    pub video: &'a Tensor,
}

/// Intermediate nodes of a batched forward pass.
pub struct Representations {
    pub question: SeqBatch,
    pub video: Option<SeqBatch>,
    pub r: Option<Var>,
    pub s: Option<Var>,
    /// `B x D` vector every answer is scored against.
    pub combined: Var,
}

/// Module structure; parameter values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub question: TextEncoder,
    pub answer: TextEncoder,
    pub frames: FrameEncoder,
    pub video: VideoContextualizer,
    pub il_cross: CrossEncoder,
    pub vl_cross: CrossEncoder,
    pub il_head: Mlp,
    pub vl_head: Mlp,
    pub text_head: Mlp,
    pub align_video: Linear,
    pub align_caption: Linear,
    pub log_temp: ParamId,
    pub loss_s1: ParamId,
    pub loss_s2: ParamId,
    pub variant: Variant,
}

impl Network {
    fn build(cfg: &ModelConfig, vocab_size: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let dims = BlockDims {
            d: cfg.embedding_size,
            heads: cfg.num_heads,
            ffn_hidden: cfg.ffn_hidden_size,
            dropout: cfg.dropout,
            attention_dropout: cfg.attention_dropout,
        };
        let d = cfg.embedding_size;
        let layers = cfg.num_layers;
        let mut b = Builder::new(store, ParamGroup::Base, rng);
        let question = TextEncoder::new(&mut b, "question", vocab_size, cfg.max_question_length, layers, dims);
        let frames = FrameEncoder::new(&mut b, "frame", cfg.num_patches, cfg.patch_size, layers, dims);
        let il_cross = CrossEncoder::new(&mut b, "il_cross", layers, dims);
        let (video, vl_cross) = {
            let mut b = b.with_group(ParamGroup::Video);
            (
                VideoContextualizer::new(&mut b, "video", cfg.video_feature_size, cfg.max_video_length, layers, dims),
                CrossEncoder::new(&mut b, "vl_cross", layers, dims),
            )
        };
        let answer = {
            let mut b = b.with_group(ParamGroup::Answer);
            TextEncoder::new(&mut b, "answer", vocab_size, cfg.max_question_length, layers, dims)
        };
        let mut b = b.with_group(ParamGroup::Mlp);
        let p = cfg.projection_dim();
        Network {
            il_head: Mlp::new(&mut b, "il_head", d),
            vl_head: Mlp::new(&mut b, "vl_head", d),
            text_head: Mlp::new(&mut b, "text_head", d),
            align_video: Linear::new(&mut b, "align_video", d, p, true),
            align_caption: Linear::new(&mut b, "align_caption", d, p, true),
            log_temp: b.param("log_temp", &[1, 1], Init::Constant(cfg.init_temperature.ln()), false),
            loss_s1: b.param("loss_s1", &[1, 1], Init::Zeros, false),
            loss_s2: b.param("loss_s2", &[1, 1], Init::Zeros, false),
            question,
            answer,
            frames,
            video,
            il_cross,
            vl_cross,
            variant: cfg.variant,
        }
    }

    /// Encodes questions and visual inputs and returns the vector each
    /// answer is scored against.
    pub fn represent(&self, g: &mut Graph, items: &[StreamInput], mask: StreamMask) -> Result<Representations> {
        if items.is_empty() {
            return Err(Error::argument("empty batch"));
        }
        let questions: Vec<&[u32]> = items.iter().map(|i| i.question).collect();
        let question = self.question.forward(g, &questions)?;
        self.fuse(g, question, items, mask)
    }

    /// Like [`Network::represent`] with questions already encoded. Item
    /// `b` uses text segment `b`; extra trailing segments are ignored.
    pub fn fuse(
        &self,
        g: &mut Graph,
        question: SeqBatch,
        items: &[StreamInput],
        mask: StreamMask,
    ) -> Result<Representations> {
        if items.is_empty() || question.len() < items.len() {
            return Err(Error::argument("question encodings do not cover the batch"));
        }
        if self.variant == Variant::QuestionOnly {
            let cls = g.gather(question.rows, question.first_rows()[..items.len()].to_vec());
            let combined = self.text_head.forward(g, cls);
            return Ok(Representations {
                question,
                video: None,
                r: None,
                s: None,
                combined,
            });
        }
        if !mask.use_il && !mask.use_vl {
            return Err(Error::argument("at least one stream must be enabled"));
        }

        let r = if mask.use_il {
            let mut frames = Vec::new();
            let mut pairs = Vec::new();
            let mut per_item = Vec::with_capacity(items.len());
            for (b, item) in items.iter().enumerate() {
                if item.frames.is_empty() {
                    return Err(Error::argument("empty frame list"));
                }
                let start = pairs.len();
                for f in &item.frames {
                    pairs.push((b, frames.len()));
                    frames.push(*f);
                }
                per_item.push(start..pairs.len());
            }
            let encoded = self.frames.forward(g, &frames)?;
            let x = self.il_cross.forward(g, &question, &encoded, &pairs)?;
            let cls = g.gather(x.rows, x.first_rows());
            let per_frame = self.il_head.forward(g, cls);
            Some(g.segment_mean(per_frame, per_item))
        } else {
            None
        };

        let (video, s) = if mask.use_vl {
            let videos: Vec<&Tensor> = items.iter().map(|i| i.video).collect();
            let video = self.video.forward(g, &videos)?;
            let pairs: Vec<(usize, usize)> = (0..items.len()).map(|b| (b, b)).collect();
            let y = self.vl_cross.forward(g, &question, &video, &pairs)?;
            let cls = g.gather(y.rows, y.first_rows());
            let s = self.vl_head.forward(g, cls);
            (Some(video), Some(s))
        } else {
            (None, None)
        };

        let combined = match (r, s) {
            (Some(r), Some(s)) => g.add(r, s),
            (Some(r), None) => r,
            (None, Some(s)) => s,
            (None, None) => unreachable!(),
        };
        Ok(Representations {
            question,
            video,
            r,
            s,
            combined,
        })
    }

    /// Classification vectors of the answer encoder, one row per candidate.
    pub fn encode_answers(&self, g: &mut Graph, answers: &[&[u32]]) -> Result<Var> {
        if answers.is_empty() {
            return Err(Error::argument("empty candidate list"));
        }
        let enc = self.answer.forward(g, answers)?;
        Ok(g.gather(enc.rows, enc.first_rows()))
    }
}

/// Model structure together with its parameters.
#[derive(Clone, Debug)]
pub struct DestModel {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub params: ParamStore,
    pub net: Network,
}

impl DestModel {
    pub fn new(config: &ModelConfig, vocab_size: usize, init_seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(Error::config("vocabulary is empty"));
        }
        let mut rng = crate::rng::indexed(init_seed, 0);
        let mut params = ParamStore::new();
        let net = Network::build(config, vocab_size, &mut params, &mut rng);
        Ok(DestModel {
            config: config.clone(),
            vocab_size,
            params,
            net,
        })
    }

    pub fn embedding_size(&self) -> usize {
        self.config.embedding_size
    }

    fn eval<T>(&self, f: impl FnOnce(&mut Graph, &Network) -> Result<T>) -> Result<T> {
        let mut g = Graph::new(&self.params);
        f(&mut g, &self.net)
    }

    /// `(L + 1) x D` question encoding.
    pub fn encode_text(&self, tokens: &[u32]) -> Result<Tensor> {
        self.eval(|g, net| {
            let b = net.question.forward(g, &[tokens])?;
            Ok(g.value(b.rows).clone())
        })
    }

    /// One `(N + 1) x D` encoding per frame.
    pub fn encode_frames(&self, frames: &[Tensor]) -> Result<Vec<Tensor>> {
        let refs: Vec<&Tensor> = frames.iter().collect();
        self.eval(|g, net| {
            let b = net.frames.forward(g, &refs)?;
            let all = g.value(b.rows);
            Ok(b.segments
                .iter()
                .map(|s| all.select_rows(&s.clone().collect::<Vec<_>>()))
                .collect())
        })
    }

    /// `(M + 2) x D` contextualized video rows `[bos, v_1..v_M, eos]`.
    pub fn contextualize_video(&self, e: &Tensor) -> Result<Tensor> {
        self.eval(|g, net| {
            let b = net.video.forward(g, &[e])?;
            Ok(g.value(b.rows).clone())
        })
    }

    /// Fuses an encoded text with visual rows through the given stream's
    /// cross encoder.
    pub fn cross_encode(&self, video_stream: bool, text: &Tensor, visual: &Tensor) -> Result<Tensor> {
        if visual.rank() != 2 || visual.rows() == 0 {
            return Err(Error::argument("empty visual input"));
        }
        self.eval(|g, net| {
            let t = SeqBatch {
                rows: g.input(text.clone()),
                segments: vec![0..text.rows()],
            };
            let v = SeqBatch {
                rows: g.input(visual.clone()),
                segments: vec![0..visual.rows()],
            };
            let enc = if video_stream { &net.vl_cross } else { &net.il_cross };
            let out = enc.forward(g, &t, &v, &[(0, 0)])?;
            Ok(g.value(out.rows).clone())
        })
    }

    /// Answer classification vectors.
    pub fn encode_answers(&self, candidates: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let refs: Vec<&[u32]> = candidates.iter().map(|c| c.as_slice()).collect();
        self.eval(|g, net| {
            let z = net.encode_answers(g, &refs)?;
            let zv = g.value(z);
            Ok((0..zv.rows()).map(|i| zv.row(i).to_vec()).collect())
        })
    }

    /// Mean over frames of the head applied to each frame's fused
    /// classification row. Inputs are encoded question and frame matrices.
    pub fn il_representation(&self, question: &Tensor, frames: &[Tensor]) -> Result<Vec<f64>> {
        if frames.is_empty() {
            return Err(Error::argument("empty frame list"));
        }
        self.eval(|g, net| {
            let q = SeqBatch {
                rows: g.input(question.clone()),
                segments: vec![0..question.rows()],
            };
            let refs: Vec<&Tensor> = frames.iter().collect();
            let stacked = Tensor::matrix(
                frames.iter().map(|f| f.rows()).sum(),
                question.cols(),
                refs.iter().flat_map(|f| f.data().iter().copied()).collect(),
            )?;
            let fb = SeqBatch {
                rows: g.input(stacked),
                segments: crate::encoders::segments_from_lengths(frames.iter().map(|f| f.rows())),
            };
            let pairs: Vec<(usize, usize)> = (0..frames.len()).map(|t| (0, t)).collect();
            let x = net.il_cross.forward(g, &q, &fb, &pairs)?;
            let cls = g.gather(x.rows, x.first_rows());
            let h = net.il_head.forward(g, cls);
            let r = g.segment_mean(h, vec![0..frames.len()]);
            Ok(g.value(r).data().to_vec())
        })
    }

    /// Head applied to the fused classification row of the video stream.
    /// Inputs are the encoded question and contextualized video.
    pub fn vl_representation(&self, question: &Tensor, video: &Tensor) -> Result<Vec<f64>> {
        self.eval(|g, net| {
            let q = SeqBatch {
                rows: g.input(question.clone()),
                segments: vec![0..question.rows()],
            };
            let v = SeqBatch {
                rows: g.input(video.clone()),
                segments: vec![0..video.rows()],
            };
            let y = net.vl_cross.forward(g, &q, &v, &[(0, 0)])?;
            let cls = g.gather(y.rows, vec![0]);
            let s = net.vl_head.forward(g, cls);
            Ok(g.value(s).data().to_vec())
        })
    }

    /// End-to-end scores of `answers` for one item in evaluation mode.
    pub fn forward(
        &self,
        question: &[u32],
        frames: &[Tensor],
        video: &Tensor,
        answers: &[Vec<u32>],
        mask: StreamMask,
    ) -> Result<StreamOutputs> {
        let input = StreamInput {
            question,
            frames: frames.iter().collect(),
            video,
        };
        let refs: Vec<&[u32]> = answers.iter().map(|a| a.as_slice()).collect();
        self.eval(|g, net| {
            let rep = net.represent(g, &[input], mask)?;
            let z = net.encode_answers(g, &refs)?;
            let logits = g.matmul_nt(rep.combined, z);
            let d = self.config.embedding_size;
            let vec_of = |g: &Graph, v: Option<Var>| v.map_or(vec![0.0; d], |v| g.value(v).data().to_vec());
            Ok(StreamOutputs {
                r: vec_of(g, rep.r),
                s: vec_of(g, rep.s),
                logits: g.value(logits).data().to_vec(),
            })
        })
    }
}
