//! The synthetic event world: events with feature signatures and captions,
//! and scene attributes with patch appearances.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tokens;
use crate::config::{ModelConfig, WorldConfig};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

const PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct EventVocab {
    pub world: WorldConfig,
    pub feature_size: usize,
    pub num_patches: usize,
    pub patch_size: usize,
    /// One `feature_size` vector per event.
    pub signatures: Vec<Vec<f64>>,
    pub captions: Vec<Vec<u32>>,
    /// One `num_patches x patch_size` appearance per attribute.
    pub attribute_patches: Vec<Tensor>,
}

fn normal_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl EventVocab {
    pub fn generate(world: &WorldConfig, model: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        world.validate()?;
        let h = model.video_feature_size;
        let mut signatures: Vec<Vec<f64>> = Vec::with_capacity(world.event_count);
        for e in 0..world.event_count {
            let mut placed = false;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let mut s = normal_vec(h, rng);
                s.iter_mut().for_each(|v| *v = *v as f32 as f64);
                if signatures.iter().all(|o| distance(o, &s) >= world.signature_min_distance) {
                    signatures.push(s);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::config(format!(
                    "could not place signature {e} at distance {} in {h} dimensions",
                    world.signature_min_distance
                )));
            }
        }

        let pool = tokens::word_pool_size(world);
        let mut captions: Vec<Vec<u32>> = Vec::with_capacity(world.event_count);
        while captions.len() < world.event_count {
            let c: Vec<u32> = (0..world.caption_length)
                .map(|_| tokens::word(rng.gen_range(0..pool)))
                .collect();
            if !captions.contains(&c) {
                captions.push(c);
            }
        }

        let attribute_patches = (0..world.attribute_count)
            .map(|_| {
                let mut t = Tensor::matrix(
                    model.num_patches,
                    model.patch_size,
                    normal_vec(model.num_patches * model.patch_size, rng),
                )
                .expect("patch shape");
                t.round_to_f32();
                t
            })
            .collect();

        Ok(EventVocab {
            world: world.clone(),
            feature_size: h,
            num_patches: model.num_patches,
            patch_size: model.patch_size,
            signatures,
            captions,
            attribute_patches,
        })
    }

    pub fn event_count(&self) -> usize {
        self.signatures.len()
    }

    pub fn attribute_count(&self) -> usize {
        self.attribute_patches.len()
    }

    /// Event whose caption is `caption`, if any.
    pub fn event_of_caption(&self, caption: &[u32]) -> Option<usize> {
        self.captions.iter().position(|c| c == caption)
    }

    pub fn noise_std(&self, event_id: usize) -> f64 {
        let s = &self.signatures[event_id];
        let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.world.noise_ratio * norm / (s.len() as f64).sqrt()
    }
}

/// One event occurrence.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub event_id: usize,
    pub duration: usize,
    /// `duration x feature_size`.
    pub features: Tensor,
    pub caption: Vec<u32>,
    pub attribute_id: usize,
}

/// Draws a clip of `event_id`: uniform duration, signature rows plus
/// Gaussian noise, uniform scene attribute.
pub fn gen_clip(vocab: &EventVocab, event_id: usize, rng: &mut impl Rng) -> Result<Clip> {
    if event_id >= vocab.event_count() {
        return Err(Error::argument(format!(
            "event id {event_id} outside 0..{}",
            vocab.event_count()
        )));
    }
    let w = &vocab.world;
    let duration = rng.gen_range(w.duration_min..=w.duration_max);
    let sig = &vocab.signatures[event_id];
    let sigma = vocab.noise_std(event_id);
    let mut data = Vec::with_capacity(duration * sig.len());
    for _ in 0..duration {
        for &s in sig {
            let n: f64 = StandardNormal.sample(rng);
            data.push(s + sigma * n);
        }
    }
    let mut features = Tensor::matrix(duration, sig.len(), data)?;
    features.round_to_f32();
    let attribute_id = rng.gen_range(0..vocab.attribute_count());
    Ok(Clip {
        event_id,
        duration,
        features,
        caption: vocab.captions[event_id].clone(),
        attribute_id,
    })
}

/// One frame's patches showing `attribute`, with per-value noise.
pub fn gen_frame(vocab: &EventVocab, attribute: usize, rng: &mut impl Rng) -> Tensor {
    let base = &vocab.attribute_patches[attribute];
    let noise = vocab.world.frame_noise;
    let data = base
        .data()
        .iter()
        .map(|&v| {
            let n: f64 = StandardNormal.sample(rng);
            v + noise * n
        })
        .collect();
    let mut t = Tensor::matrix(base.rows(), base.cols(), data).expect("frame shape");
    t.round_to_f32();
    t
}
