use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Optimizer learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Question, image and image-language encoders.
    Base,
    /// Video contextualizer and video-language encoder.
    Video,
    /// Final heads, alignment projections, temperature and loss weights.
    Mlp,
    /// Answer encoder.
    Answer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Named parameter table.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

/// Initialization scheme for a new parameter.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    Normal(f64),
    /// Sine/cosine position table scaled by the amplitude: row `p`, columns
    /// `2i` and `2i + 1` hold `sin` and `cos` of `p / 10000^(2i / cols)`.
    Sinusoidal(f64),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        group: ParamGroup,
        decay: bool,
        rng: &mut impl Rng,
    ) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let mut value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::Constant(c) => Tensor::full(shape, c),
            Init::Normal(std) => {
                let mut t = Tensor::zeros(shape);
                for v in t.data_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = z * std;
                }
                t
            }
            Init::Sinusoidal(amp) => {
                let mut t = Tensor::zeros(shape);
                let cols = *shape.last().expect("sinusoidal table has a width");
                for (k, v) in t.data_mut().iter_mut().enumerate() {
                    let (p, c) = ((k / cols) as f64, k % cols);
                    let angle = p / 10000f64.powf((c - c % 2) as f64 / cols as f64);
                    *v = amp * if c % 2 == 0 { angle.sin() } else { angle.cos() };
                }
                t
            }
        };
        value.round_to_f32();
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            group,
            decay,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Overwrites values from a name-keyed table; every entry must exist
    /// with a matching shape.
    pub fn load_values<'a>(
        &mut self,
        entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    ) -> Result<usize> {
        let mut n = 0;
        for (name, t) in entries {
            let id = self
                .id(name)
                .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
            let p = &mut self.params[id.0];
            if p.value.shape() != t.shape() {
                return Err(Error::config(format!(
                    "parameter {name}: shape {:?} vs stored {:?}",
                    p.value.shape(),
                    t.shape()
                )));
            }
            p.value = t.clone();
            n += 1;
        }
        Ok(n)
    }

    /// Replaces every value with fresh Gaussian noise of the given scale.
    /// Used to move tests away from symmetric initializations.
    pub fn randomize(&mut self, scale: f64, rng: &mut impl Rng) {
        for p in &mut self.params {
            for v in p.value.data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = z * scale;
            }
        }
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn new(n_params: usize) -> Self {
        Gradients {
            grads: vec![None; n_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn accumulate(&mut self, id: ParamId, g: &[f64]) {
        match &mut self.grads[id.0] {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Option<&[f64]>)> {
        self.grads
            .iter()
            .enumerate()
            .map(|(i, g)| (ParamId(i), g.as_deref()))
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}
