//! Binary checkpoints.
//!
//! Layout: `b"DSTC"`, version `u32`, header length `u32`, UTF-8 JSON
//! header, then one entry per tensor until end of file: name length
//! `u32`, name bytes, rank `u32`, dims `u32` each, values `f32`. All
//! integers and floats are little-endian. Optimizer moments are stored as
//! entries named `optim.m.<param>` and `optim.v.<param>`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::numeric::{OptimState, Tensor};
use crate::pipeline::DestModel;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DSTC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON header: configuration echo plus training progress.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config: RunConfig,
    /// `pretrain` or `finetune`.
    pub stage: String,
    pub vocab_size: usize,
    pub step: u64,
    pub optim_step: u64,
    /// Answer vocabulary used by a fine-tuned model; empty otherwise.
    #[serde(default)]
    pub answer_vocab: Vec<Vec<u32>>,
    #[serde(default)]
    pub initialized_from: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: DestModel,
    pub optim: Option<OptimState>,
}

fn push_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn push_entry(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    push_u32(buf, name.len());
    buf.extend_from_slice(name.as_bytes());
    push_u32(buf, t.rank());
    for &d in t.shape() {
        push_u32(buf, d);
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        push_u32(&mut buf, header.len());
        buf.extend_from_slice(&header);
        for (_, p) in self.model.params.iter() {
            push_entry(&mut buf, &p.name, &p.value);
        }
        if let Some(opt) = &self.optim {
            for (prefix, moments) in [("optim.m.", &opt.first), ("optim.v.", &opt.second)] {
                for ((_, p), t) in self.model.params.iter().zip(moments) {
                    push_entry(&mut buf, &format!("{prefix}{}", p.name), t);
                }
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "checkpoint magic is not DSTC"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let header_at = r.at as u64;
        let header: CheckpointHeader = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::format(header_at, format!("checkpoint header: {e}")))?;
        header.config.validate()?;
        let mut model = DestModel::new(&header.config.model, header.vocab_size, 0)?;
        let mut optim = OptimState::new(&model.params);
        let mut seen = vec![false; model.params.len()];
        let mut moments_seen = 0usize;
        while r.at < bytes.len() {
            let entry_at = r.at as u64;
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(entry_at, "entry name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(4 * n)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let t = Tensor::new(shape, values)?;
            let (target, pname) = if let Some(p) = name.strip_prefix("optim.m.") {
                (Some(0), p)
            } else if let Some(p) = name.strip_prefix("optim.v.") {
                (Some(1), p)
            } else {
                (None, name.as_str())
            };
            let id = model
                .params
                .id(pname)
                .ok_or_else(|| Error::format(entry_at, format!("unknown parameter {pname}")))?;
            if model.params.value(id).shape() != t.shape() {
                return Err(Error::format(
                    entry_at,
                    format!("parameter {pname}: shape {:?}, expected {:?}", t.shape(), model.params.value(id).shape()),
                ));
            }
            match target {
                None => {
                    *model.params.value_mut(id) = t;
                    seen[id.0] = true;
                }
                Some(0) => {
                    optim.first[id.0] = t;
                    moments_seen += 1;
                }
                Some(_) => {
                    optim.second[id.0] = t;
                    moments_seen += 1;
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            let name = &model.params.iter().nth(missing).unwrap().1.name;
            return Err(Error::format(bytes.len() as u64, format!("missing parameter {name}")));
        }
        let optim = if moments_seen == 0 {
            None
        } else if moments_seen == 2 * model.params.len() {
            optim.step = header.optim_step;
            Some(optim)
        } else {
            return Err(Error::format(bytes.len() as u64, "incomplete optimizer state"));
        };
        Ok(Checkpoint {
            header,
            model,
            optim,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let out = self
            .bytes
            .get(self.at..self.at + n)
            .ok_or_else(|| Error::format(self.at as u64, "checkpoint truncated"))?;
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
