//! Dataset files: a JSON Lines manifest plus a little-endian feature blob.
//!
//! Blob layout: `b"DSTF"`, version `u32`, then per block `[rows u32,
//! cols u32]` followed by `rows * cols` `f32` values, row-major. Every
//! manifest record points at its block through `blob_offset`. Question
//! answering records carry a second block with one flattened frame per
//! row at `frames_offset`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::qa::{QaKind, QaSample, QuestionType};
use super::trm::{Template, TrmSample};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const BLOB_MAGIC: &[u8; 4] = b"DSTF";
pub const BLOB_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrmRecord {
    pub id: u64,
    pub template: Template,
    pub clip_boundaries: Vec<usize>,
    pub caption_token_ids: Vec<Vec<u32>>,
    pub candidate_indices: Vec<usize>,
    pub label: usize,
    pub question_token_ids: Vec<u32>,
    pub blob_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaRecord {
    pub id: u64,
    pub question_type: QuestionType,
    pub kind: QaKind,
    pub clip_boundaries: Vec<usize>,
    pub caption_token_ids: Vec<Vec<u32>>,
    pub attribute_id: usize,
    pub question_token_ids: Vec<u32>,
    pub answer_token_ids: Vec<u32>,
    pub num_patches: usize,
    pub blob_offset: u64,
    pub frames_offset: u64,
}

struct BlobWriter {
    buf: Vec<u8>,
}

impl BlobWriter {
    fn new() -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(BLOB_MAGIC);
        buf.extend_from_slice(&BLOB_VERSION.to_le_bytes());
        BlobWriter { buf }
    }

    fn block(&mut self, rows: usize, cols: usize, values: impl Iterator<Item = f64>) -> u64 {
        let offset = self.buf.len() as u64;
        self.buf.extend_from_slice(&(rows as u32).to_le_bytes());
        self.buf.extend_from_slice(&(cols as u32).to_le_bytes());
        for v in values {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        offset
    }
}

struct BlobReader<'a> {
    bytes: &'a [u8],
}

impl<'a> BlobReader<'a> {
    fn new(bytes: &'a [u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::format(bytes.len() as u64, "feature blob shorter than its header"));
        }
        if &bytes[..4] != BLOB_MAGIC {
            return Err(Error::format(0, "feature blob magic is not DSTF"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != BLOB_VERSION {
            return Err(Error::format(4, format!("unsupported feature blob version {version}")));
        }
        Ok(BlobReader { bytes })
    }

    fn u32_at(&self, at: usize) -> Result<u32> {
        self.bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::format(at as u64, "feature blob truncated"))
    }

    /// `(rows, cols, values)` of the block at `offset`.
    fn block(&self, offset: u64) -> Result<(usize, usize, Vec<f64>)> {
        let at = usize::try_from(offset).map_err(|_| Error::format(offset, "offset overflow"))?;
        if at < 8 {
            return Err(Error::format(offset, "block offset inside the blob header"));
        }
        let rows = self.u32_at(at)? as usize;
        let cols = self.u32_at(at + 4)? as usize;
        let start = at + 8;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::format(offset, "block size overflow"))?;
        let end = start + 4 * n;
        let Some(raw) = self.bytes.get(start..end) else {
            return Err(Error::format(
                self.bytes.len() as u64,
                format!("feature blob truncated: block at {offset} needs {end} bytes"),
            ));
        };
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok((rows, cols, values))
    }
}

fn jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let body = line.trim_end();
        if !body.is_empty() {
            let rec = serde_json::from_str(body)
                .map_err(|e| Error::format(offset, format!("manifest record: {e}")))?;
            out.push(rec);
        }
        offset += line.len() as u64;
    }
    Ok(out)
}

/// Serializes pre-training samples into manifest text and blob bytes.
pub fn encode_trm(samples: &[TrmSample]) -> (String, Vec<u8>) {
    let mut blob = BlobWriter::new();
    let records: Vec<TrmRecord> = samples
        .iter()
        .map(|s| TrmRecord {
            id: s.id,
            template: s.template,
            clip_boundaries: s.clip_boundaries.clone(),
            caption_token_ids: s.captions.clone(),
            candidate_indices: s.candidate_indices.clone(),
            label: s.label,
            question_token_ids: s.question.clone(),
            blob_offset: blob.block(s.features.rows(), s.features.cols(), s.features.data().iter().copied()),
        })
        .collect();
    (jsonl(&records), blob.buf)
}

pub fn parse_trm_manifest(text: &str) -> Result<Vec<TrmRecord>> {
    parse_jsonl(text)
}

pub fn decode_trm(manifest: &str, blob: &[u8]) -> Result<Vec<TrmSample>> {
    let reader = BlobReader::new(blob)?;
    parse_trm_manifest(manifest)?
        .into_iter()
        .map(|r| {
            let (rows, cols, values) = reader.block(r.blob_offset)?;
            if r.clip_boundaries.last() != Some(&rows) {
                return Err(Error::format(
                    r.blob_offset,
                    format!("record {} declares {:?} rows, blob holds {rows}", r.id, r.clip_boundaries.last()),
                ));
            }
            if r.label >= r.candidate_indices.len() {
                return Err(Error::format(r.blob_offset, format!("record {} label out of range", r.id)));
            }
            Ok(TrmSample {
                id: r.id,
                template: r.template,
                features: Tensor::matrix(rows, cols, values)?,
                clip_boundaries: r.clip_boundaries,
                captions: r.caption_token_ids,
                candidate_indices: r.candidate_indices,
                label: r.label,
                question: r.question_token_ids,
            })
        })
        .collect()
}

pub fn encode_qa(samples: &[QaSample]) -> (String, Vec<u8>) {
    let mut blob = BlobWriter::new();
    let records: Vec<QaRecord> = samples
        .iter()
        .map(|s| {
            let blob_offset = blob.block(s.features.rows(), s.features.cols(), s.features.data().iter().copied());
            let num_patches = s.frames.first().map_or(0, |f| f.rows());
            let width = s.frames.first().map_or(0, |f| f.len());
            let frames_offset = blob.block(
                s.frames.len(),
                width,
                s.frames.iter().flat_map(|f| f.data().iter().copied()),
            );
            QaRecord {
                id: s.id,
                question_type: s.question_type(),
                kind: s.kind,
                clip_boundaries: s.clip_boundaries.clone(),
                caption_token_ids: s.captions.clone(),
                attribute_id: s.attribute_id,
                question_token_ids: s.question.clone(),
                answer_token_ids: s.answer.clone(),
                num_patches,
                blob_offset,
                frames_offset,
            }
        })
        .collect();
    (jsonl(&records), blob.buf)
}

pub fn decode_qa(manifest: &str, blob: &[u8]) -> Result<Vec<QaSample>> {
    let reader = BlobReader::new(blob)?;
    parse_jsonl::<QaRecord>(manifest)?
        .into_iter()
        .map(|r| {
            let (rows, cols, values) = reader.block(r.blob_offset)?;
            if r.clip_boundaries.last() != Some(&rows) {
                return Err(Error::format(
                    r.blob_offset,
                    format!("record {} declares {:?} rows, blob holds {rows}", r.id, r.clip_boundaries.last()),
                ));
            }
            if r.kind.question_type() != r.question_type {
                return Err(Error::format(r.blob_offset, format!("record {} type/kind disagree", r.id)));
            }
            let (count, width, fvals) = reader.block(r.frames_offset)?;
            if r.num_patches == 0 || width % r.num_patches != 0 {
                return Err(Error::format(r.frames_offset, "frame width not a multiple of num_patches"));
            }
            let frames = fvals
                .chunks_exact(width.max(1))
                .take(count)
                .map(|c| Tensor::matrix(r.num_patches, width / r.num_patches, c.to_vec()))
                .collect::<Result<Vec<_>>>()?;
            Ok(QaSample {
                id: r.id,
                kind: r.kind,
                features: Tensor::matrix(rows, cols, values)?,
                clip_boundaries: r.clip_boundaries,
                captions: r.caption_token_ids,
                attribute_id: r.attribute_id,
                frames,
                question: r.question_token_ids,
                answer: r.answer_token_ids,
            })
        })
        .collect()
}

/// Manifest and blob paths for a dataset stem, e.g. `out/trm_train`.
pub fn dataset_paths(stem: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    (stem.with_extension("jsonl"), stem.with_extension("bin"))
}

pub fn write_trm_dataset(samples: &[TrmSample], stem: &Path) -> Result<()> {
    let (m, b) = dataset_paths(stem);
    let (text, blob) = encode_trm(samples);
    fs::write(m, text)?;
    fs::write(b, blob)?;
    Ok(())
}

pub fn read_trm_dataset(stem: &Path) -> Result<Vec<TrmSample>> {
    let (m, b) = dataset_paths(stem);
    decode_trm(&fs::read_to_string(m)?, &fs::read(b)?)
}

pub fn write_qa_dataset(samples: &[QaSample], stem: &Path) -> Result<()> {
    let (m, b) = dataset_paths(stem);
    let (text, blob) = encode_qa(samples);
    fs::write(m, text)?;
    fs::write(b, blob)?;
    Ok(())
}

pub fn read_qa_dataset(stem: &Path) -> Result<Vec<QaSample>> {
    let (m, b) = dataset_paths(stem);
    decode_qa(&fs::read_to_string(m)?, &fs::read(b)?)
}
