//! Weight storage and the manifest + blob file format.
//!
//! A manifest is a line-oriented text file:
//!
//! ```text
//! headlrp-weights v1
//! config num_blocks 2
//! ...
//! blob model.bin 4096 sha256=<hex digest of the whole blob>
//! tensor embeddings.token f64 10x8 0 640
//! ```
//!
//! Tensor records give `name dtype shape byte_offset byte_length`; values are
//! little-endian IEEE-754 and `f32` payloads are widened to `f64` on load.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &str = "headlrp-weights v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub token_embeddings: Tensor,
    pub position_embeddings: Tensor,
    pub emb_ln_gain: Tensor,
    pub emb_ln_bias: Tensor,
    pub blocks: Vec<BlockWeights>,
    /// `[d × K]` for classification, `[d × 2]` (start, end) for QA.
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

/// Canonical tensor names and shapes for a config, in blob order.
pub fn tensor_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.hidden_dim;
    let f = cfg.ffn_dim;
    let mut out = vec![
        ("embeddings.token".to_string(), vec![cfg.vocab_size, d]),
        ("embeddings.position".to_string(), vec![cfg.max_positions, d]),
        ("embeddings.ln.gain".to_string(), vec![d]),
        ("embeddings.ln.bias".to_string(), vec![d]),
    ];
    for b in 0..cfg.num_blocks {
        let p = format!("blocks.{b}");
        out.extend([
            (format!("{p}.attn.wq"), vec![d, d]),
            (format!("{p}.attn.bq"), vec![d]),
            (format!("{p}.attn.wk"), vec![d, d]),
            (format!("{p}.attn.bk"), vec![d]),
            (format!("{p}.attn.wv"), vec![d, d]),
            (format!("{p}.attn.bv"), vec![d]),
            (format!("{p}.attn.wo"), vec![d, d]),
            (format!("{p}.attn.bo"), vec![d]),
            (format!("{p}.ln1.gain"), vec![d]),
            (format!("{p}.ln1.bias"), vec![d]),
            (format!("{p}.ffn.w1"), vec![d, f]),
            (format!("{p}.ffn.b1"), vec![f]),
            (format!("{p}.ffn.w2"), vec![f, d]),
            (format!("{p}.ffn.b2"), vec![d]),
            (format!("{p}.ln2.gain"), vec![d]),
            (format!("{p}.ln2.bias"), vec![d]),
        ]);
    }
    let k = cfg.output_width();
    out.push(("head.weight".to_string(), vec![d, k]));
    out.push(("head.bias".to_string(), vec![k]));
    out
}

impl ModelWeights {
    /// All tensors in [`tensor_layout`] order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![
            &self.token_embeddings,
            &self.position_embeddings,
            &self.emb_ln_gain,
            &self.emb_ln_bias,
        ];
        for b in &self.blocks {
            out.extend([
                &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo, &b.bo, &b.ln1_gain,
                &b.ln1_bias, &b.w1, &b.b1, &b.w2, &b.b2, &b.ln2_gain, &b.ln2_bias,
            ]);
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    /// Assembles weights from tensors in [`tensor_layout`] order.
    pub fn from_ordered(cfg: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let layout = tensor_layout(cfg);
        if tensors.len() != layout.len() {
            return Err(Error::dim(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Load {
                    tensor: name.clone(),
                    reason: format!("shape {:?}, expected {shape:?}", t.shape()),
                });
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let token_embeddings = next();
        let position_embeddings = next();
        let emb_ln_gain = next();
        let emb_ln_bias = next();
        let blocks = (0..cfg.num_blocks)
            .map(|_| BlockWeights {
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ln1_gain: next(),
                ln1_bias: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
                ln2_gain: next(),
                ln2_bias: next(),
            })
            .collect();
        let head_weight = next();
        let head_bias = next();
        let w = ModelWeights {
            token_embeddings,
            position_embeddings,
            emb_ln_gain,
            emb_ln_bias,
            blocks,
            head_weight,
            head_bias,
        };
        for ((name, _), t) in layout.iter().zip(w.tensors()) {
            if !t.is_finite() {
                return Err(Error::Load {
                    tensor: name.clone(),
                    reason: "non-finite value".into(),
                });
            }
        }
        Ok(w)
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        Self::from_ordered(cfg, self.tensors().into_iter().cloned().collect()).map(|_| ())
    }
}

fn blob_path_for(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Writes `<manifest>` and a sibling `<manifest stem>.bin` blob.
pub fn save_weights(
    manifest_path: &Path,
    cfg: &ModelConfig,
    weights: &ModelWeights,
    dtype: DType,
) -> Result<()> {
    weights.validate(cfg)?;
    let layout = tensor_layout(cfg);
    let mut blob = Vec::new();
    let mut records = Vec::new();
    for ((name, shape), t) in layout.iter().zip(weights.tensors()) {
        let offset = blob.len();
        for &v in t.data() {
            match dtype {
                DType::F64 => blob.extend_from_slice(&v.to_le_bytes()),
                DType::F32 => blob.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
        let dims = shape
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join("x");
        records.push(format!(
            "tensor {name} {} {dims} {offset} {}",
            dtype.name(),
            blob.len() - offset
        ));
    }
    let blob_path = blob_path_for(manifest_path);
    let blob_name = blob_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Config(format!("bad manifest path {}", manifest_path.display())))?
        .to_string();

    let mut text = String::new();
    text.push_str(MAGIC);
    text.push('\n');
    for (k, v) in cfg.to_pairs() {
        let _ = writeln!(text, "config {k} {v}");
    }
    let _ = writeln!(
        text,
        "blob {blob_name} {} sha256={}",
        blob.len(),
        hex_digest(&blob)
    );
    for r in records {
        text.push_str(&r);
        text.push('\n');
    }
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    fs::write(manifest_path, text).map_err(|e| Error::io(manifest_path, e))?;
    Ok(())
}

struct Record {
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

fn manifest_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Load {
        tensor: format!("<manifest line {line}>"),
        reason: msg.into(),
    }
}

/// Reads a manifest and its blob, validating length, checksum and shapes.
pub fn load_weights(manifest_path: &Path) -> Result<(ModelConfig, ModelWeights)> {
    if !manifest_path.exists() {
        return Err(Error::NotFound {
            what: "weights manifest",
            path: manifest_path.to_path_buf(),
        });
    }
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == MAGIC => {}
        _ => return Err(manifest_err(1, format!("missing `{MAGIC}` header"))),
    }

    let mut pairs = Vec::new();
    let mut blob_spec: Option<(String, usize, String)> = None;
    let mut records: Vec<(String, Record)> = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields[0] {
            "config" if fields.len() >= 2 => {
                pairs.push((fields[1].to_string(), fields.get(2).unwrap_or(&"").to_string()));
            }
            "blob" if fields.len() == 4 => {
                let len = fields[2]
                    .parse()
                    .map_err(|_| manifest_err(line_no, "bad blob length"))?;
                let sum = fields[3]
                    .strip_prefix("sha256=")
                    .ok_or_else(|| manifest_err(line_no, "blob checksum must be sha256=<hex>"))?;
                blob_spec = Some((fields[1].to_string(), len, sum.to_string()));
            }
            "tensor" if fields.len() == 6 => {
                let dtype = match fields[2] {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    other => {
                        return Err(Error::Load {
                            tensor: fields[1].into(),
                            reason: format!("unsupported dtype `{other}`"),
                        })
                    }
                };
                let shape = fields[3]
                    .split('x')
                    .map(str::parse)
                    .collect::<std::result::Result<Vec<usize>, _>>()
                    .map_err(|_| Error::Load {
                        tensor: fields[1].into(),
                        reason: format!("bad shape `{}`", fields[3]),
                    })?;
                let num = |s: &str| {
                    s.parse::<usize>().map_err(|_| Error::Load {
                        tensor: fields[1].into(),
                        reason: format!("bad byte field `{s}`"),
                    })
                };
                records.push((
                    fields[1].to_string(),
                    Record {
                        dtype,
                        shape,
                        offset: num(fields[4])?,
                        length: num(fields[5])?,
                    },
                ));
            }
            _ => return Err(manifest_err(line_no, format!("unrecognized record `{line}`"))),
        }
    }

    let cfg = ModelConfig::from_pairs(&pairs)?;
    let (blob_name, blob_len, checksum) =
        blob_spec.ok_or_else(|| manifest_err(0, "manifest has no blob record"))?;
    let blob_path = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&blob_name);
    if !blob_path.exists() {
        return Err(Error::NotFound {
            what: "weights blob",
            path: blob_path,
        });
    }
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if blob.len() != blob_len {
        return Err(Error::Load {
            tensor: blob_name,
            reason: format!(
                "blob length {} does not match manifest length {blob_len}",
                blob.len()
            ),
        });
    }
    if hex_digest(&blob) != checksum {
        return Err(Error::Load {
            tensor: blob_name,
            reason: "sha256 checksum mismatch".into(),
        });
    }

    let mut tensors = Vec::new();
    for (name, shape) in tensor_layout(&cfg) {
        let (_, rec) = records
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Load {
                tensor: name.clone(),
                reason: "missing from manifest".into(),
            })?;
        if rec.shape != shape {
            return Err(Error::Load {
                tensor: name,
                reason: format!("shape {:?} does not match config shape {shape:?}", rec.shape),
            });
        }
        let numel: usize = shape.iter().product();
        if rec.length != numel * rec.dtype.width() {
            return Err(Error::Load {
                tensor: name,
                reason: format!(
                    "byte length {} does not fit {numel} {} values",
                    rec.length,
                    rec.dtype.name()
                ),
            });
        }
        let end = rec.offset.checked_add(rec.length).filter(|&e| e <= blob.len());
        let Some(end) = end else {
            return Err(Error::Load {
                tensor: name,
                reason: "byte range exceeds blob".into(),
            });
        };
        let bytes = &blob[rec.offset..end];
        let data: Vec<f64> = match rec.dtype {
            DType::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        };
        tensors.push(Tensor::new(shape, data)?);
    }
    if let Some((extra, _)) = records
        .iter()
        .find(|(n, _)| !tensor_layout(&cfg).iter().any(|(l, _)| l == n))
    {
        return Err(Error::Load {
            tensor: extra.clone(),
            reason: "not part of the model layout".into(),
        });
    }
    let weights = ModelWeights::from_ordered(&cfg, tensors)?;
    Ok((cfg, weights))
}
