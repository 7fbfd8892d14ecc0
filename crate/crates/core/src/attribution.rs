//! Masked relevance, renormalization and gradient-weighted rollout, plus the
//! baseline explainers.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::headmask::{random_mask, HeadMask};
use crate::lrp::{init_relevance, propagate_from, PropagationOptions};
use crate::model::{AttentionGrads, ForwardTrace, Model, ModelConfig, Target};
use crate::numerics::{matmul, Tensor};

/// Component sums below this are treated as zero.
pub const DEGENERATE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ours,
    Gae,
    RawAtt,
    Rollout,
    Random,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Ours,
        Method::Gae,
        Method::RawAtt,
        Method::Rollout,
        Method::Random,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Gae => "gae",
            Method::RawAtt => "rawatt",
            Method::Rollout => "rollout",
            Method::Random => "random",
        }
    }

    /// Whether results depend on a seed.
    pub fn is_seeded(&self) -> bool {
        matches!(self, Method::Random)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                let valid: Vec<&str> = Method::ALL.iter().map(Method::name).collect();
                Error::Config(format!("unknown method `{s}`; valid methods: {}", valid.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExplainOptions {
    /// Row-normalize each rollout factor before the product.
    pub row_normalize: bool,
    /// Also drop masked heads from the relevance passed to lower blocks.
    pub mask_propagation: bool,
}

/// Per-block relevance split by mask provenance, each `[M×T×T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedRelevance {
    pub syntactic: Tensor,
    pub positional: Tensor,
    /// Heads kept without a syntactic or positional source (all-ones,
    /// random and corruption masks).
    pub other: Tensor,
}

impl MaskedRelevance {
    pub fn sums(&self) -> [f64; 3] {
        [self.syntactic.sum(), self.positional.sum(), self.other.sum()]
    }

    pub fn combined(&self) -> Tensor {
        let mut t = self.syntactic.clone();
        t.add_assign(&self.positional).expect("same shape");
        t.add_assign(&self.other).expect("same shape");
        t
    }

    fn scaled(&self, f: [f64; 3]) -> Self {
        Self {
            syntactic: self.syntactic.scale(f[0]),
            positional: self.positional.scale(f[1]),
            other: self.other.scale(f[2]),
        }
    }
}

/// Zeroes masked-out heads and partitions the rest by provenance. A head
/// that is both syntactic and positional goes half to each.
pub fn apply_mask(head_relevance: &Tensor, mask: &HeadMask, block: usize) -> Result<MaskedRelevance> {
    let shape = head_relevance.shape();
    if shape.len() != 3 || shape[0] != mask.heads() || shape[1] != shape[2] || block >= mask.blocks() {
        return Err(Error::dim(format!(
            "head relevance {:?} against a {}×{} mask at block {block}",
            shape,
            mask.blocks(),
            mask.heads()
        )));
    }
    let tt = shape[1] * shape[2];
    let mut parts = [
        Tensor::zeros(shape),
        Tensor::zeros(shape),
        Tensor::zeros(shape),
    ];
    for h in 0..mask.heads() {
        if !mask.get(block, h) {
            continue;
        }
        let sources = mask.sources(block, h);
        let synt = sources.iter().any(|s| s.is_syntactic());
        let pos = sources.iter().any(|s| s.is_positional());
        let weights = match (synt, pos) {
            (true, true) => [0.5, 0.5, 0.0],
            (true, false) => [1.0, 0.0, 0.0],
            (false, true) => [0.0, 1.0, 0.0],
            (false, false) => [0.0, 0.0, 1.0],
        };
        let src = &head_relevance.data()[h * tt..(h + 1) * tt];
        for (part, w) in parts.iter_mut().zip(weights) {
            if w != 0.0 {
                for (d, s) in part.data_mut()[h * tt..(h + 1) * tt].iter_mut().zip(src) {
                    *d = w * s;
                }
            }
        }
    }
    let [syntactic, positional, other] = parts;
    Ok(MaskedRelevance {
        syntactic,
        positional,
        other,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Component factors `|ΣR_c| / |ΣR| · Σ R_prev / ΣR_c`.
    Verbatim,
    /// Component sums of opposite sign; one joint factor `Σ R_prev / ΣR`.
    SignAnomaly,
    /// Empty mask row: nothing survives, the block contributes the identity.
    Inactive,
    /// Every component sum below [`DEGENERATE_EPS`].
    Degenerate,
}

/// Rescales the components so their sums add up to `total`.
pub fn renormalize(masked: &MaskedRelevance, total: f64) -> Result<(MaskedRelevance, Normalization)> {
    let s = masked.sums();
    if s.iter().all(|v| v.abs() < DEGENERATE_EPS) {
        return Ok((masked.clone(), Normalization::Degenerate));
    }
    let joint: f64 = s.iter().sum();
    let mixed = s.iter().any(|&v| v > 0.0) && s.iter().any(|&v| v < 0.0);
    let per_component = |denominator: f64| {
        s.map(|sc| {
            if sc == 0.0 {
                1.0
            } else {
                sc.abs() / denominator * total / sc
            }
        })
    };
    let (factors, kind) = if !mixed {
        (per_component(joint.abs()), Normalization::Verbatim)
    } else if joint.abs() >= DEGENERATE_EPS {
        ([total / joint; 3], Normalization::SignAnomaly)
    } else {
        let abs_sum: f64 = s.iter().map(|v| v.abs()).sum();
        (per_component(abs_sum), Normalization::SignAnomaly)
    };
    let out = masked.scaled(factors);
    let after: f64 = out.sums().iter().sum();
    if (after - total).abs() > 1e-9 * total.abs().max(DEGENERATE_EPS) {
        return Err(Error::Numeric(format!(
            "renormalized relevance sums to {after}, expected {total}"
        )));
    }
    Ok((out, kind))
}

/// `mean_h(∇A ⊙ R)⁺ + I` for one block.
pub fn rollout_factor(grad: &Tensor, relevance: &Tensor, row_normalize: bool) -> Result<Tensor> {
    if grad.shape() != relevance.shape() || grad.shape().len() != 3 {
        return Err(Error::dim(format!(
            "gradient {:?} and relevance {:?}",
            grad.shape(),
            relevance.shape()
        )));
    }
    let (m, t) = (grad.shape()[0], grad.shape()[1]);
    let mut out = Tensor::zeros(&[t, t]);
    let g = grad.data();
    let r = relevance.data();
    for (idx, v) in out.data_mut().iter_mut().enumerate() {
        let mut acc = 0.0;
        for h in 0..m {
            acc += g[h * t * t + idx] * r[h * t * t + idx];
        }
        *v = (acc / m as f64).max(0.0);
    }
    for i in 0..t {
        out.data_mut()[i * t + i] += 1.0;
    }
    if row_normalize {
        normalize_rows(&mut out);
    }
    Ok(out)
}

fn normalize_rows(a: &mut Tensor) {
    let t = a.cols();
    for row in a.data_mut().chunks_mut(t) {
        let s: f64 = row.iter().sum();
        if s != 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
}

/// `Ā^(1)·Ā^(2)·…·Ā^(B)`.
pub fn rollout_product(factors: &[Tensor]) -> Result<Tensor> {
    let first = factors
        .first()
        .ok_or_else(|| Error::State("rollout over zero blocks".into()))?;
    factors[1..]
        .iter()
        .try_fold(first.clone(), |acc, f| matmul(&acc, f))
}

/// Positions that can receive a score: non-special tokens other than `source`.
fn scorable(cfg: &ModelConfig, ids: &[usize], source: usize) -> Vec<bool> {
    ids.iter()
        .enumerate()
        .map(|(j, &id)| j != source && !cfg.is_special(id))
        .collect()
}

/// Row `source` of the rollout with its own column and special columns zeroed.
pub fn extract_scores(product: &Tensor, cfg: &ModelConfig, ids: &[usize], source: usize) -> Vec<f64> {
    product
        .row(source)
        .iter()
        .zip(scorable(cfg, ids, source))
        .map(|(&v, keep)| if keep { v } else { 0.0 })
        .collect()
}

fn uniform_scores(cfg: &ModelConfig, ids: &[usize], source: usize) -> Vec<f64> {
    let keep = scorable(cfg, ids, source);
    let n = keep.iter().filter(|&&k| k).count();
    keep.iter()
        .map(|&k| if k { 1.0 / n as f64 } else { 0.0 })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributionResult {
    pub ids: Vec<usize>,
    /// One non-negative score per input token.
    pub scores: Vec<f64>,
    pub method: Method,
    /// One target for classification, start and end for QA.
    pub targets: Vec<Target>,
    /// Scores fell back to uniform.
    pub degenerate: bool,
    #[serde(skip)]
    pub normalization: Vec<Normalization>,
    #[serde(skip)]
    pub rollout: Vec<Tensor>,
}

impl AttributionResult {
    /// Non-special token positions sorted by descending score, ties to the
    /// smaller index.
    pub fn ranking(&self, cfg: &ModelConfig) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.ids.len())
            .filter(|&j| !cfg.is_special(self.ids[j]))
            .collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        idx
    }
}

/// Finishes a rollout-based result: extracts scores and applies the
/// uniform fallback when nothing survives.
fn finish(
    model: &Model,
    ids: &[usize],
    target: Target,
    method: Method,
    factors: Vec<Tensor>,
    normalization: Vec<Normalization>,
) -> Result<AttributionResult> {
    let cfg = model.config();
    let source = target.source_row(cfg);
    let product = rollout_product(&factors)?;
    let mut scores = extract_scores(&product, cfg, ids, source);
    let any_scorable = scorable(cfg, ids, source).iter().any(|&k| k);
    let mut degenerate = normalization.contains(&Normalization::Degenerate);
    if any_scorable && scores.iter().all(|&v| v == 0.0) {
        degenerate = true;
    }
    if degenerate && any_scorable {
        scores = uniform_scores(cfg, ids, source);
    }
    if scores.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Numeric(format!("{method} produced invalid scores")));
    }
    Ok(AttributionResult {
        ids: ids.to_vec(),
        scores,
        method,
        targets: vec![target],
        degenerate,
        normalization,
        rollout: factors,
    })
}

/// Forward, gradients, masked relevance propagation and rollout.
pub fn explain(
    model: &Model,
    ids: &[usize],
    target: Target,
    mask: &HeadMask,
    options: ExplainOptions,
) -> Result<AttributionResult> {
    explain_as(model, ids, target, mask, options, Method::Ours)
}

fn explain_as(
    model: &Model,
    ids: &[usize],
    target: Target,
    mask: &HeadMask,
    options: ExplainOptions,
    method: Method,
) -> Result<AttributionResult> {
    let cfg = model.config();
    if mask.blocks() != cfg.num_blocks || mask.heads() != cfg.num_heads {
        return Err(Error::Config(format!(
            "{}×{} mask for a {}×{} model",
            mask.blocks(),
            mask.heads(),
            cfg.num_blocks,
            cfg.num_heads
        )));
    }
    let trace = model.forward(ids)?;
    let grads = model.backward_attention_grads(&trace, target)?;
    let gate = mask.grid();
    let r0 = init_relevance(target.head_column(), cfg.output_width())?;
    let state = propagate_from(
        model,
        &trace,
        target,
        r0,
        PropagationOptions {
            head_gate: options.mask_propagation.then_some(gate.as_slice()),
        },
    )?;

    let mut factors = Vec::with_capacity(cfg.num_blocks);
    let mut normalization = Vec::with_capacity(cfg.num_blocks);
    for b in 0..cfg.num_blocks {
        let head_rel = &state.head_relevance[b];
        let (relevance, kind) = if gate[b].iter().any(|&g| g) {
            let masked = apply_mask(head_rel, mask, b)?;
            let (renormed, kind) = renormalize(&masked, head_rel.sum())?;
            (renormed.combined(), kind)
        } else {
            (Tensor::zeros(head_rel.shape()), Normalization::Inactive)
        };
        factors.push(rollout_factor(grads.block(b), &relevance, options.row_normalize)?);
        normalization.push(kind);
    }
    finish(model, ids, target, method, factors, normalization)
}

/// Rollout of `∇A ⊙ R_A` over every head, without masking.
pub fn baseline_gae(
    model: &Model,
    trace: &ForwardTrace,
    grads: &AttentionGrads,
    target: Target,
    options: ExplainOptions,
) -> Result<AttributionResult> {
    let r0 = init_relevance(target.head_column(), model.config().output_width())?;
    let state = propagate_from(model, trace, target, r0, PropagationOptions::default())?;
    let factors = state
        .head_relevance
        .iter()
        .zip(&grads.per_block)
        .map(|(r, g)| rollout_factor(g, r, options.row_normalize))
        .collect::<Result<Vec<_>>>()?;
    let n = factors.len();
    finish(
        model,
        trace.token_ids(),
        target,
        Method::Gae,
        factors,
        vec![Normalization::Verbatim; n],
    )
}

/// Head-mean of the last block's attention row.
pub fn baseline_rawatt(model: &Model, trace: &ForwardTrace, target: Target) -> Result<AttributionResult> {
    let last = trace
        .blocks()
        .last()
        .ok_or_else(|| Error::State("trace has no blocks".into()))?;
    let mean = head_mean(&last.attention);
    let ids = trace.token_ids();
    let cfg = model.config();
    let source = target.source_row(cfg);
    let mut product = Tensor::zeros(&[ids.len(), ids.len()]);
    product.row_mut(source).copy_from_slice(mean.row(source));
    let scores = extract_scores(&product, cfg, ids, source);
    Ok(AttributionResult {
        ids: ids.to_vec(),
        degenerate: false,
        scores,
        method: Method::RawAtt,
        targets: vec![target],
        normalization: Vec::new(),
        rollout: vec![mean],
    })
}

/// Rollout of `½(mean_h A + I)`, row-normalized.
pub fn baseline_rollout(model: &Model, trace: &ForwardTrace, target: Target) -> Result<AttributionResult> {
    let factors: Vec<Tensor> = trace
        .blocks()
        .iter()
        .map(|bt| {
            let mut a = head_mean(&bt.attention);
            let t = a.rows();
            for i in 0..t {
                a.data_mut()[i * t + i] += 1.0;
            }
            let mut a = a.scale(0.5);
            normalize_rows(&mut a);
            a
        })
        .collect();
    let mut r = finish(model, trace.token_ids(), target, Method::Rollout, factors, Vec::new())?;
    r.degenerate = false;
    Ok(r)
}

fn head_mean(attention: &Tensor) -> Tensor {
    let (m, t) = (attention.shape()[0], attention.shape()[1]);
    let mut out = Tensor::zeros(&[t, t]);
    for h in 0..m {
        out.add_assign(&attention.slab(h)).expect("same shape");
    }
    out.scale(1.0 / m as f64)
}

/// Scores for `method`, averaged over `targets` (start and end for QA).
/// `mask` is the head mask for `ours`, and the rate reference for `random`.
pub fn attribute(
    model: &Model,
    ids: &[usize],
    targets: &[Target],
    method: Method,
    mask: &HeadMask,
    seed: u64,
    options: ExplainOptions,
) -> Result<AttributionResult> {
    if targets.is_empty() {
        return Err(Error::Config("no attribution target".into()));
    }
    let mut results = Vec::with_capacity(targets.len());
    for &target in targets {
        let r = match method {
            Method::Ours => explain(model, ids, target, mask, options)?,
            Method::Random => {
                let random = random_mask(mask, seed);
                explain_as(model, ids, target, &random, options, Method::Random)?
            }
            Method::Gae => {
                let trace = model.forward(ids)?;
                let grads = model.backward_attention_grads(&trace, target)?;
                baseline_gae(model, &trace, &grads, target, options)?
            }
            Method::RawAtt => baseline_rawatt(model, &model.forward(ids)?, target)?,
            Method::Rollout => baseline_rollout(model, &model.forward(ids)?, target)?,
        };
        results.push(r);
    }
    let mut out = results.remove(0);
    if !results.is_empty() {
        let n = (results.len() + 1) as f64;
        for r in &results {
            for (a, b) in out.scores.iter_mut().zip(&r.scores) {
                *a += b;
            }
            out.targets.extend(&r.targets);
            out.degenerate |= r.degenerate;
            out.normalization.extend(&r.normalization);
        }
        out.scores.iter_mut().for_each(|v| *v /= n);
        out.rollout.clear();
    }
    Ok(out)
}

/// One JSON object per line.
pub fn write_jsonl(path: &Path, results: &[AttributionResult]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in results {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
