//! Faithfulness metrics, pruning, benchmark runs and the corruption sweep.

mod dataset;
mod report;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use dataset::{EvalDataset, Example};
pub use report::{
    Aggregate, CorruptionReport, CurvePoint, EvalReport, MethodReport, PrecisionReport, SweepPoint,
};

use crate::attribution::{attribute, AttributionResult, ExplainOptions, Method};
use crate::error::{Error, Result};
use crate::headmask::{ceil_count, corrupt_mask, HeadMask};
use crate::model::{Model, ModelConfig, Target, Task};
use crate::numerics::softmax_in_place;

/// Confidences are clamped to this before taking logs.
pub const CONFIDENCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// Replace pruned tokens with the mask token.
    #[default]
    Mask,
    /// Remove pruned tokens.
    Delete,
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::Mask => "mask",
            Policy::Delete => "delete",
        })
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(Policy::Mask),
            "delete" => Ok(Policy::Delete),
            other => Err(Error::Config(format!(
                "unknown pruning policy `{other}` (expected mask|delete)"
            ))),
        }
    }
}

/// Positions pruned at rate `k_percent`: the `⌈k/100 · T_content⌉`
/// highest-scoring non-special tokens, ties to the smaller index.
pub fn pruned_positions(
    cfg: &ModelConfig,
    ids: &[usize],
    scores: &[f64],
    k_percent: f64,
) -> Result<Vec<usize>> {
    if !(0.0..=100.0).contains(&k_percent) {
        return Err(Error::Config(format!("pruning rate {k_percent} outside [0, 100]")));
    }
    if scores.len() != ids.len() {
        return Err(Error::dim(format!(
            "{} scores for {} tokens",
            scores.len(),
            ids.len()
        )));
    }
    let mut content: Vec<usize> = (0..ids.len()).filter(|&j| !cfg.is_special(ids[j])).collect();
    let n = ceil_count(k_percent / 100.0 * content.len() as f64).min(content.len());
    content.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    content.truncate(n);
    content.sort_unstable();
    Ok(content)
}

pub fn prune(
    cfg: &ModelConfig,
    ids: &[usize],
    scores: &[f64],
    k_percent: f64,
    policy: Policy,
) -> Result<Vec<usize>> {
    let drop = pruned_positions(cfg, ids, scores, k_percent)?;
    Ok(apply_pruning(cfg, ids, &drop, policy))
}

fn apply_pruning(cfg: &ModelConfig, ids: &[usize], drop: &[usize], policy: Policy) -> Vec<usize> {
    match policy {
        Policy::Mask => {
            let mut out = ids.to_vec();
            for &j in drop {
                out[j] = cfg.mask_token_id;
            }
            out
        }
        Policy::Delete => ids
            .iter()
            .enumerate()
            .filter(|(j, _)| drop.binary_search(j).is_err())
            .map(|(_, &id)| id)
            .collect(),
    }
}

/// Softmax probability of `class`.
pub fn class_confidence(model: &Model, ids: &[usize], class: usize) -> Result<f64> {
    if ids.is_empty() {
        return Err(Error::Data("pruning left an empty input".into()));
    }
    let prediction = model.predict(ids)?;
    let mut probs = prediction.logits.data().to_vec();
    if prediction.logits.shape().len() != 1 || class >= probs.len() {
        return Err(Error::Config("confidence metrics need a classification model".into()));
    }
    softmax_in_place(&mut probs);
    Ok(probs[class])
}

/// One example's contribution at one pruning rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricTerm {
    /// `f(x) − f(x̃)`
    pub drop: f64,
    /// `log(f(x̃) / f(x))`
    pub log_ratio: f64,
    /// A confidence hit the floor.
    pub floored: bool,
}

impl MetricTerm {
    pub fn from_confidences(before: f64, after: f64) -> Self {
        Self {
            drop: before - after,
            log_ratio: (after.max(CONFIDENCE_FLOOR) / before.max(CONFIDENCE_FLOOR)).ln(),
            floored: before < CONFIDENCE_FLOOR || after < CONFIDENCE_FLOOR,
        }
    }
}

/// Confidence change for the original prediction after pruning.
pub fn metric_term(
    model: &Model,
    ids: &[usize],
    scores: &[f64],
    k_percent: f64,
    policy: Policy,
) -> Result<MetricTerm> {
    Ok(metric_terms(model, ids, scores, &[k_percent], policy)?[0])
}

/// `metric_term` at every rate of `k_grid`, sharing the unpruned forward pass.
pub fn metric_terms(
    model: &Model,
    ids: &[usize],
    scores: &[f64],
    k_grid: &[f64],
    policy: Policy,
) -> Result<Vec<MetricTerm>> {
    let prediction = model.predict(ids)?;
    if prediction.logits.shape().len() != 1 {
        return Err(Error::Config("confidence metrics need a classification model".into()));
    }
    let (class, before) = (prediction.label, prediction.confidence);
    k_grid
        .iter()
        .map(|&k| {
            let pruned = prune(model.config(), ids, scores, k, policy)?;
            let after = if pruned == ids {
                before
            } else {
                class_confidence(model, &pruned, class)?
            };
            Ok(MetricTerm::from_confidences(before, after))
        })
        .collect()
}

fn check_cover(dataset: &EvalDataset, attributions: &[AttributionResult]) -> Result<()> {
    if attributions.len() != dataset.len() {
        return Err(Error::Config(format!(
            "{} attributions for {} examples",
            attributions.len(),
            dataset.len()
        )));
    }
    for (n, (ex, a)) in dataset.examples.iter().zip(attributions).enumerate() {
        if ex.ids != a.ids {
            return Err(Error::Config(format!(
                "attribution {} does not match example {}",
                n + 1,
                n + 1
            )));
        }
    }
    Ok(())
}

fn terms(
    model: &Model,
    dataset: &EvalDataset,
    attributions: &[AttributionResult],
    k_percent: f64,
    policy: Policy,
) -> Result<Vec<MetricTerm>> {
    check_cover(dataset, attributions)?;
    attributions
        .par_iter()
        .map(|a| metric_term(model, &a.ids, &a.scores, k_percent, policy))
        .collect()
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for x in xs {
        sum += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Sample standard deviation; zero for fewer than two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs.iter().copied());
    let ss: f64 = xs.iter().map(|x| (x - m).powi(2)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

/// Mean confidence drop of the original prediction.
pub fn aopc(
    model: &Model,
    dataset: &EvalDataset,
    attributions: &[AttributionResult],
    k_percent: f64,
    policy: Policy,
) -> Result<f64> {
    let t = terms(model, dataset, attributions, k_percent, policy)?;
    Ok(mean(t.iter().map(|t| t.drop)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogOdds {
    pub value: f64,
    /// Examples whose confidence was floored.
    pub floored: usize,
}

/// Mean log ratio of confidences after and before pruning.
pub fn lodds(
    model: &Model,
    dataset: &EvalDataset,
    attributions: &[AttributionResult],
    k_percent: f64,
    policy: Policy,
) -> Result<LogOdds> {
    let t = terms(model, dataset, attributions, k_percent, policy)?;
    Ok(LogOdds {
        value: mean(t.iter().map(|t| t.log_ratio)),
        floored: t.iter().filter(|t| t.floored).count(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Precision {
    pub value: f64,
    pub evaluated: usize,
    /// Examples without an answer span or without context tokens.
    pub skipped: usize,
}

/// One example's precision@k, or `None` when it has no span or no context.
pub fn example_precision(
    cfg: &ModelConfig,
    example: &Example,
    scores: &[f64],
    k: usize,
) -> Option<f64> {
    let [s, e] = example.answer?;
    let start = example.context_start.unwrap_or(0);
    let mut pool: Vec<usize> = (start..example.ids.len())
        .filter(|&j| !cfg.is_special(example.ids[j]))
        .collect();
    if pool.is_empty() {
        return None;
    }
    pool.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let denom = k.min(pool.len());
    if denom == 0 {
        return None;
    }
    let hits = pool[..denom].iter().filter(|&&j| (s..=e).contains(&j)).count();
    Some(hits as f64 / denom as f64)
}

/// Mean over examples of top-`k` context tokens inside the answer span,
/// divided by `min(k, context length)`.
pub fn precision_at_k(
    cfg: &ModelConfig,
    dataset: &EvalDataset,
    attributions: &[AttributionResult],
    k: usize,
) -> Result<Precision> {
    check_cover(dataset, attributions)?;
    let values: Vec<Option<f64>> = dataset
        .examples
        .iter()
        .zip(attributions)
        .map(|(ex, a)| example_precision(cfg, ex, &a.scores, k))
        .collect();
    let kept: Vec<f64> = values.iter().flatten().copied().collect();
    Ok(Precision {
        value: mean(kept.iter().copied()),
        evaluated: kept.len(),
        skipped: values.len() - kept.len(),
    })
}

/// Attribution targets for one example: the predicted class, or the gold
/// start and end positions (predicted ones when the span is missing).
pub fn targets_for(model: &Model, example: &Example) -> Result<Vec<Target>> {
    let trace = model.forward(&example.ids)?;
    Ok(match model.config().task {
        Task::Classification => vec![Target::Class(trace.predicted())],
        Task::Qa => {
            let [s, e] = match example.answer {
                Some(span) => span,
                None => {
                    let logits = trace.logits();
                    let argmax = |r: usize| {
                        let row = logits.row(r);
                        (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
                    };
                    [argmax(0), argmax(1)]
                }
            };
            vec![Target::Start(s), Target::End(e)]
        }
    })
}

/// Attributions for every example, in dataset order.
pub fn attribute_dataset(
    model: &Model,
    dataset: &EvalDataset,
    method: Method,
    mask: &HeadMask,
    seed: u64,
    options: ExplainOptions,
) -> Result<Vec<AttributionResult>> {
    dataset
        .examples
        .par_iter()
        .enumerate()
        .map(|(n, ex)| {
            let targets = targets_for(model, ex)?;
            attribute(model, &ex.ids, &targets, method, mask, seed, options).map_err(|e| match e {
                Error::Data(msg) => Error::Data(format!("example {}: {msg}", n + 1)),
                other => other,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub methods: Vec<Method>,
    /// Pruning rates in percent.
    pub k_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub policy: Policy,
    pub precision_k: usize,
    pub options: ExplainOptions,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            k_grid: (1..=9).map(|i| (i * 10) as f64).collect(),
            seeds: vec![0, 1, 2, 3, 4],
            policy: Policy::Mask,
            precision_k: 20,
            options: ExplainOptions::default(),
        }
    }
}

pub(crate) fn check_grid(name: &str, grid: &[f64], lo: f64, hi: f64) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config(format!("{name} is empty")));
    }
    if let Some(v) = grid.iter().find(|v| !(lo..=hi).contains(*v)) {
        return Err(Error::Config(format!("{name} value {v} outside [{lo}, {hi}]")));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("{name} must be strictly increasing")));
    }
    Ok(())
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("no methods requested".into()));
        }
        check_grid("k-grid", &self.k_grid, 0.0, 100.0)?;
        if self.seeds.is_empty() && self.methods.iter().any(Method::is_seeded) {
            return Err(Error::Config("the random method needs at least one seed".into()));
        }
        if self.precision_k == 0 {
            return Err(Error::Config("precision k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Metrics of one attribution run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    /// Per k: (AOPC, LOdds). Empty for QA.
    pub curve: Vec<(f64, f64)>,
    pub precision: Option<Precision>,
    pub degenerate: usize,
    pub floored: usize,
}

impl RunMetrics {
    pub fn aopc(&self) -> f64 {
        mean(self.curve.iter().map(|c| c.0))
    }

    pub fn lodds(&self) -> f64 {
        mean(self.curve.iter().map(|c| c.1))
    }
}

/// Attributes the dataset once and evaluates it over the k-grid.
pub fn evaluate_run(
    model: &Model,
    dataset: &EvalDataset,
    attributions: &[AttributionResult],
    config: &EvalConfig,
) -> Result<RunMetrics> {
    check_cover(dataset, attributions)?;
    let degenerate = attributions.iter().filter(|a| a.degenerate).count();
    match dataset.task {
        Task::Classification => {
            let per_example: Vec<Vec<MetricTerm>> = attributions
                .par_iter()
                .map(|a| metric_terms(model, &a.ids, &a.scores, &config.k_grid, config.policy))
                .collect::<Result<_>>()?;
            let mut floored = 0;
            let curve = (0..config.k_grid.len())
                .map(|i| {
                    floored += per_example.iter().filter(|t| t[i].floored).count();
                    (
                        mean(per_example.iter().map(|t| t[i].drop)),
                        mean(per_example.iter().map(|t| t[i].log_ratio)),
                    )
                })
                .collect();
            Ok(RunMetrics {
                curve,
                precision: None,
                degenerate,
                floored,
            })
        }
        Task::Qa => Ok(RunMetrics {
            curve: Vec::new(),
            precision: Some(precision_at_k(
                model.config(),
                dataset,
                attributions,
                config.precision_k,
            )?),
            degenerate,
            floored: 0,
        }),
    }
}

fn run_method(
    model: &Model,
    dataset: &EvalDataset,
    method: Method,
    mask: &HeadMask,
    seed: u64,
    config: &EvalConfig,
) -> Result<RunMetrics> {
    let attributions = attribute_dataset(model, dataset, method, mask, seed, config.options)?;
    evaluate_run(model, dataset, &attributions, config)
}

/// Curves for every method; seeded methods are repeated over `config.seeds`.
pub fn run_benchmark(
    model: &Model,
    dataset: &EvalDataset,
    mask: &HeadMask,
    config: &EvalConfig,
) -> Result<EvalReport> {
    config.validate()?;
    dataset.validate(model.config())?;
    let mut methods = Vec::with_capacity(config.methods.len());
    for &method in &config.methods {
        let seeds: Vec<u64> = if method.is_seeded() {
            config.seeds.clone()
        } else {
            vec![0]
        };
        let runs = seeds
            .iter()
            .map(|&s| run_method(model, dataset, method, mask, s, config))
            .collect::<Result<Vec<_>>>()?;
        log::info!("{method}: {} run(s) over {} examples", runs.len(), dataset.len());
        methods.push(MethodReport::from_runs(
            method,
            method.is_seeded().then_some(seeds),
            &config.k_grid,
            config.precision_k,
            dataset.len(),
            &runs,
        ));
    }
    Ok(EvalReport {
        task: dataset.task,
        policy: config.policy,
        k_grid: config.k_grid.clone(),
        examples: dataset.len(),
        methods,
        corruption: None,
    })
}

/// Corrupts the mask at each rate and seed, evaluating `ours` each time,
/// next to the unmasked GAE reference.
pub fn corruption_sweep(
    model: &Model,
    dataset: &EvalDataset,
    mask: &HeadMask,
    rho_grid: &[f64],
    config: &EvalConfig,
) -> Result<CorruptionReport> {
    check_grid("rho-grid", rho_grid, 0.0, 1.0)?;
    check_grid("k-grid", &config.k_grid, 0.0, 100.0)?;
    if config.seeds.is_empty() {
        return Err(Error::Config("the corruption sweep needs at least one seed".into()));
    }
    dataset.validate(model.config())?;
    if mask.ones() == mask.blocks() * mask.heads() {
        log::warn!("mask has no zero entries; corruption changes nothing");
    }
    let gae = run_method(model, dataset, Method::Gae, mask, 0, config)?;
    let mut points = Vec::with_capacity(rho_grid.len());
    for &rho in rho_grid {
        let runs = config
            .seeds
            .iter()
            .map(|&seed| {
                let corrupted = corrupt_mask(mask, rho, seed)?;
                run_method(model, dataset, Method::Ours, &corrupted, seed, config)
            })
            .collect::<Result<Vec<_>>>()?;
        points.push(SweepPoint::from_runs(rho, &runs));
    }
    Ok(CorruptionReport {
        seeds: config.seeds.clone(),
        gae: Aggregate::from_runs(std::slice::from_ref(&gae)),
        points,
    })
}
