use rayon::prelude::*;
use serde::Serialize;

use super::corpus::{ParsedCorpus, ParsedSentence};
use crate::error::{Error, Result};
use crate::model::Model;

/// Word offsets beyond this are folded into the two tail buckets.
pub const MAX_OFFSET: i64 = 10;

fn bucket(offset: i64) -> usize {
    (offset.clamp(-MAX_OFFSET, MAX_OFFSET) + MAX_OFFSET) as usize
}

fn normalized(counts: &[usize]) -> Vec<f64> {
    let n: usize = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / n as f64).collect()
}

/// Offset distribution of one relation, `head − dependent`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelationDistribution {
    pub relation: String,
    pub samples: usize,
    /// Word-level mass per offset bucket, index `offset + MAX_OFFSET`.
    pub lambda: Vec<f64>,
    /// Same at token level, between first subwords.
    pub token_lambda: Vec<f64>,
}

impl RelationDistribution {
    pub fn at(&self, offset: i64) -> f64 {
        self.lambda[bucket(offset)]
    }

    pub fn max_lambda(&self) -> f64 {
        self.lambda.iter().cloned().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelationStats {
    pub relations: Vec<RelationDistribution>,
}

impl RelationStats {
    pub fn get(&self, relation: &str) -> Option<&RelationDistribution> {
        self.relations.iter().find(|r| r.relation == relation)
    }
}

/// Relations without a single arc in the corpus are dropped with a warning.
pub fn compute_relation_stats(corpus: &ParsedCorpus, relations: &[String]) -> Result<RelationStats> {
    if corpus.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let width = 2 * MAX_OFFSET as usize + 1;
    let mut out = Vec::new();
    for rel in relations {
        let mut words = vec![0usize; width];
        let mut tokens = vec![0usize; width];
        for s in &corpus.sentences {
            for arc in s.arcs.iter().filter(|a| a.relation() == rel) {
                let Some(head) = arc.head() else { continue };
                let dep = arc.dependent();
                words[bucket(head as i64 - dep as i64)] += 1;
                let th = s.first_subword(head).expect("validated alignment");
                let td = s.first_subword(dep).expect("validated alignment");
                tokens[bucket(th as i64 - td as i64)] += 1;
            }
        }
        let samples: usize = words.iter().sum();
        if samples == 0 {
            log::warn!("relation {rel} has no arcs in the corpus; dropped");
            continue;
        }
        out.push(RelationDistribution {
            relation: rel.clone(),
            samples,
            lambda: normalized(&words),
            token_lambda: normalized(&tokens),
        });
    }
    Ok(RelationStats { relations: out })
}

/// Argmax hit counts for one relation. `forward` scores the dependent's row
/// against the head word's span, `reverse` the head's row against the
/// dependent's span.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntacticCounts {
    pub relation: String,
    pub arcs: usize,
    pub forward: Vec<Vec<usize>>,
    pub reverse: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadFrequencies {
    pub blocks: usize,
    pub heads: usize,
    pub syntactic: Vec<SyntacticCounts>,
    pub offsets: Vec<i64>,
    /// `[offset][block][head]` hit counts over non-special tokens.
    pub positional: Vec<Vec<Vec<usize>>>,
    pub tokens: usize,
}

fn grid(b: usize, m: usize) -> Vec<Vec<usize>> {
    vec![vec![0; m]; b]
}

fn add_grid(a: &mut [Vec<usize>], b: &[Vec<usize>]) {
    for (ra, rb) in a.iter_mut().zip(b) {
        for (x, y) in ra.iter_mut().zip(rb) {
            *x += y;
        }
    }
}

impl HeadFrequencies {
    pub fn empty(blocks: usize, heads: usize, relations: &[String], offsets: &[i64]) -> Self {
        Self {
            blocks,
            heads,
            syntactic: relations
                .iter()
                .map(|r| SyntacticCounts {
                    relation: r.clone(),
                    arcs: 0,
                    forward: grid(blocks, heads),
                    reverse: grid(blocks, heads),
                })
                .collect(),
            offsets: offsets.to_vec(),
            positional: offsets.iter().map(|_| grid(blocks, heads)).collect(),
            tokens: 0,
        }
    }

    pub fn merge(mut self, other: Self) -> Self {
        for (a, b) in self.syntactic.iter_mut().zip(&other.syntactic) {
            a.arcs += b.arcs;
            add_grid(&mut a.forward, &b.forward);
            add_grid(&mut a.reverse, &b.reverse);
        }
        for (a, b) in self.positional.iter_mut().zip(&other.positional) {
            add_grid(a, b);
        }
        self.tokens += other.tokens;
        self
    }

    /// `(forward, reverse)` frequencies; `None` when the relation has no arcs.
    pub fn alpha_synt(&self, k: usize, b: usize, m: usize) -> Option<(f64, f64)> {
        let s = &self.syntactic[k];
        (s.arcs > 0).then(|| {
            let n = s.arcs as f64;
            (s.forward[b][m] as f64 / n, s.reverse[b][m] as f64 / n)
        })
    }

    pub fn alpha_pos(&self, i: usize, b: usize, m: usize) -> Option<f64> {
        (self.tokens > 0).then(|| self.positional[i][b][m] as f64 / self.tokens as f64)
    }
}

/// Argmax over non-special columns, ties to the smallest index.
fn masked_argmax(row: &[f64], special: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, &v) in row.iter().enumerate() {
        if special[j] {
            continue;
        }
        if best.is_none_or(|b| v > row[b]) {
            best = Some(j);
        }
    }
    best
}

fn sentence_counts(
    model: &Model,
    s: &ParsedSentence,
    line: usize,
    relations: &[String],
    offsets: &[i64],
) -> Result<HeadFrequencies> {
    let cfg = model.config();
    s.check_against(cfg, line)?;
    let trace = model.forward(&s.ids).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("sentence {line}: {msg}")),
        other => other,
    })?;
    let t = s.ids.len();
    let special: Vec<bool> = s.ids.iter().map(|&id| cfg.is_special(id)).collect();
    let (nb, nm) = (cfg.num_blocks, cfg.num_heads);
    let mut f = HeadFrequencies::empty(nb, nm, relations, offsets);
    f.tokens = special.iter().filter(|&&x| !x).count();

    let arcs: Vec<Vec<(usize, usize, Vec<usize>, Vec<usize>)>> = relations
        .iter()
        .map(|rel| {
            s.arcs
                .iter()
                .filter(|a| a.relation() == rel)
                .filter_map(|a| {
                    let h = a.head()?;
                    let d = a.dependent();
                    Some((
                        s.first_subword(d)?,
                        s.first_subword(h)?,
                        s.span(h),
                        s.span(d),
                    ))
                })
                .collect()
        })
        .collect();
    for (k, list) in arcs.iter().enumerate() {
        f.syntactic[k].arcs = list.len();
    }

    for (b, bt) in trace.blocks().iter().enumerate() {
        let att = bt.attention.data();
        for m in 0..nm {
            let am: Vec<Option<usize>> = (0..t)
                .map(|i| masked_argmax(&att[(m * t + i) * t..(m * t + i + 1) * t], &special))
                .collect();
            for (k, list) in arcs.iter().enumerate() {
                for (dep_row, head_row, head_span, dep_span) in list {
                    if am[*dep_row].is_some_and(|j| head_span.contains(&j)) {
                        f.syntactic[k].forward[b][m] += 1;
                    }
                    if am[*head_row].is_some_and(|j| dep_span.contains(&j)) {
                        f.syntactic[k].reverse[b][m] += 1;
                    }
                }
            }
            for (i, &off) in offsets.iter().enumerate() {
                let hits = (0..t)
                    .filter(|&r| !special[r])
                    .filter(|&r| am[r].is_some_and(|j| j as i64 == r as i64 + off))
                    .count();
                f.positional[i][b][m] += hits;
            }
        }
    }
    Ok(f)
}

/// Per-head argmax hit counts over the corpus. Special tokens are excluded
/// both as rows and as argmax candidates.
pub fn compute_head_frequencies(
    model: &Model,
    corpus: &ParsedCorpus,
    relations: &[String],
    offsets: &[i64],
) -> Result<HeadFrequencies> {
    if corpus.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let cfg = model.config();
    let parts: Vec<HeadFrequencies> = corpus
        .sentences
        .par_iter()
        .enumerate()
        .map(|(i, s)| sentence_counts(model, s, i + 1, relations, offsets))
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().fold(
        HeadFrequencies::empty(cfg.num_blocks, cfg.num_heads, relations, offsets),
        HeadFrequencies::merge,
    ))
}
