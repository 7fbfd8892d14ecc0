//! Syntactic and positional head identification from corpus statistics.

mod corpus;
mod mask;
mod stats;

pub use corpus::{Arc, ParsedCorpus, ParsedSentence, CORE_RELATIONS, ROOT, SPECIAL};
pub use mask::{
    build_positional_mask, build_syntactic_mask, combine_masks, corrupt_mask, random_mask, HeadMask,
    Source,
};
pub(crate) use mask::ceil_count;
pub use stats::{
    compute_head_frequencies, compute_relation_stats, HeadFrequencies, RelationDistribution,
    RelationStats, SyntacticCounts, MAX_OFFSET,
};

use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskOptions {
    pub xi_synt: f64,
    pub xi_pos: f64,
    pub offsets: Vec<i64>,
    pub relations: Vec<String>,
}

impl Default for MaskOptions {
    fn default() -> Self {
        Self {
            xi_synt: 0.1,
            xi_pos: 0.8,
            offsets: vec![-2, -1, 1, 2],
            relations: CORE_RELATIONS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl MaskOptions {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("xi_synt", self.xi_synt), ("xi_pos", self.xi_pos)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.offsets.is_empty() || self.relations.is_empty() {
            return Err(Error::Config("offsets and relations must be non-empty".into()));
        }
        Ok(())
    }
}

/// Everything the builder computed, kept for diagnostics.
#[derive(Debug, Clone)]
pub struct MaskBuild {
    pub stats: RelationStats,
    pub frequencies: HeadFrequencies,
    pub syntactic: HeadMask,
    pub positional: HeadMask,
    pub combined: HeadMask,
}

pub fn build_mask(model: &Model, corpus: &ParsedCorpus, options: &MaskOptions) -> Result<MaskBuild> {
    options.validate()?;
    let stats = compute_relation_stats(corpus, &options.relations)?;
    let frequencies = compute_head_frequencies(model, corpus, &options.relations, &options.offsets)?;
    let syntactic = build_syntactic_mask(&frequencies, &stats, options.xi_synt);
    let positional = build_positional_mask(&frequencies, options.xi_pos);
    let combined = combine_masks(&syntactic, &positional)?;
    Ok(MaskBuild {
        stats,
        frequencies,
        syntactic,
        positional,
        combined,
    })
}
