use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::stats::{HeadFrequencies, RelationStats};
use crate::error::{Error, Result};

/// Why a head is switched on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    Syntactic {
        relation: String,
        /// The larger of the two directional frequencies.
        frequency: f64,
        dependent_to_head: f64,
        head_to_dependent: f64,
        threshold: f64,
    },
    Positional {
        offset: i64,
        frequency: f64,
        threshold: f64,
    },
    AllOnes,
    Random {
        seed: u64,
    },
    Corruption {
        rate: f64,
        seed: u64,
    },
}

impl Source {
    pub fn is_syntactic(&self) -> bool {
        matches!(self, Source::Syntactic { .. })
    }

    pub fn is_positional(&self) -> bool {
        matches!(self, Source::Positional { .. })
    }
}

/// `B×M` binary gate with the sources that switched each head on.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMask {
    blocks: usize,
    heads: usize,
    provenance: Vec<Vec<Vec<Source>>>,
}

#[derive(Serialize, Deserialize)]
struct ProvenanceEntry {
    block: usize,
    head: usize,
    sources: Vec<Source>,
}

#[derive(Serialize, Deserialize)]
struct MaskFile {
    blocks: usize,
    heads: usize,
    mask: Vec<Vec<u8>>,
    provenance: Vec<ProvenanceEntry>,
    rate: f64,
}

impl HeadMask {
    pub fn empty(blocks: usize, heads: usize) -> Self {
        Self {
            blocks,
            heads,
            provenance: vec![vec![Vec::new(); heads]; blocks],
        }
    }

    pub fn all_ones(blocks: usize, heads: usize) -> Self {
        let mut m = Self::empty(blocks, heads);
        for b in 0..blocks {
            for h in 0..heads {
                m.add(b, h, Source::AllOnes);
            }
        }
        m
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn add(&mut self, block: usize, head: usize, source: Source) {
        self.provenance[block][head].push(source);
    }

    pub fn get(&self, block: usize, head: usize) -> bool {
        !self.provenance[block][head].is_empty()
    }

    pub fn sources(&self, block: usize, head: usize) -> &[Source] {
        &self.provenance[block][head]
    }

    pub fn row(&self, block: usize) -> Vec<bool> {
        (0..self.heads).map(|h| self.get(block, h)).collect()
    }

    pub fn grid(&self) -> Vec<Vec<bool>> {
        (0..self.blocks).map(|b| self.row(b)).collect()
    }

    pub fn ones(&self) -> usize {
        self.provenance.iter().flatten().filter(|s| !s.is_empty()).count()
    }

    pub fn rate(&self) -> f64 {
        let n = self.blocks * self.heads;
        if n == 0 {
            0.0
        } else {
            self.ones() as f64 / n as f64
        }
    }

    fn positions(&self, on: bool) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for b in 0..self.blocks {
            for h in 0..self.heads {
                if self.get(b, h) == on {
                    out.push((b, h));
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let file = MaskFile {
            blocks: self.blocks,
            heads: self.heads,
            mask: self
                .grid()
                .into_iter()
                .map(|r| r.into_iter().map(u8::from).collect())
                .collect(),
            provenance: self
                .positions(true)
                .into_iter()
                .map(|(block, head)| ProvenanceEntry {
                    block,
                    head,
                    sources: self.provenance[block][head].clone(),
                })
                .collect(),
            rate: self.rate(),
        };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MaskFile = serde_json::from_str(text)?;
        if file.mask.len() != file.blocks || file.mask.iter().any(|r| r.len() != file.heads) {
            return Err(Error::Data(format!(
                "mask grid is not {}×{}",
                file.blocks, file.heads
            )));
        }
        let mut m = Self::empty(file.blocks, file.heads);
        for p in file.provenance {
            if p.block >= file.blocks || p.head >= file.heads {
                return Err(Error::Data(format!(
                    "provenance for ({}, {}) outside the grid",
                    p.block, p.head
                )));
            }
            if p.sources.is_empty() {
                return Err(Error::Data(format!(
                    "empty provenance for ({}, {})",
                    p.block, p.head
                )));
            }
            m.provenance[p.block][p.head].extend(p.sources);
        }
        for (b, row) in file.mask.iter().enumerate() {
            for (h, &v) in row.iter().enumerate() {
                if v > 1 {
                    return Err(Error::Data(format!("mask entry ({b}, {h}) is {v}")));
                }
                if (v == 1) != m.get(b, h) {
                    return Err(Error::Data(format!(
                        "mask entry ({b}, {h}) disagrees with its provenance"
                    )));
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound {
                what: "mask",
                path: path.to_path_buf(),
            },
            _ => Error::io(path, e),
        })?;
        Self::from_json(&text)
    }
}

/// Heads whose frequency for some relation beats `max(λ_k) + ξ_synt`.
pub fn build_syntactic_mask(freqs: &HeadFrequencies, stats: &RelationStats, xi_synt: f64) -> HeadMask {
    let mut mask = HeadMask::empty(freqs.blocks, freqs.heads);
    for (k, counts) in freqs.syntactic.iter().enumerate() {
        let Some(dist) = stats.get(&counts.relation) else { continue };
        let threshold = dist.max_lambda() + xi_synt;
        for b in 0..freqs.blocks {
            for m in 0..freqs.heads {
                let Some((fwd, rev)) = freqs.alpha_synt(k, b, m) else { continue };
                let alpha = fwd.max(rev);
                if alpha > threshold {
                    mask.add(
                        b,
                        m,
                        Source::Syntactic {
                            relation: counts.relation.clone(),
                            frequency: alpha,
                            dependent_to_head: fwd,
                            head_to_dependent: rev,
                            threshold,
                        },
                    );
                }
            }
        }
    }
    mask
}

/// Heads whose argmax sits at one relative offset more than `ξ_pos` of the time.
pub fn build_positional_mask(freqs: &HeadFrequencies, xi_pos: f64) -> HeadMask {
    let mut mask = HeadMask::empty(freqs.blocks, freqs.heads);
    for (i, &offset) in freqs.offsets.iter().enumerate() {
        for b in 0..freqs.blocks {
            for m in 0..freqs.heads {
                let Some(alpha) = freqs.alpha_pos(i, b, m) else { continue };
                if alpha > xi_pos {
                    mask.add(
                        b,
                        m,
                        Source::Positional {
                            offset,
                            frequency: alpha,
                            threshold: xi_pos,
                        },
                    );
                }
            }
        }
    }
    mask
}

/// Elementwise OR; provenance is merged without duplicates.
pub fn combine_masks(a: &HeadMask, b: &HeadMask) -> Result<HeadMask> {
    if a.blocks != b.blocks || a.heads != b.heads {
        return Err(Error::dim(format!(
            "cannot combine {}×{} and {}×{} masks",
            a.blocks, a.heads, b.blocks, b.heads
        )));
    }
    let mut out = a.clone();
    for (bl, h) in b.positions(true) {
        for s in b.sources(bl, h) {
            if !out.provenance[bl][h].contains(s) {
                out.provenance[bl][h].push(s.clone());
            }
        }
    }
    Ok(out)
}

/// Uniformly random mask with the same number of ones as `reference`.
pub fn random_mask(reference: &HeadMask, seed: u64) -> HeadMask {
    let mut cells: Vec<(usize, usize)> = (0..reference.blocks)
        .flat_map(|b| (0..reference.heads).map(move |h| (b, h)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cells.shuffle(&mut rng);
    let mut out = HeadMask::empty(reference.blocks, reference.heads);
    for &(b, h) in &cells[..reference.ones()] {
        out.add(b, h, Source::Random { seed });
    }
    out
}

/// `⌈x⌉` that ignores round-off just above an integer.
pub(crate) fn ceil_count(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}

/// Flips `⌈ρ·#zeros⌉` zero entries to one. For a fixed seed the flipped
/// sets are nested in `ρ`.
pub fn corrupt_mask(mask: &HeadMask, rate: f64, seed: u64) -> Result<HeadMask> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("corruption rate {rate} outside [0, 1]")));
    }
    let mut zeros = mask.positions(false);
    let n = ceil_count(rate * zeros.len() as f64).min(zeros.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    zeros.shuffle(&mut rng);
    let mut out = mask.clone();
    for &(b, h) in &zeros[..n] {
        out.add(b, h, Source::Corruption { rate, seed });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::headmask::stats::{RelationDistribution, SyntacticCounts};

    fn freqs_with(alpha_num: usize, arcs: usize) -> HeadFrequencies {
        HeadFrequencies {
            blocks: 1,
            heads: 1,
            syntactic: vec![SyntacticCounts {
                relation: "amod".into(),
                arcs,
                forward: vec![vec![alpha_num]],
                reverse: vec![vec![0]],
            }],
            offsets: vec![-1],
            positional: vec![vec![vec![alpha_num]]],
            tokens: arcs,
        }
    }

    fn stats_with_max(max: f64) -> RelationStats {
        let mut lambda = vec![0.0; 21];
        lambda[11] = max;
        lambda[12] = 1.0 - max;
        RelationStats {
            relations: vec![RelationDistribution {
                relation: "amod".into(),
                samples: 100,
                lambda: lambda.clone(),
                token_lambda: lambda,
            }],
        }
    }

    #[test]
    fn syntactic_threshold_is_strict() {
        assert!(build_syntactic_mask(&freqs_with(75, 100), &stats_with_max(0.6), 0.1).get(0, 0));
        assert!(!build_syntactic_mask(&freqs_with(70, 100), &stats_with_max(0.6), 0.1).get(0, 0));
    }

    #[test]
    fn positional_threshold_is_strict() {
        assert!(build_positional_mask(&freqs_with(85, 100), 0.8).get(0, 0));
        assert!(!build_positional_mask(&freqs_with(80, 100), 0.8).get(0, 0));
    }

    #[test]
    fn two_relations_clamp_to_one() {
        let mut f = freqs_with(90, 100);
        let mut second = f.syntactic[0].clone();
        second.relation = "nsubj".into();
        f.syntactic.push(second);
        let mut s = stats_with_max(0.5);
        let mut d = s.relations[0].clone();
        d.relation = "nsubj".into();
        s.relations.push(d);
        let m = build_syntactic_mask(&f, &s, 0.1);
        assert_eq!(m.ones(), 1);
        assert_eq!(m.sources(0, 0).len(), 2);
    }

    #[test]
    fn corruption_counts() {
        let mut m = HeadMask::empty(2, 6);
        m.add(0, 0, Source::AllOnes);
        m.add(1, 3, Source::AllOnes);
        assert_eq!(corrupt_mask(&m, 0.0, 1).unwrap(), m);
        assert_eq!(corrupt_mask(&m, 0.5, 1).unwrap().ones(), 2 + 5);
        assert_eq!(corrupt_mask(&m, 1.0, 1).unwrap().ones(), 12);
        assert_eq!(corrupt_mask(&m, 0.3, 1).unwrap().ones(), 2 + 3);
        assert!(corrupt_mask(&m, 1.5, 1).is_err());
    }

    #[test]
    fn json_round_trip() {
        let mut m = HeadMask::empty(2, 3);
        m.add(
            0,
            2,
            Source::Positional {
                offset: 1,
                frequency: 0.95,
                threshold: 0.8,
            },
        );
        m.add(1, 0, Source::Random { seed: 4 });
        let back = HeadMask::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(HeadMask::from_json(r#"{"blocks":1,"heads":1,"mask":[[1]],"provenance":[],"rate":1}"#).is_err());
    }
}
