use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Classification,
    /// Extractive QA: start/end logits over every token row.
    Qa,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Classification => "classification",
            Task::Qa => "qa",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" | "cls" => Ok(Task::Classification),
            "qa" => Ok(Task::Qa),
            other => Err(Error::Config(format!(
                "unknown task `{other}` (expected classification|qa)"
            ))),
        }
    }
}

/// Shape and topology of a post-layernorm encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    /// Number of classes; ignored by the QA head, which scores every position.
    pub num_classes: usize,
    pub mask_token_id: usize,
    #[serde(default)]
    pub cls_index: usize,
    /// Token ids that are never attributed, pruned or counted in head statistics.
    #[serde(default)]
    pub special_token_ids: Vec<usize>,
    #[serde(default)]
    pub causal: bool,
    #[serde(default)]
    pub task: Task,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
}

fn default_eps() -> f64 {
    1e-12
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Width of the output head: `num_classes`, or 2 (start, end) for QA.
    pub fn output_width(&self) -> usize {
        match self.task {
            Task::Classification => self.num_classes,
            Task::Qa => 2,
        }
    }

    pub fn is_special(&self, token_id: usize) -> bool {
        self.special_token_ids.contains(&token_id)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_blocks", self.num_blocks),
            ("num_heads", self.num_heads),
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.mask_token_id >= self.vocab_size {
            return Err(Error::Config(format!(
                "mask_token_id {} outside vocabulary of {}",
                self.mask_token_id, self.vocab_size
            )));
        }
        if let Some(bad) = self.special_token_ids.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Config(format!(
                "special token id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be > 0".into()));
        }
        Ok(())
    }

    /// Key/value pairs as written into a weight manifest.
    pub(crate) fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let specials = self
            .special_token_ids
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("num_blocks", self.num_blocks.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("max_positions", self.max_positions.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("mask_token_id", self.mask_token_id.to_string()),
            ("cls_index", self.cls_index.to_string()),
            ("special_token_ids", specials),
            ("causal", self.causal.to_string()),
            ("task", self.task.to_string()),
            ("layer_norm_eps", format!("{:e}", self.layer_norm_eps)),
        ]
    }

    pub(crate) fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| -> Result<&str> {
            pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Config(format!("manifest config is missing `{key}`")))
        };
        let int = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::Config(format!("manifest config `{key}` is not an integer")))
        };
        let special_token_ids = match get("special_token_ids") {
            Ok("") | Err(_) => Vec::new(),
            Ok(list) => list
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad special token id `{s}`")))
                })
                .collect::<Result<_>>()?,
        };
        let cfg = ModelConfig {
            num_blocks: int("num_blocks")?,
            num_heads: int("num_heads")?,
            hidden_dim: int("hidden_dim")?,
            ffn_dim: int("ffn_dim")?,
            vocab_size: int("vocab_size")?,
            max_positions: int("max_positions")?,
            num_classes: int("num_classes")?,
            mask_token_id: int("mask_token_id")?,
            cls_index: int("cls_index").unwrap_or(0),
            special_token_ids,
            causal: get("causal").map(|v| v == "true").unwrap_or(false),
            task: get("task").map(str::parse).unwrap_or(Ok(Task::Classification))?,
            layer_norm_eps: match get("layer_norm_eps") {
                Ok(v) => v
                    .parse()
                    .map_err(|_| Error::Config(format!("bad layer_norm_eps `{v}`")))?,
                Err(_) => default_eps(),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
