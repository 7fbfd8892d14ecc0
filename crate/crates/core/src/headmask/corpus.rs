use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Alignment value for special tokens.
pub const SPECIAL: i64 = -1;

/// Head index of an arc attached to the root.
pub const ROOT: i64 = -1;

/// The relations the mask builder scores by default.
pub const CORE_RELATIONS: [&str; 4] = ["nsubj", "dobj", "amod", "advmod"];

/// `(dependent_word, head_word, relation)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arc(pub usize, pub i64, pub String);

impl Arc {
    pub fn dependent(&self) -> usize {
        self.0
    }

    /// `None` for root arcs.
    pub fn head(&self) -> Option<usize> {
        usize::try_from(self.1).ok()
    }

    pub fn relation(&self) -> &str {
        &self.2
    }
}

/// One line of a corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedSentence {
    pub ids: Vec<usize>,
    /// Word index per token, [`SPECIAL`] for special tokens.
    pub alignment: Vec<i64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub words: Vec<String>,
    pub arcs: Vec<Arc>,
}

impl ParsedSentence {
    pub fn num_words(&self) -> usize {
        if !self.words.is_empty() {
            return self.words.len();
        }
        self.alignment
            .iter()
            .filter(|&&a| a >= 0)
            .map(|&a| a as usize + 1)
            .max()
            .unwrap_or(0)
    }

    /// Token positions aligned to `word`, in order.
    pub fn span(&self, word: usize) -> Vec<usize> {
        self.alignment
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == word as i64)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn first_subword(&self, word: usize) -> Option<usize> {
        self.alignment.iter().position(|&a| a == word as i64)
    }

    fn check(&self, line: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Data(format!("sentence {line}: {msg}")));
        if self.ids.is_empty() {
            return bad("no tokens".into());
        }
        if self.alignment.len() != self.ids.len() {
            return bad(format!(
                "{} tokens but {} alignment entries",
                self.ids.len(),
                self.alignment.len()
            ));
        }
        let n = self.num_words();
        for (i, &a) in self.alignment.iter().enumerate() {
            if a != SPECIAL && (a < 0 || a as usize >= n) {
                return bad(format!("token {i} aligned to word {a} of {n}"));
            }
        }
        for w in 0..n {
            if self.first_subword(w).is_none() {
                return bad(format!("word {w} has no tokens"));
            }
        }
        for arc in &self.arcs {
            if arc.dependent() >= n {
                return bad(format!("arc dependent {} out of range", arc.dependent()));
            }
            if arc.1 != ROOT && (arc.1 < 0 || arc.1 as usize >= n) {
                return bad(format!("arc head {} out of range", arc.1));
            }
            if arc.head() == Some(arc.dependent()) {
                return bad(format!("word {} is its own head", arc.dependent()));
            }
        }
        Ok(())
    }

    /// Sentinel positions must be exactly the model's special tokens.
    pub fn check_against(&self, cfg: &ModelConfig, line: usize) -> Result<()> {
        for (i, (&id, &a)) in self.ids.iter().zip(&self.alignment).enumerate() {
            if cfg.is_special(id) != (a == SPECIAL) {
                return Err(Error::Data(format!(
                    "sentence {line}: token {i} (id {id}) alignment {a} disagrees with the special-token set"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedCorpus {
    pub sentences: Vec<ParsedSentence>,
}

impl ParsedCorpus {
    pub fn new(sentences: Vec<ParsedSentence>) -> Result<Self> {
        for (i, s) in sentences.iter().enumerate() {
            s.check(i + 1)?;
        }
        Ok(Self { sentences })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound {
                what: "corpus",
                path: path.to_path_buf(),
            },
            _ => Error::io(path, e),
        })?;
        let mut sentences = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let s: ParsedSentence = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("sentence {}: {e}", n + 1)))?;
            s.check(n + 1)?;
            sentences.push(s);
        }
        Ok(Self { sentences })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for s in &self.sentences {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}
