use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Task};

/// One line of a dataset file. Classification lines carry `label`, QA lines
/// carry an inclusive token span `answer` and the first context position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_start: Option<usize>,
}

impl Example {
    pub fn classification(ids: Vec<usize>, label: usize) -> Self {
        Self {
            ids,
            label: Some(label),
            answer: None,
            context_start: None,
        }
    }

    pub fn qa(ids: Vec<usize>, answer: Option<[usize; 2]>, context_start: usize) -> Self {
        Self {
            ids,
            label: None,
            answer,
            context_start: Some(context_start),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalDataset {
    pub task: Task,
    pub examples: Vec<Example>,
}

impl EvalDataset {
    pub fn new(task: Task, examples: Vec<Example>) -> Self {
        Self { task, examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Checks every example against the model's vocabulary, length limit,
    /// class count and task.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.task != cfg.task {
            return Err(Error::Config(format!(
                "{} dataset for a {} model",
                self.task, cfg.task
            )));
        }
        for (n, ex) in self.examples.iter().enumerate() {
            let bad = |msg: String| Err(Error::Data(format!("example {}: {msg}", n + 1)));
            if ex.ids.is_empty() || ex.ids.len() > cfg.max_positions {
                return bad(format!("length {} outside 1..={}", ex.ids.len(), cfg.max_positions));
            }
            if let Some(id) = ex.ids.iter().find(|&&id| id >= cfg.vocab_size) {
                return bad(format!("token id {id} outside vocabulary of {}", cfg.vocab_size));
            }
            match self.task {
                Task::Classification => match ex.label {
                    Some(l) if l < cfg.num_classes => {}
                    Some(l) => return bad(format!("label {l} with {} classes", cfg.num_classes)),
                    None => return bad("missing label".into()),
                },
                Task::Qa => {
                    let Some(cs) = ex.context_start else {
                        return bad("missing context_start".into());
                    };
                    if cs >= ex.ids.len() {
                        return bad(format!("context_start {cs} beyond length {}", ex.ids.len()));
                    }
                    if let Some([s, e]) = ex.answer {
                        if s > e || e >= ex.ids.len() || s < cs {
                            return bad(format!("answer span [{s}, {e}] outside the context"));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path, task: Task) -> Result<Self> {
        let file = File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound {
                what: "dataset",
                path: path.to_path_buf(),
            },
            _ => Error::io(path, e),
        })?;
        let mut examples = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let ex: Example = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("example {}: {e}", n + 1)))?;
            examples.push(ex);
        }
        Ok(Self { task, examples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for ex in &self.examples {
            serde_json::to_writer(&mut out, ex)?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}
