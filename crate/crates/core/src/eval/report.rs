use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{mean, sample_std, Policy, RunMetrics};
use crate::attribution::Method;
use crate::error::{Error, Result};
use crate::model::Task;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub k: f64,
    pub aopc: f64,
    pub aopc_std: f64,
    pub lodds: f64,
    pub lodds_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrecisionReport {
    pub k: usize,
    pub value: f64,
    pub std: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

/// Mean and sample stddev over runs of the grid-averaged metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aopc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aopc_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lodds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lodds_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision_std: Option<f64>,
}

fn stats(xs: &[f64]) -> (f64, f64) {
    (mean(xs.iter().copied()), sample_std(xs))
}

impl Aggregate {
    pub fn from_runs(runs: &[RunMetrics]) -> Self {
        let classification = runs.iter().all(|r| r.precision.is_none());
        let (aopc, aopc_std, lodds, lodds_std) = if classification {
            let a: Vec<f64> = runs.iter().map(RunMetrics::aopc).collect();
            let l: Vec<f64> = runs.iter().map(RunMetrics::lodds).collect();
            let (a, a_std) = stats(&a);
            let (l, l_std) = stats(&l);
            (Some(a), Some(a_std), Some(l), Some(l_std))
        } else {
            (None, None, None, None)
        };
        let p: Vec<f64> = runs.iter().filter_map(|r| r.precision.map(|p| p.value)).collect();
        let (precision, precision_std) = if p.is_empty() {
            (None, None)
        } else {
            let (m, s) = stats(&p);
            (Some(m), Some(s))
        };
        Self {
            aopc,
            aopc_std,
            lodds,
            lodds_std,
            precision,
            precision_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodReport {
    pub method: Method,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    pub curve: Vec<CurvePoint>,
    pub aggregate: Aggregate,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<PrecisionReport>,
    /// Largest number of degenerate examples in any run.
    pub degenerate: usize,
    /// Pruned confidences that hit the log floor, summed over runs and rates.
    pub floored: usize,
    pub examples: usize,
}

impl MethodReport {
    pub fn from_runs(
        method: Method,
        seeds: Option<Vec<u64>>,
        k_grid: &[f64],
        precision_k: usize,
        examples: usize,
        runs: &[RunMetrics],
    ) -> Self {
        let curve = if runs.iter().all(|r| r.curve.len() == k_grid.len()) && runs[0].precision.is_none() {
            k_grid
                .iter()
                .enumerate()
                .map(|(i, &k)| {
                    let a: Vec<f64> = runs.iter().map(|r| r.curve[i].0).collect();
                    let l: Vec<f64> = runs.iter().map(|r| r.curve[i].1).collect();
                    let (aopc, aopc_std) = stats(&a);
                    let (lodds, lodds_std) = stats(&l);
                    CurvePoint {
                        k,
                        aopc,
                        aopc_std,
                        lodds,
                        lodds_std,
                    }
                })
                .collect()
        } else {
            Vec::new()
        };
        let aggregate = Aggregate::from_runs(runs);
        let precision = runs[0].precision.map(|first| PrecisionReport {
            k: precision_k,
            value: aggregate.precision.unwrap_or(0.0),
            std: aggregate.precision_std.unwrap_or(0.0),
            evaluated: first.evaluated,
            skipped: first.skipped,
        });
        Self {
            method,
            seeds,
            curve,
            aggregate,
            precision,
            degenerate: runs.iter().map(|r| r.degenerate).max().unwrap_or(0),
            floored: runs.iter().map(|r| r.floored).sum(),
            examples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub rho: f64,
    #[serde(flatten)]
    pub aggregate: Aggregate,
    pub degenerate: usize,
}

impl SweepPoint {
    pub fn from_runs(rho: f64, runs: &[RunMetrics]) -> Self {
        Self {
            rho,
            aggregate: Aggregate::from_runs(runs),
            degenerate: runs.iter().map(|r| r.degenerate).max().unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorruptionReport {
    pub seeds: Vec<u64>,
    /// Unmasked reference the sweep converges to at `rho = 1`.
    pub gae: Aggregate,
    pub points: Vec<SweepPoint>,
}

impl CorruptionReport {
    /// `rho,aopc,aopc_std,lodds,lodds_std,precision,precision_std,degenerate`;
    /// metrics a task does not define are left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rho,aopc,aopc_std,lodds,lodds_std,precision,precision_std,degenerate\n");
        let cell = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for p in &self.points {
            let a = &p.aggregate;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                p.rho,
                cell(a.aopc),
                cell(a.aopc_std),
                cell(a.lodds),
                cell(a.lodds_std),
                cell(a.precision),
                cell(a.precision_std),
                p.degenerate
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub task: Task,
    pub policy: Policy,
    pub k_grid: Vec<f64>,
    pub examples: usize,
    pub methods: Vec<MethodReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corruption: Option<CorruptionReport>,
}

impl EvalReport {
    pub fn method(&self, method: Method) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == method)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Classification: `method,k,aopc,aopc_std,lodds,lodds_std`.
    /// QA: `method,k,precision,precision_std`.
    pub fn curves_csv(&self) -> String {
        let mut out = String::new();
        match self.task {
            Task::Classification => {
                out.push_str("method,k,aopc,aopc_std,lodds,lodds_std\n");
                for m in &self.methods {
                    for c in &m.curve {
                        let _ = writeln!(
                            out,
                            "{},{},{},{},{},{}",
                            m.method, c.k, c.aopc, c.aopc_std, c.lodds, c.lodds_std
                        );
                    }
                }
            }
            Task::Qa => {
                out.push_str("method,k,precision,precision_std\n");
                for m in &self.methods {
                    if let Some(p) = &m.precision {
                        let _ = writeln!(out, "{},{},{},{}", m.method, p.k, p.value, p.std);
                    }
                }
            }
        }
        out
    }

    /// Largest degenerate share over methods and sweep points.
    pub fn degenerate_fraction(&self) -> f64 {
        if self.examples == 0 {
            return 0.0;
        }
        let worst = self
            .methods
            .iter()
            .map(|m| m.degenerate)
            .chain(self.corruption.iter().flat_map(|c| c.points.iter().map(|p| p.degenerate)))
            .max()
            .unwrap_or(0);
        worst as f64 / self.examples as f64
    }

    /// Writes `report.json`, `curves.csv` and, after a sweep,
    /// `corruption.csv`. Returns the written paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = vec![
            (dir.join("report.json"), self.to_json()?),
            (dir.join("curves.csv"), self.curves_csv()),
        ];
        if let Some(c) = &self.corruption {
            files.push((dir.join("corruption.csv"), c.to_csv()));
        }
        for (path, body) in &files {
            fs::write(path, body).map_err(|e| Error::io(path, e))?;
        }
        Ok(files.into_iter().map(|(p, _)| p).collect())
    }
}
