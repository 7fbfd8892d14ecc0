use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::RunArgs;
use crate::attribution::{ExplainOptions, Method};
use crate::error::{Error, Result};
use crate::eval::{check_grid, EvalConfig, Policy};
use crate::headmask::MaskOptions;
use crate::model::Task;

const KEYS: &[&str] = &[
    "weights",
    "corpus",
    "dataset",
    "mask",
    "out",
    "method",
    "k-grid",
    "rho-grid",
    "seed",
    "xi-synt",
    "xi-pos",
    "offsets",
    "relations",
    "policy",
    "task",
    "jobs",
    "precision-k",
    "row-normalize",
    "mask-propagation",
    "ids",
    "row",
];

#[derive(Debug, Clone, PartialEq)]
pub enum MaskSpec {
    AllOnes,
    File(PathBuf),
}

/// Command-line flags merged over the config file and defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub weights: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub mask: Option<MaskSpec>,
    pub out: PathBuf,
    /// `None` leaves the choice to the command.
    pub methods: Option<Vec<Method>>,
    pub eval: EvalConfig,
    pub rho_grid: Vec<f64>,
    pub mask_options: MaskOptions,
    pub task: Option<Task>,
    pub jobs: Option<usize>,
    pub ids: Option<String>,
    pub row: Option<usize>,
}

/// Flag, else config file, else `$HEADLRP_OUT`, else `headlrp-out`.
pub(crate) fn output_dir(flag: Option<PathBuf>, file: Option<PathBuf>) -> PathBuf {
    flag.or(file)
        .or_else(|| std::env::var_os("HEADLRP_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("headlrp-out"))
}

/// `base.join(value)` without `.` components.
fn relative_to(base: &Path, value: &str) -> PathBuf {
    let joined: PathBuf = base
        .join(value)
        .components()
        .filter(|c| !matches!(c, std::path::Component::CurDir))
        .collect();
    if joined.as_os_str().is_empty() {
        PathBuf::from(".")
    } else {
        joined
    }
}

fn parse_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound {
            what: "config",
            path: path.to_path_buf(),
        },
        _ => Error::io(path, e),
    })?;
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{}:{}: expected `key = value`", path.display(), n + 1)))?;
        let key = key.trim().replace('_', "-");
        if !KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!(
                "{}:{}: unknown key `{key}`",
                path.display(),
                n + 1
            )));
        }
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::Config(format!("{}:{}: duplicate key `{key}`", path.display(), n + 1)));
        }
    }
    Ok(map)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for {key}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(Error::Config(format!("invalid value `{other}` for {key}"))),
    }
}

fn parse_methods(values: &[String]) -> Result<Vec<Method>> {
    let mut methods = Vec::new();
    for v in values.iter().flat_map(|v| v.split(',')).map(str::trim).filter(|v| !v.is_empty()) {
        let m: Method = v.parse()?;
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    Ok(methods)
}

impl RunConfig {
    pub fn resolve(args: &RunArgs) -> Result<Self> {
        let (file, base) = match &args.config {
            Some(path) => (
                parse_file(path)?,
                path.parent().map(Path::to_path_buf).unwrap_or_default(),
            ),
            None => (BTreeMap::new(), PathBuf::new()),
        };
        let get = |key: &str| file.get(key).map(String::as_str);
        let path = |flag: &Option<PathBuf>, key: &str| flag.clone().or_else(|| get(key).map(|v| relative_to(&base, v)));
        // a flag wins over the file; the file over the default
        let text = |flag: &Option<String>, key: &str| flag.clone().or_else(|| get(key).map(str::to_string));

        let defaults = EvalConfig::default();
        let mask_defaults = MaskOptions::default();

        let mask = match text(&args.mask, "mask") {
            Some(v) if v == "all-ones" => Some(MaskSpec::AllOnes),
            Some(v) => Some(MaskSpec::File(match &args.mask {
                Some(_) => PathBuf::from(v),
                None => relative_to(&base, &v),
            })),
            None => None,
        };
        let methods = if !args.methods.is_empty() {
            Some(parse_methods(&args.methods)?)
        } else {
            get("method").map(|v| parse_methods(&[v.to_string()])).transpose()?
        };
        let k_grid = match text(&args.k_grid, "k-grid") {
            Some(v) => parse_list("k-grid", &v)?,
            None => defaults.k_grid.clone(),
        };
        check_grid("k-grid", &k_grid, 0.0, 100.0)?;
        let rho_grid = match text(&args.rho_grid, "rho-grid") {
            Some(v) => parse_list("rho-grid", &v)?,
            None => (1..=10).map(|i| i as f64 / 10.0).collect(),
        };
        check_grid("rho-grid", &rho_grid, 0.0, 1.0)?;
        let seeds = if !args.seeds.is_empty() {
            args.seeds.clone()
        } else {
            match get("seed") {
                Some(v) => parse_list("seed", v)?,
                None => defaults.seeds.clone(),
            }
        };
        if seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let policy = match text(&args.policy, "policy") {
            Some(v) => v.parse()?,
            None => Policy::default(),
        };
        let task = text(&args.task, "task").map(|v| v.parse::<Task>()).transpose()?;
        let jobs = match args.jobs {
            Some(j) => Some(j),
            None => get("jobs").map(|v| parse("jobs", v)).transpose()?,
        };
        if jobs == Some(0) {
            return Err(Error::Config("--jobs must be >= 1".into()));
        }
        let precision_k = match args.precision_k {
            Some(k) => k,
            None => get("precision-k").map(|v| parse("precision-k", v)).transpose()?.unwrap_or(defaults.precision_k),
        };
        let flag = |set: bool, key: &str| -> Result<bool> {
            if set {
                return Ok(true);
            }
            get(key).map(|v| parse_bool(key, v)).transpose().map(|v| v.unwrap_or(false))
        };
        let options = ExplainOptions {
            row_normalize: flag(args.row_normalize, "row-normalize")?,
            mask_propagation: flag(args.mask_propagation, "mask-propagation")?,
        };

        let xi_synt = match args.xi_synt {
            Some(x) => x,
            None => get("xi-synt").map(|v| parse("xi-synt", v)).transpose()?.unwrap_or(mask_defaults.xi_synt),
        };
        let xi_pos = match args.xi_pos {
            Some(x) => x,
            None => get("xi-pos").map(|v| parse("xi-pos", v)).transpose()?.unwrap_or(mask_defaults.xi_pos),
        };
        let offsets = match text(&args.offsets, "offsets") {
            Some(v) => parse_list("offsets", &v)?,
            None => mask_defaults.offsets.clone(),
        };
        let relations = match text(&args.relations, "relations") {
            Some(v) => parse_list("relations", &v)?,
            None => mask_defaults.relations.clone(),
        };
        let mask_options = MaskOptions {
            xi_synt,
            xi_pos,
            offsets,
            relations,
        };
        mask_options.validate()?;

        let row = match args.row {
            Some(r) => Some(r),
            None => get("row").map(|v| parse("row", v)).transpose()?,
        };

        Ok(Self {
            weights: path(&args.weights, "weights"),
            corpus: path(&args.corpus, "corpus"),
            dataset: path(&args.dataset, "dataset"),
            mask,
            out: output_dir(args.out.clone(), get("out").map(|v| relative_to(&base, v))),
            methods,
            eval: EvalConfig {
                methods: Vec::new(),
                k_grid,
                seeds,
                policy,
                precision_k,
                options,
            },
            rho_grid,
            mask_options,
            task,
            jobs,
            ids: text(&args.ids, "ids"),
            row,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args() -> RunArgs {
        RunArgs::default()
    }

    #[test]
    fn defaults() {
        let c = RunConfig::resolve(&args()).unwrap();
        assert_eq!(c.eval.k_grid.len(), 9);
        assert_eq!(c.rho_grid.first(), Some(&0.1));
        assert_eq!(c.rho_grid.last(), Some(&1.0));
        assert_eq!(c.eval.seeds, [0, 1, 2, 3, 4]);
        assert_eq!(c.mask_options, MaskOptions::default());
        assert_eq!(c.methods, None);
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.conf");
        fs::write(&file, "# comment\nweights = m.json\nxi_synt = 0.3\nk-grid = 10,50\nmethod = gae,rawatt\n").unwrap();
        let mut a = args();
        a.config = Some(file);
        a.k_grid = Some("20".into());
        let c = RunConfig::resolve(&a).unwrap();
        assert_eq!(c.weights, Some(dir.path().join("m.json")));
        assert_eq!(c.mask_options.xi_synt, 0.3);
        assert_eq!(c.eval.k_grid, [20.0]);
        assert_eq!(c.methods, Some(vec![Method::Gae, Method::RawAtt]));
    }

    #[test]
    fn rejects_bad_values() {
        let mut a = args();
        a.k_grid = Some("50,10".into());
        assert!(matches!(RunConfig::resolve(&a), Err(Error::Config(_))));
        let mut a = args();
        a.xi_pos = Some(1.5);
        assert!(RunConfig::resolve(&a).is_err());
        let mut a = args();
        a.methods = vec!["lime".into()];
        let err = RunConfig::resolve(&a).unwrap_err().to_string();
        assert!(err.contains("valid methods: ours, gae, rawatt, rollout, random"), "{err}");
    }

    #[test]
    fn unknown_key() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.conf");
        fs::write(&file, "colour = red\n").unwrap();
        let mut a = args();
        a.config = Some(file);
        assert!(matches!(RunConfig::resolve(&a), Err(Error::Config(m)) if m.contains("colour")));
    }
}
