//! `headlrp` command line: build masks, explain inputs, evaluate, ablate.

mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::{MaskSpec, RunConfig};

use crate::attribution::{attribute, write_jsonl, Method};
use crate::error::{Error, Result};
use crate::eval::{corruption_sweep, run_benchmark, targets_for, EvalDataset, EvalReport, Example};
use crate::fixtures::toy_bundle;
use crate::headmask::{build_mask, HeadMask, ParsedCorpus};
use crate::model::{save_weights, DType, Model, Task};
use crate::render;

#[derive(Debug, Parser)]
#[command(name = "headlrp", version, about = "Relevance propagation through syntactic and positional attention heads")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Find syntactic and positional heads from a parsed corpus.
    BuildMask(RunArgs),
    /// Attribute one input and render a token heatmap.
    Explain(RunArgs),
    /// AOPC/LOdds curves (precision@k for QA) for every requested method.
    Eval(RunArgs),
    /// Corrupt the mask over the rho grid and compare against GAE.
    Ablate(RunArgs),
    /// Write a small synthetic bundle: weights, corpus, dataset, config.
    Toy(ToyArgs),
}

/// Every flag is optional; unset flags fall back to the `--config` file,
/// then to the defaults shown here.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Flat `key = value` file; command-line flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Weight manifest.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Parsed corpus (JSON lines).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Evaluation dataset (JSON lines).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Mask file, or `all-ones`.
    #[arg(long)]
    pub mask: Option<String>,
    /// Output directory [default: $HEADLRP_OUT, else headlrp-out].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Attribution method, repeatable: ours, gae, rawatt, rollout, random
    /// [default: ours for explain, all for eval].
    #[arg(long = "method", value_delimiter = ',')]
    pub methods: Vec<String>,
    /// Pruning rates in percent [default: 10,20,30,40,50,60,70,80,90].
    #[arg(long)]
    pub k_grid: Option<String>,
    /// Corruption rates [default: 0.1,0.2,...,1.0].
    #[arg(long)]
    pub rho_grid: Option<String>,
    /// Seed, repeatable [default: 0,1,2,3,4].
    #[arg(long = "seed", value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Syntactic margin over the relation's largest offset probability [default: 0.1].
    #[arg(long)]
    pub xi_synt: Option<f64>,
    /// Positional frequency threshold [default: 0.8].
    #[arg(long)]
    pub xi_pos: Option<f64>,
    /// Positional offsets [default: -2,-1,1,2].
    #[arg(long, allow_hyphen_values = true)]
    pub offsets: Option<String>,
    /// Dependency relations [default: nsubj,dobj,amod,advmod].
    #[arg(long)]
    pub relations: Option<String>,
    /// Pruning policy: mask or delete [default: mask].
    #[arg(long)]
    pub policy: Option<String>,
    /// classification or qa [default: the model's task].
    #[arg(long)]
    pub task: Option<String>,
    /// Worker threads [default: all cores].
    #[arg(long)]
    pub jobs: Option<usize>,
    /// k of precision@k for QA [default: 20].
    #[arg(long)]
    pub precision_k: Option<usize>,
    /// Row-normalize each rollout factor.
    #[arg(long)]
    pub row_normalize: bool,
    /// Drop masked heads from the relevance passed to lower blocks.
    #[arg(long)]
    pub mask_propagation: bool,
    /// explain: comma-separated token ids.
    #[arg(long)]
    pub ids: Option<String>,
    /// explain: dataset row to attribute, from 0 [default: 0].
    #[arg(long)]
    pub row: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ToyArgs {
    /// Output directory [default: $HEADLRP_OUT, else headlrp-out].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Corpus sentences.
    #[arg(long, default_value_t = 64)]
    pub sentences: usize,
    /// Dataset examples.
    #[arg(long, default_value_t = 40)]
    pub examples: usize,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Toy(args) => cmd_toy(&args),
        Command::BuildMask(args) => with_pool(args, cmd_build_mask),
        Command::Explain(args) => with_pool(args, cmd_explain),
        Command::Eval(args) => with_pool(args, cmd_eval),
        Command::Ablate(args) => with_pool(args, cmd_ablate),
    }
}

fn with_pool(args: RunArgs, f: fn(&RunConfig) -> Result<()>) -> Result<()> {
    let config = RunConfig::resolve(&args)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = config.jobs {
        builder = builder.num_threads(jobs);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", config.jobs.unwrap_or(0))))?;
    pool.install(|| f(&config))
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Config(format!("--{flag} is required")))
}

fn load_model(config: &RunConfig) -> Result<Model> {
    let model = Model::load(required(&config.weights, "weights")?)?;
    if let Some(task) = config.task {
        if task != model.config().task {
            return Err(Error::Config(format!(
                "--task {task} does not match the model's task {}",
                model.config().task
            )));
        }
    }
    Ok(model)
}

fn load_mask(config: &RunConfig, model: &Model, methods: &[Method]) -> Result<HeadMask> {
    let cfg = model.config();
    let mask = match &config.mask {
        Some(MaskSpec::AllOnes) => HeadMask::all_ones(cfg.num_blocks, cfg.num_heads),
        Some(MaskSpec::File(path)) => HeadMask::load(path)?,
        None if methods.iter().any(|m| matches!(m, Method::Ours | Method::Random)) => {
            return Err(Error::Config("--mask is required for the ours and random methods".into()));
        }
        None => HeadMask::all_ones(cfg.num_blocks, cfg.num_heads),
    };
    if mask.blocks() != cfg.num_blocks || mask.heads() != cfg.num_heads {
        return Err(Error::Config(format!(
            "{}×{} mask for a {}×{} model",
            mask.blocks(),
            mask.heads(),
            cfg.num_blocks,
            cfg.num_heads
        )));
    }
    Ok(mask)
}

fn load_dataset(config: &RunConfig, model: &Model) -> Result<EvalDataset> {
    let path = required(&config.dataset, "dataset")?;
    let dataset = EvalDataset::load(path, model.config().task)?;
    dataset.validate(model.config())?;
    if dataset.is_empty() {
        return Err(Error::Data(format!("dataset {} is empty", path.display())));
    }
    Ok(dataset)
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: PathBuf, body: &str) -> Result<()> {
    fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn check_degeneracy(degenerate: usize, examples: usize, what: &str) -> Result<()> {
    if 2 * degenerate > examples {
        return Err(Error::Numeric(format!(
            "{what}: {degenerate} of {examples} examples fell back to uniform scores"
        )));
    }
    Ok(())
}

fn cmd_build_mask(config: &RunConfig) -> Result<()> {
    let model = load_model(config)?;
    let corpus = ParsedCorpus::load(required(&config.corpus, "corpus")?)?;
    let build = build_mask(&model, &corpus, &config.mask_options)?;
    let mask = &build.combined;
    println!(
        "syntactic {} + positional {} -> {} of {} heads kept (rate {:.4})",
        build.syntactic.ones(),
        build.positional.ones(),
        mask.ones(),
        mask.blocks() * mask.heads(),
        mask.rate()
    );
    create_out(&config.out)?;
    write(config.out.join("mask.json"), &mask.to_json()?)?;
    write(config.out.join("mask.html"), &render::mask_grid_html(mask))
}

fn parse_ids(text: &str, model: &Model) -> Result<Vec<usize>> {
    let cfg = model.config();
    let ids = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("invalid token id `{}`", s.trim())))
        })
        .collect::<Result<Vec<_>>>()?;
    if ids.is_empty() || ids.len() > cfg.max_positions {
        return Err(Error::Config(format!(
            "input length {} outside 1..={}",
            ids.len(),
            cfg.max_positions
        )));
    }
    if let Some(bad) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::Config(format!(
            "invalid token id {bad} (vocabulary size {})",
            cfg.vocab_size
        )));
    }
    Ok(ids)
}

fn cmd_explain(config: &RunConfig) -> Result<()> {
    let model = load_model(config)?;
    let methods = config.methods.clone().unwrap_or_else(|| vec![Method::Ours]);
    let mask = load_mask(config, &model, &methods)?;
    let example = match (&config.ids, &config.dataset) {
        (Some(text), _) => {
            let ids = parse_ids(text, &model)?;
            match model.config().task {
                Task::Classification => Example::classification(ids, 0),
                Task::Qa => Example::qa(ids, None, 0),
            }
        }
        (None, Some(_)) => {
            let dataset = load_dataset(config, &model)?;
            let row = config.row.unwrap_or(0);
            dataset
                .examples
                .get(row)
                .cloned()
                .ok_or_else(|| Error::Config(format!("row {row} beyond {} examples", dataset.len())))?
        }
        (None, None) => return Err(Error::Config("explain needs --ids or --dataset".into())),
    };
    let targets = targets_for(&model, &example)?;
    let seed = config.eval.seeds.first().copied().unwrap_or(0);
    let results = methods
        .iter()
        .map(|&m| attribute(&model, &example.ids, &targets, m, &mask, seed, config.eval.options))
        .collect::<Result<Vec<_>>>()?;
    for r in &results {
        let scores: Vec<String> = r.scores.iter().map(|s| format!("{s:.6}")).collect();
        println!("{}{}: {}", r.method, if r.degenerate { " (degenerate)" } else { "" }, scores.join(" "));
    }
    create_out(&config.out)?;
    let path = config.out.join("attributions.jsonl");
    write_jsonl(&path, &results)?;
    println!("wrote {}", path.display());
    write(
        config.out.join("heatmap.html"),
        &render::token_heatmap_html(model.config(), &results, None),
    )
}

fn cmd_eval(config: &RunConfig) -> Result<()> {
    let model = load_model(config)?;
    let dataset = load_dataset(config, &model)?;
    let mut eval = config.eval.clone();
    eval.methods = config.methods.clone().unwrap_or_else(|| Method::ALL.to_vec());
    let mask = load_mask(config, &model, &eval.methods)?;
    let report = run_benchmark(&model, &dataset, &mask, &eval)?;
    for m in &report.methods {
        let a = &m.aggregate;
        match (a.aopc, a.lodds, a.precision) {
            (Some(aopc), Some(lodds), _) => println!("{}: aopc {aopc:.4} lodds {lodds:.4}", m.method),
            (_, _, Some(p)) => println!("{}: precision@{} {p:.4}", m.method, eval.precision_k),
            _ => {}
        }
    }
    for path in report.write(&config.out)? {
        println!("wrote {}", path.display());
    }
    for m in &report.methods {
        check_degeneracy(m.degenerate, report.examples, m.method.name())?;
    }
    Ok(())
}

fn cmd_ablate(config: &RunConfig) -> Result<()> {
    let model = load_model(config)?;
    let dataset = load_dataset(config, &model)?;
    let mask = match &config.mask {
        Some(_) => load_mask(config, &model, &[Method::Ours])?,
        None => return Err(Error::Config("--mask is required for ablate".into())),
    };
    let sweep = corruption_sweep(&model, &dataset, &mask, &config.rho_grid, &config.eval)?;
    for p in &sweep.points {
        let a = &p.aggregate;
        let (v, s) = a
            .aopc
            .zip(a.aopc_std)
            .or(a.precision.zip(a.precision_std))
            .unwrap_or((0.0, 0.0));
        println!("rho {}: {v:.4} ± {s:.4}", p.rho);
    }
    let report = EvalReport {
        task: dataset.task,
        policy: config.eval.policy,
        k_grid: config.eval.k_grid.clone(),
        examples: dataset.len(),
        methods: Vec::new(),
        corruption: Some(sweep),
    };
    create_out(&config.out)?;
    let sweep = report.corruption.as_ref().expect("just set");
    write(config.out.join("ablation.json"), &report.to_json()?)?;
    write(config.out.join("corruption.csv"), &sweep.to_csv())?;
    write(config.out.join("corruption.svg"), &render::corruption_curve_svg(sweep))?;
    for p in &sweep.points {
        check_degeneracy(p.degenerate, report.examples, &format!("rho {}", p.rho))?;
    }
    Ok(())
}

fn cmd_toy(args: &ToyArgs) -> Result<()> {
    let out = config::output_dir(args.out.clone(), None);
    create_out(&out)?;
    let bundle = toy_bundle(args.sentences, args.examples, args.seed);
    let manifest = out.join("model.json");
    save_weights(&manifest, bundle.model.config(), bundle.model.weights(), DType::F64)?;
    println!("wrote {}", manifest.display());
    let corpus = out.join("corpus.jsonl");
    bundle.corpus.save(&corpus)?;
    println!("wrote {}", corpus.display());
    let dataset = out.join("dataset.jsonl");
    bundle.dataset.save(&dataset)?;
    println!("wrote {}", dataset.display());
    write(
        out.join("toy.conf"),
        "# paths are relative to this file\n\
         weights = model.json\n\
         corpus = corpus.jsonl\n\
         dataset = dataset.jsonl\n\
         mask = mask.json\n\
         out = .\n\
         k-grid = 10,20,30,40,50,60,70,80,90\n\
         rho-grid = 0,0.25,0.5,0.75,1\n\
         seed = 0,1,2,3,4\n",
    )
}
