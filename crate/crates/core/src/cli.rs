//! Command-line front end: config handling, subcommands and artifacts.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::diagnostics::run_gradcheck;
use crate::graph::{
    generate_chain_task, generate_sbm, load_graph_json, random_split, Graph, SbmParams, SplitRatios,
};
use crate::search::{
    evaluate_splits, grid_search_hidden, retrain_genotype, Genotype, RetrainConfig, SearchConfig,
    StandaloneNet,
};
use crate::tensor::checkpoint;

pub const THREADS_ENV: &str = "GNASFORGE_THREADS";

/// On-disk run configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Graph JSON; relative paths are taken from the config file's directory.
    pub data: Option<PathBuf>,
    /// Used when the graph file carries no masks.
    pub split: SplitRatios,
    pub split_seed: u64,
    pub search: SearchConfig,
    pub retrain: RetrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        if let Some(d) = &cfg.data {
            if d.is_relative() {
                cfg.data = Some(path.parent().unwrap_or(Path::new(".")).join(d));
            }
        }
        Ok(cfg)
    }

    /// Fills defaults that depend on other fields.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        if self.search.schedule.e_m.is_none() {
            self.search.schedule.e_m = Some(self.search.max_iter);
        }
        self.search.validate().map_err(CliError::config)?;
        self.retrain.validate().map_err(CliError::config)?;
        Ok(self)
    }
}

/// A failure with its exit code: 2 for configuration problems, 1 otherwise.
#[derive(Debug)]
pub enum CliError {
    Config(anyhow::Error),
    Run(anyhow::Error),
}

impl CliError {
    pub fn config(e: impl fmt::Display) -> Self {
        Self::Config(anyhow::anyhow!("{e}"))
    }

    pub fn exit_code(&self) -> ExitCode {
        match self {
            Self::Config(_) => ExitCode::from(2),
            Self::Run(_) => ExitCode::from(1),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(e) => write!(f, "configuration error: {e:#}"),
            Self::Run(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<crate::Error>() {
            Some(crate::Error::Config(_)) => Self::Config(e),
            _ => Self::Run(e),
        }
    }
}

impl From<crate::Error> for CliError {
    fn from(e: crate::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "gnasforge",
    version,
    about = "Architecture search for graph neural networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DataKind {
    Sbm,
    Chain,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Search an architecture and write genotype, logs and a checkpoint.
    Search {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's dataset.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train a genotype from scratch and report its metrics.
    Retrain {
        #[arg(long)]
        genotype: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Initialization seed; defaults to the genotype's.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print train/val/test metrics of a retrained checkpoint.
    Eval {
        #[arg(long)]
        genotype: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write a synthetic graph.
    GenData {
        #[arg(long, value_enum)]
        kind: DataKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 50)]
        per_class: usize,
        #[arg(long, default_value_t = 0.3)]
        p_in: f64,
        #[arg(long, default_value_t = 0.02)]
        p_out: f64,
        /// Defaults to the class count.
        #[arg(long)]
        feature_dim: Option<usize>,
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        #[arg(long, default_value_t = 200)]
        length: usize,
        #[arg(long, default_value_t = 2)]
        blocks_needed: usize,
        /// Leave the graph without train/val/test masks.
        #[arg(long)]
        no_split: bool,
    },
    /// Compare analytic gradients against central differences.
    Gradcheck {
        #[arg(default_value = "all")]
        target: String,
    },
}

fn threads() -> Result<usize, CliError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
            CliError::config(format!("{THREADS_ENV}={v} is not a positive integer"))
        }),
        Err(_) => Ok(1),
    }
}

/// Loads a graph, splitting it when the file has no masks.
pub fn load_data(path: &Path, cfg: &RunConfig) -> Result<Graph, CliError> {
    if !path.is_file() {
        return Err(CliError::config(format!(
            "dataset file {} not found",
            path.display()
        )));
    }
    let graph = load_graph_json(path).with_context(|| format!("loading {}", path.display()))?;
    if graph.masks().is_empty() {
        Ok(random_split(graph, cfg.split, cfg.split_seed)?)
    } else {
        Ok(graph)
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn optional_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)?
        .resolve()
}

fn cmd_search(
    config: &Path,
    seed: Option<u64>,
    out: &Path,
    data: Option<&Path>,
) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.search.seed = s;
    }
    if let Some(d) = data {
        cfg.data = Some(d.to_path_buf());
    }
    let cfg = cfg.resolve()?;
    let data = cfg
        .data
        .clone()
        .ok_or_else(|| CliError::config("no dataset: set `data` in the config or pass --data"))?;
    let graph = load_data(&data, &cfg)?;
    let threads = threads()?;
    create_dir(out)?;
    write(
        &out.join("resolved_config.json"),
        &(serde_json::to_string_pretty(&cfg).context("config")? + "\n"),
    )?;

    log::info!(
        "searching {} hidden sizes on {} nodes",
        cfg.search.hidden_grid.len(),
        graph.num_nodes()
    );
    let result = grid_search_hidden(&cfg.search, &graph, threads)?;
    let best = result.best();
    log::info!(
        "best hidden size {} (val metric {:.4})",
        best.hidden,
        best.val_metric()
    );
    write(
        &out.join("genotype.json"),
        &(best.genotype.to_json()? + "\n"),
    )?;
    write(&out.join("metrics.jsonl"), &result.merged_log().to_jsonl()?)?;
    checkpoint::save(&out.join("checkpoint"), &best.store, &best.optimizer_steps)?;
    println!("{}", best.genotype.to_json()?);
    Ok(())
}

fn cmd_retrain(
    genotype: &Path,
    data: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = optional_config(config)?;
    let genotype = Genotype::load(genotype)?;
    let graph = load_data(data, &cfg)?;
    let seed = seed.unwrap_or(genotype.seed);
    let (model, report) = retrain_genotype(
        &genotype,
        &graph,
        &cfg.retrain,
        &cfg.search.frozen_blocks,
        seed,
    )?;
    create_dir(out)?;
    let text = serde_json::to_string_pretty(&report).context("report")?;
    write(&out.join("retrain_report.json"), &(text.clone() + "\n"))?;
    let steps = [("w".to_string(), model.optimizer_steps)]
        .into_iter()
        .collect();
    checkpoint::save(&out.join("checkpoint"), &model.store, &steps)?;
    println!("{text}");
    Ok(())
}

fn cmd_eval(
    genotype: &Path,
    data: &Path,
    ckpt: &Path,
    config: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = optional_config(config)?;
    let genotype = Genotype::load(genotype)?;
    let graph = load_data(data, &cfg)?;
    let net = StandaloneNet::from_genotype(&genotype, graph.spec())?;
    let (store, _) = checkpoint::load::<f64>(ckpt)?;
    let m = evaluate_splits(&net, &store, &graph)?;
    let v = serde_json::json!({ "train": m.train, "val": m.val, "test": m.test });
    println!("{v}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen_data(
    kind: DataKind,
    out: &Path,
    seed: u64,
    classes: usize,
    per_class: usize,
    p_in: f64,
    p_out: f64,
    feature_dim: Option<usize>,
    noise: f64,
    length: usize,
    blocks_needed: usize,
    no_split: bool,
) -> Result<(), CliError> {
    let (graph, _) = match kind {
        DataKind::Sbm => generate_sbm(&SbmParams {
            num_classes: classes,
            nodes_per_class: per_class,
            p_in,
            p_out,
            feature_dim: feature_dim.unwrap_or(classes),
            feature_noise: noise,
            seed,
        }),
        DataKind::Chain => generate_chain_task(length, blocks_needed, seed),
    }
    .map_err(CliError::config)?;
    let graph = if no_split {
        graph
    } else {
        random_split(graph, SplitRatios::default(), seed)?
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    graph.save(out)?;
    log::info!("wrote {} nodes to {}", graph.num_nodes(), out.display());
    Ok(())
}

fn cmd_gradcheck(target: &str) -> Result<(), CliError> {
    let records = run_gradcheck(target)?;
    let mut failed = 0;
    for r in &records {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<28} {:.3e} {status}", r.name, r.max_rel_error);
        failed += usize::from(!r.passed());
    }
    println!("{} checks, {failed} failed", records.len());
    if failed > 0 {
        return Err(CliError::Run(anyhow::anyhow!(
            "{failed} gradient checks above tolerance"
        )));
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Search {
            config,
            seed,
            out,
            data,
        } => cmd_search(&config, seed, &out, data.as_deref()),
        Command::Retrain {
            genotype,
            data,
            config,
            seed,
            out,
        } => cmd_retrain(&genotype, &data, config.as_deref(), seed, &out),
        Command::Eval {
            genotype,
            data,
            checkpoint,
            config,
        } => cmd_eval(&genotype, &data, &checkpoint, config.as_deref()),
        Command::GenData {
            kind,
            out,
            seed,
            classes,
            per_class,
            p_in,
            p_out,
            feature_dim,
            noise,
            length,
            blocks_needed,
            no_split,
        } => cmd_gen_data(
            kind,
            &out,
            seed,
            classes,
            per_class,
            p_in,
            p_out,
            feature_dim,
            noise,
            length,
            blocks_needed,
            no_split,
        ),
        Command::Gradcheck { target } => cmd_gradcheck(&target),
    }
}
