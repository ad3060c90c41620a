//! Run configuration: command-line flags over a JSON file over defaults.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use frugalnn::cbctree::TreeParams;
use frugalnn::data::NormMode;
use frugalnn::dqn::{DqnHyper, OptimizerKind};
use frugalnn::eval::{AgentKind, DEFAULT_NEIGHBORS};
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "FRUGALNN_SEED";

/// A problem with how the tool was invoked rather than with the data.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn parse_norm_mode(s: &str) -> Result<NormMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned()))
        .map_err(|_| format!("unknown normalization {s:?} (expected min-max or mean-range)"))
}

fn parse_agent(s: &str) -> Result<AgentKind, String> {
    s.parse().map_err(|e: frugalnn::Error| e.to_string())
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    match s {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::Adam),
        _ => Err(format!("unknown optimizer {s:?} (expected sgd or adam)")),
    }
}

/// Every tunable, as flags and as the keys of the `--config` file.
/// Unset flags fall back to the file, then to built-in defaults.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    /// Raw dataset CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// The raw CSV has no header line.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub no_header: Option<bool>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// min-max or mean-range.
    #[arg(long, value_parser = parse_norm_mode)]
    pub norm_mode: Option<NormMode>,

    /// Normalized training CSV written by `prepare`.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Normalized test CSV written by `prepare`.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Normalization statistics written by `prepare`.
    #[arg(long)]
    pub normalization: Option<PathBuf>,
    #[arg(long)]
    pub clustering: Option<PathBuf>,
    #[arg(long)]
    pub tree: Option<PathBuf>,
    /// Trained DQN model file.
    #[arg(long)]
    pub dqn: Option<PathBuf>,
    /// JSON cost schedule: {"costs": [...], "groups": [[...], ...]}; uniform when absent.
    #[arg(long)]
    pub costs: Option<PathBuf>,

    /// Number of k-means clusters.
    #[arg(long)]
    pub clusters: Option<usize>,
    /// Neighbours retrieved per query.
    #[arg(long)]
    pub neighbors: Option<usize>,
    #[arg(long)]
    pub budget: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub budgets: Option<Vec<f64>>,
    /// Weight of acquisition cost against ranking error.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Tree nodes with at most this many points become leaves.
    #[arg(long)]
    pub tau: Option<usize>,
    /// Candidate thresholds per feature and node.
    #[arg(long)]
    pub ell: Option<usize>,
    /// Skip features already split on along the path instead of making them free.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub exclude_used_features: Option<bool>,

    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub eps0: Option<f64>,
    #[arg(long)]
    pub eps_decay: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub buffer_capacity: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub sync_interval: Option<usize>,
    /// sgd or adam.
    #[arg(long, value_parser = parse_optimizer)]
    pub optimizer: Option<OptimizerKind>,

    /// random, dqn and/or cbctree.
    #[arg(long, value_delimiter = ',', value_parser = parse_agent)]
    pub agents: Option<Vec<AgentKind>>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Falls back to the config file, then $FRUGALNN_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for `sweep`.
    #[arg(long)]
    pub jobs: Option<usize>,

    /// Output file or directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// DQN reward trace CSV (train-dqn) or per-point CSV (sweep).
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

macro_rules! overlay {
    ($flags:ident, $file:ident, $($field:ident),* $(,)?) => {
        Settings { $($field: $flags.$field.or($file.$field)),* }
    };
}

impl Settings {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
    }

    /// Flags win over the file.
    pub fn over(self, file: Settings) -> Settings {
        let flags = self;
        overlay!(
            flags, file, data, no_header, train_fraction, norm_mode, train, test, normalization, clustering, tree, dqn,
            costs, clusters, neighbors, budget, budgets, alpha, tau, ell, exclude_used_features, episodes, lr, gamma,
            eps0, eps_decay, hidden, buffer_capacity, batch_size, sync_interval, optimizer, agents, seeds, seed, jobs,
            out, trace,
        )
    }

    pub fn resolve(self, command: &str) -> anyhow::Result<RunConfig> {
        let seed = match self.seed {
            Some(s) => s,
            None => match std::env::var(SEED_ENV) {
                Ok(v) => v.trim().parse().map_err(|_| usage(format!("{SEED_ENV}={v:?} is not an integer")))?,
                Err(_) => 0,
            },
        };
        let hd = DqnHyper::default();
        let td = TreeParams::default();
        let hyper = DqnHyper {
            episodes: self.episodes.unwrap_or(hd.episodes),
            lr: self.lr.unwrap_or(hd.lr),
            gamma: self.gamma.unwrap_or(hd.gamma),
            eps0: self.eps0.unwrap_or(hd.eps0),
            eps_decay: self.eps_decay.unwrap_or(hd.eps_decay),
            hidden: self.hidden.unwrap_or(hd.hidden),
            buffer_capacity: self.buffer_capacity.unwrap_or(hd.buffer_capacity),
            batch_size: self.batch_size.unwrap_or(hd.batch_size),
            sync_interval: self.sync_interval.unwrap_or(hd.sync_interval),
            optimizer: self.optimizer.unwrap_or(hd.optimizer),
            seed,
        };
        hyper.validate().map_err(|e| usage(e.to_string()))?;
        let tree = TreeParams {
            tau: self.tau.unwrap_or(td.tau),
            alpha: self.alpha.unwrap_or(td.alpha),
            ell: self.ell.unwrap_or(td.ell),
            exclude_used_features: self.exclude_used_features.unwrap_or(td.exclude_used_features),
        };
        tree.validate().map_err(|e| usage(e.to_string()))?;
        Ok(RunConfig {
            command: command.to_owned(),
            data: self.data,
            header: !self.no_header.unwrap_or(false),
            train_fraction: self.train_fraction.unwrap_or(0.8),
            norm_mode: self.norm_mode.unwrap_or_default(),
            train: self.train,
            test: self.test,
            normalization: self.normalization,
            clustering: self.clustering,
            tree_file: self.tree,
            dqn: self.dqn,
            costs: self.costs,
            clusters: self.clusters.unwrap_or(frugalnn::cluster::DEFAULT_K),
            neighbors: self.neighbors.unwrap_or(DEFAULT_NEIGHBORS),
            budget: self.budget,
            budgets: self.budgets.unwrap_or_else(|| (1..=10).map(|i| i as f64 / 10.0).collect()),
            alpha: tree.alpha,
            tree,
            hyper,
            agents: self.agents.unwrap_or_else(|| vec![AgentKind::Random, AgentKind::Dqn, AgentKind::Tree]),
            seeds: self.seeds.unwrap_or_else(|| vec![seed]),
            seed,
            jobs: self.jobs.unwrap_or(1),
            out: self.out,
            trace: self.trace,
        })
    }
}

/// Fully resolved configuration; serialized next to every output.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub data: Option<PathBuf>,
    pub header: bool,
    pub train_fraction: f64,
    pub norm_mode: NormMode,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub normalization: Option<PathBuf>,
    pub clustering: Option<PathBuf>,
    pub tree_file: Option<PathBuf>,
    pub dqn: Option<PathBuf>,
    pub costs: Option<PathBuf>,
    pub clusters: usize,
    pub neighbors: usize,
    pub budget: Option<f64>,
    pub budgets: Vec<f64>,
    pub alpha: f64,
    pub tree: TreeParams,
    pub hyper: DqnHyper,
    pub agents: Vec<AgentKind>,
    pub seeds: Vec<u64>,
    pub seed: u64,
    pub jobs: usize,
    pub out: Option<PathBuf>,
    pub trace: Option<PathBuf>,
}

impl RunConfig {
    pub fn require<'a>(&self, value: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a Path> {
        value.as_deref().ok_or_else(|| usage(format!("`{}` needs --{flag}", self.command)))
    }
}
