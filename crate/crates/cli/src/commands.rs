use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use frugalnn::cbctree::{self, CbcTree};
use frugalnn::cluster::{kmeans, Clustering};
use frugalnn::data::{load_cost_schedule, load_dataset, split, CostSchedule, Dataset, Normalization, SplitSpec};
use frugalnn::dqn::{self, DqnModel, MODEL_VERSION};
use frugalnn::env::Environment;
use frugalnn::eval::{budget_sweep, SweepConfig, SweepInputs};
use frugalnn::provenance::{file_digest, write_sidecar};
use frugalnn_advisor::{AppState, ModelBundle, Policy};

use crate::config::{usage, RunConfig};

fn load_table(path: &Path) -> Result<Dataset> {
    load_dataset(path, true).with_context(|| format!("loading {}", path.display()))
}

fn load_schedule(cfg: &RunConfig, n_features: usize) -> Result<CostSchedule> {
    load_cost_schedule(cfg.costs.as_deref(), n_features).context("loading cost schedule")
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(frugalnn::Error::from)
        .with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Records the configuration next to an output that has just been written.
fn stamp(path: &Path, cfg: &RunConfig) -> Result<()> {
    write_sidecar(path, cfg).with_context(|| format!("writing provenance for {}", path.display()))?;
    Ok(())
}

fn load_clustering(cfg: &RunConfig, train: &Dataset) -> Result<Clustering> {
    let path = cfg.require(&cfg.clustering, "clustering")?;
    let clustering = Clustering::load(path).with_context(|| format!("loading {}", path.display()))?;
    if clustering.n_features() != train.n_features() {
        bail!(frugalnn::Error::Format(format!(
            "clustering has {} features, training data {}",
            clustering.n_features(),
            train.n_features()
        )));
    }
    Ok(clustering)
}

pub fn prepare(cfg: &RunConfig) -> Result<()> {
    let data = cfg.require(&cfg.data, "data")?;
    let out = cfg.require(&cfg.out, "out")?;
    let raw = load_dataset(data, cfg.header).with_context(|| format!("loading {}", data.display()))?;
    let parts = split(&raw, &SplitSpec { train_fraction: cfg.train_fraction, seed: cfg.seed }, cfg.norm_mode)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let (train, test, stats) = (out.join("train.csv"), out.join("test.csv"), out.join("normalization.json"));
    parts.train.write_csv(&train)?;
    parts.test.write_csv(&test)?;
    write_json(&stats, &parts.normalization)?;
    for path in [&train, &test, &stats] {
        stamp(path, cfg)?;
    }
    println!("train: {} rows, test: {} rows, written to {}", parts.train.n_rows(), parts.test.n_rows(), out.display());
    Ok(())
}

pub fn cluster(cfg: &RunConfig) -> Result<()> {
    let train = load_table(cfg.require(&cfg.train, "train")?)?;
    let out = cfg.require(&cfg.out, "out")?;
    let clustering = kmeans(&train, cfg.clusters, cfg.seed)?;
    clustering.save(out)?;
    stamp(out, cfg)?;
    println!("{} clusters after {} iterations, written to {}", clustering.k(), clustering.iterations(), out.display());
    Ok(())
}

pub fn build_tree(cfg: &RunConfig) -> Result<()> {
    let train = load_table(cfg.require(&cfg.train, "train")?)?;
    let out = cfg.require(&cfg.out, "out")?;
    let schedule = load_schedule(cfg, train.n_features())?;
    let tree = cbctree::build(&train, &schedule, cfg.tree.clone())?;
    tree.save(out)?;
    stamp(out, cfg)?;
    println!("{} nodes, {} leaves, depth {}", tree.nodes().len(), tree.leaves().len(), tree.depth());
    Ok(())
}

pub fn train_dqn(cfg: &RunConfig) -> Result<()> {
    let train = load_table(cfg.require(&cfg.train, "train")?)?;
    let out = cfg.require(&cfg.out, "out")?;
    let budget = cfg.budget.ok_or_else(|| usage("`train-dqn` needs --budget"))?;
    let clustering = load_clustering(cfg, &train)?;
    let schedule = load_schedule(cfg, train.n_features())?;
    let normalization = cfg.normalization.as_deref().map(load_json::<Normalization>).transpose()?;
    let env = Environment::new(&train, &clustering, &schedule, cfg.alpha)?;

    let outcome = dqn::train(&env, budget, &cfg.hyper)?;
    let model = DqnModel {
        version: MODEL_VERSION,
        hyper: cfg.hyper.clone(),
        budget,
        alpha: cfg.alpha,
        network: outcome.network,
        normalization,
        clustering_digest: Some(file_digest(cfg.require(&cfg.clustering, "clustering")?)?),
    };
    model.save(out)?;
    stamp(out, cfg)?;
    if let Some(trace) = &cfg.trace {
        dqn::write_trace_csv(&outcome.trace, trace)?;
        stamp(trace, cfg)?;
    }
    let last = outcome.trace.last().map_or(f64::NAN, |r| r.avg_reward);
    println!(
        "{} episodes, {} updates, final epsilon {:.4}, last average return {last:.4}",
        cfg.hyper.episodes, outcome.train_steps, outcome.final_epsilon
    );
    Ok(())
}

pub fn sweep(cfg: &RunConfig) -> Result<()> {
    let train = load_table(cfg.require(&cfg.train, "train")?)?;
    let test = load_table(cfg.require(&cfg.test, "test")?)?;
    let out = cfg.require(&cfg.out, "out")?;
    let clustering = load_clustering(cfg, &train)?;
    let schedule = load_schedule(cfg, train.n_features())?;
    let tree = cfg
        .tree_file
        .as_deref()
        .map(|p| CbcTree::load(p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    let config = SweepConfig {
        agents: cfg.agents.clone(),
        budgets: cfg.budgets.clone(),
        seeds: cfg.seeds.clone(),
        k: cfg.neighbors,
        alpha: cfg.alpha,
        hyper: cfg.hyper.clone(),
        tree: cfg.tree.clone(),
        jobs: cfg.jobs,
        trace_points: cfg.trace.is_some(),
    };
    let inputs = SweepInputs { train: &train, test: &test, clustering: &clustering, schedule: &schedule, tree: tree.as_ref() };
    let report = budget_sweep(inputs, &config)?;
    report.write_csv(out)?;
    stamp(out, cfg)?;
    if let Some(trace) = &cfg.trace {
        report.write_points_csv(trace)?;
        stamp(trace, cfg)?;
    }
    let shortfalls: usize = report.rows.iter().map(|r| r.shortfalls).sum();
    if shortfalls > 0 {
        tracing::warn!(shortfalls, "predicted clusters smaller than k; fewer neighbours were retrieved");
    }
    println!("{} rows written to {}", report.rows.len(), out.display());
    Ok(())
}

pub fn print_tree(cfg: &RunConfig) -> Result<()> {
    let path = cfg.require(&cfg.tree_file, "tree")?;
    let tree = CbcTree::load(path).with_context(|| format!("loading {}", path.display()))?;
    let names = cfg.train.as_deref().map(load_table).transpose()?.map(|t| t.feature_names().to_vec());
    print!("{}", tree.render(names.as_deref()));
    Ok(())
}

pub fn serve(cfg: &RunConfig, addr: SocketAddr, ui_dir: Option<PathBuf>, ttl: Duration) -> Result<()> {
    let train = load_table(cfg.require(&cfg.train, "train")?)?;
    let clustering = load_clustering(cfg, &train)?;
    let schedule = load_schedule(cfg, train.n_features())?;
    let mut normalization = cfg.normalization.as_deref().map(load_json::<Normalization>).transpose()?;

    let mut models = HashMap::new();
    let bundle = |policy, normalization: Option<Normalization>| ModelBundle {
        policy,
        train: train.clone(),
        normalization,
        clustering: clustering.clone(),
        schedule: schedule.clone(),
        k: cfg.neighbors,
    };
    if let Some(path) = &cfg.dqn {
        let model = DqnModel::load(path).with_context(|| format!("loading {}", path.display()))?;
        if normalization.is_none() {
            normalization = model.normalization.clone();
        }
        models.insert("dqn".to_owned(), bundle(Policy::Dqn(model.network), normalization.clone()));
    }
    if let Some(path) = &cfg.tree_file {
        let tree = CbcTree::load(path).with_context(|| format!("loading {}", path.display()))?;
        models.insert("cbctree".to_owned(), bundle(Policy::Tree(tree), normalization.clone()));
    }
    if models.is_empty() {
        return Err(usage("`serve` needs --tree and/or --dqn"));
    }
    let state = AppState::new(models, ttl);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        tokio::select! {
            r = frugalnn_advisor::serve(addr, state, ui_dir) => r,
            _ = tokio::signal::ctrl_c() => Ok(()),
        }
    })?;
    Ok(())
}
