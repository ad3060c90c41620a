//! Agents, k-nearest retrieval and budget sweeps.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cbctree::{self, CbcTree, TreeParams};
use crate::cluster::{full_distance, partial_distance, Clustering};
use crate::data::{CostSchedule, Dataset};
use crate::dqn::{self, DqnHyper, QNetwork, TraceRow};
use crate::env::{Action, EnvState, Environment};
use crate::{Error, FeatureSet, Result};

pub const DEFAULT_NEIGHBORS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Random,
    Dqn,
    #[serde(rename = "cbctree")]
    Tree,
}

impl AgentKind {
    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Random => "random",
            AgentKind::Dqn => "dqn",
            AgentKind::Tree => "cbctree",
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "random" => Ok(AgentKind::Random),
            "dqn" => Ok(AgentKind::Dqn),
            "cbctree" | "tree" => Ok(AgentKind::Tree),
            other => Err(Error::InvalidArgument(format!("unknown agent {other:?}"))),
        }
    }
}

/// A policy that can be rolled through the environment.
#[derive(Debug, Clone, Copy)]
pub enum Agent<'m> {
    /// Uniform over every available action, Terminate included.
    Random,
    Dqn(&'m QNetwork),
    /// The tree reads the episode point's values for features it already knows.
    Tree { tree: &'m CbcTree, train: &'m Dataset },
}

impl Agent<'_> {
    pub fn kind(&self) -> AgentKind {
        match self {
            Agent::Random => AgentKind::Random,
            Agent::Dqn(_) => AgentKind::Dqn,
            Agent::Tree { .. } => AgentKind::Tree,
        }
    }

    pub fn choose(&self, env: &Environment<'_>, state: &EnvState, rng: &mut impl Rng) -> Action {
        let mask = env.mask(state);
        match self {
            Agent::Random => {
                let allowed: Vec<usize> = (0..mask.len()).filter(|&a| mask[a]).collect();
                Action::from_index(allowed[rng.gen_range(0..allowed.len())], env.n_features())
            }
            Agent::Dqn(net) => dqn::greedy_action(net, env, state),
            Agent::Tree { tree, train } => {
                let action = tree.suggest(
                    train,
                    env.point(state),
                    &state.revealed,
                    env.schedule().costs(),
                    state.remaining_budget(),
                );
                if mask[action.index(env.n_features())] {
                    action
                } else {
                    Action::Terminate
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub revealed: FeatureSet,
    pub cost: f64,
    pub score: f64,
    pub total_reward: f64,
    pub steps: usize,
}

/// Rolls `agent` from the empty state of point `p_index` until the episode ends.
pub fn run_episode(
    agent: &Agent<'_>,
    env: &Environment<'_>,
    p_index: usize,
    budget: f64,
    rng: &mut impl Rng,
) -> Result<Episode> {
    let mut state = env.reset(p_index, budget)?;
    let mut total_reward = 0.0;
    let mut steps = 0;
    while !state.done {
        let action = agent.choose(env, &state, rng);
        let result = env.step(&state, action)?;
        total_reward += result.reward;
        steps += 1;
        state = result.next_state;
    }
    Ok(Episode {
        score: env.score(&state),
        cost: state.accrued_cost,
        revealed: state.revealed,
        total_reward,
        steps,
    })
}

/// The `k` training rows closest to `p` over the revealed features, ties by
/// index. With a restriction only those rows are considered, and all of them
/// are returned when there are fewer than `k`.
pub fn knn_retrieve(train: &Dataset, p: &[f64], revealed: &FeatureSet, k: usize, restriction: Option<&[usize]>) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = match restriction {
        Some(rows) => rows.iter().map(|&i| (partial_distance(p, train.row(i), revealed), i)).collect(),
        None => (0..train.n_rows()).map(|i| (partial_distance(p, train.row(i), revealed), i)).collect(),
    };
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, i)| i).collect()
}

pub fn true_distance_sum(train: &Dataset, p: &[f64], retrieved: &[usize]) -> f64 {
    retrieved.iter().map(|&i| full_distance(p, train.row(i))).sum()
}

/// Mean over `test` of the exact k-NN distance sum, the floor of every sweep curve.
pub fn full_reveal_floor(train: &Dataset, test: &Dataset, k: usize) -> f64 {
    let all = FeatureSet::full(train.n_features());
    let total: f64 = test
        .rows()
        .map(|p| true_distance_sum(train, p, &knn_retrieve(train, p, &all, k, None)))
        .sum();
    total / test.n_rows() as f64
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut order: Vec<usize> = (0..x.len()).collect();
        order.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let mut out = vec![0.0; x.len()];
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &o in &order[i..=j] {
                out[o] = avg;
            }
            i = j + 1;
        }
        out
    }
    assert_eq!(a.len(), b.len(), "series must have equal length");
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub agents: Vec<AgentKind>,
    pub budgets: Vec<f64>,
    pub seeds: Vec<u64>,
    pub k: usize,
    pub alpha: f64,
    pub hyper: DqnHyper,
    pub tree: TreeParams,
    /// Worker threads; 0 means one per core.
    pub jobs: usize,
    /// Keep one record per test point.
    pub trace_points: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            agents: vec![AgentKind::Random, AgentKind::Dqn, AgentKind::Tree],
            budgets: (1..=10).map(|i| i as f64 / 10.0).collect(),
            seeds: vec![0],
            k: DEFAULT_NEIGHBORS,
            alpha: 1.0,
            hyper: DqnHyper::default(),
            tree: TreeParams::default(),
            jobs: 1,
            trace_points: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SweepInputs<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub clustering: &'a Clustering,
    pub schedule: &'a CostSchedule,
    /// Reused instead of building a tree from `train`.
    pub tree: Option<&'a CbcTree>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub agent: AgentKind,
    pub budget: f64,
    pub seed: u64,
    pub mean_sum_true_distance: f64,
    pub mean_score: f64,
    pub mean_cost: f64,
    pub n_test: usize,
    /// Test points whose predicted cluster held fewer than `k` rows.
    pub shortfalls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub point_id: usize,
    pub agent: AgentKind,
    pub budget: f64,
    pub seed: u64,
    pub revealed_bitmask: String,
    pub cost: f64,
    pub score: f64,
    pub sum_true_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DqnTrace {
    pub seed: u64,
    pub budget: f64,
    pub rows: Vec<TraceRow>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub points: Vec<PointRecord>,
    pub dqn_traces: Vec<DqnTrace>,
    pub full_reveal_floor: f64,
}

impl SweepReport {
    pub fn row(&self, agent: AgentKind, budget: f64, seed: u64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.agent == agent && r.budget == budget && r.seed == seed)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("agent,budget,seed,mean_sum_true_distance,mean_score,mean_cost,n_test\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.agent, r.budget, r.seed, r.mean_sum_true_distance, r.mean_score, r.mean_cost, r.n_test
            ));
        }
        out
    }

    pub fn points_csv(&self) -> String {
        let mut out = String::from("point_id,agent,budget,seed,revealed_bitmask,cost,score,sum_true_distance\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                p.point_id, p.agent, p.budget, p.seed, p.revealed_bitmask, p.cost, p.score, p.sum_true_distance
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn write_points_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.points_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Seed for the cell at (`seed`, `budget_index`); distinct budgets draw
/// independent streams.
pub fn cell_seed(seed: u64, budget_index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (budget_index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

struct CellResult {
    rows: Vec<SweepRow>,
    points: Vec<PointRecord>,
    trace: Option<DqnTrace>,
}

fn evaluate(
    agent: &Agent<'_>,
    env: &Environment<'_>,
    train: &Dataset,
    budget: f64,
    seed: u64,
    rng: &mut ChaCha8Rng,
    config: &SweepConfig,
) -> Result<(SweepRow, Vec<PointRecord>)> {
    let n_test = env.n_points();
    let (mut dist, mut score, mut cost, mut shortfalls) = (0.0, 0.0, 0.0, 0);
    let mut points = Vec::new();
    for i in 0..n_test {
        let episode = run_episode(agent, env, i, budget, rng)?;
        let p = env.points().row(i);
        let retrieved = match agent {
            Agent::Tree { tree, train } => {
                let cluster = tree.predict_cluster(train, p, &episode.revealed);
                shortfalls += usize::from(cluster.points.len() < config.k);
                knn_retrieve(train, p, &episode.revealed, config.k, Some(&cluster.points))
            }
            _ => knn_retrieve(train, p, &episode.revealed, config.k, None),
        };
        let d = true_distance_sum(train, p, &retrieved);
        dist += d;
        score += episode.score;
        cost += episode.cost;
        if config.trace_points {
            points.push(PointRecord {
                point_id: i,
                agent: agent.kind(),
                budget,
                seed,
                revealed_bitmask: episode.revealed.to_bit_string(),
                cost: episode.cost,
                score: episode.score,
                sum_true_distance: d,
            });
        }
    }
    let n = n_test as f64;
    let row = SweepRow {
        agent: agent.kind(),
        budget,
        seed,
        mean_sum_true_distance: dist / n,
        mean_score: score / n,
        mean_cost: cost / n,
        n_test,
        shortfalls,
    };
    Ok((row, points))
}

/// Evaluates every requested agent at every (seed, budget) on the test set.
/// The DQN is retrained for each cell on the training set; the tree is built
/// once. Rows come back ordered by seed, then budget, then agent, regardless
/// of how many worker threads ran them.
pub fn budget_sweep(inputs: SweepInputs<'_>, config: &SweepConfig) -> Result<SweepReport> {
    if config.budgets.iter().any(|&b| !(b > 0.0) || !b.is_finite()) {
        return Err(Error::InvalidArgument("budgets must be positive".into()));
    }
    if config.k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if inputs.test.is_empty() || inputs.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let train_env = Environment::new(inputs.train, inputs.clustering, inputs.schedule, config.alpha)?;
    let test_env = Environment::new(inputs.test, inputs.clustering, inputs.schedule, config.alpha)?;
    let built;
    let tree = match (inputs.tree, config.agents.contains(&AgentKind::Tree)) {
        (Some(t), _) => Some(t),
        (None, true) => {
            built = cbctree::build(inputs.train, inputs.schedule, config.tree.clone())?;
            Some(&built)
        }
        (None, false) => None,
    };

    let mut agents = config.agents.clone();
    agents.sort();
    agents.dedup();
    let cells: Vec<(u64, usize)> = config
        .seeds
        .iter()
        .flat_map(|&s| (0..config.budgets.len()).map(move |b| (s, b)))
        .collect();

    let run_cell = |&(seed, b): &(u64, usize)| -> Result<CellResult> {
        let budget = config.budgets[b];
        let cell = cell_seed(seed, b);
        let mut out = CellResult { rows: Vec::new(), points: Vec::new(), trace: None };
        for &kind in &agents {
            let mut rng = ChaCha8Rng::seed_from_u64(cell);
            let trained;
            let agent = match kind {
                AgentKind::Random => Agent::Random,
                AgentKind::Dqn => {
                    let hyper = DqnHyper { seed: cell, ..config.hyper.clone() };
                    let outcome = dqn::train(&train_env, budget, &hyper)?;
                    out.trace = Some(DqnTrace { seed, budget, rows: outcome.trace });
                    trained = outcome.network;
                    Agent::Dqn(&trained)
                }
                AgentKind::Tree => Agent::Tree { tree: tree.expect("tree built when requested"), train: inputs.train },
            };
            let (row, points) = evaluate(&agent, &test_env, inputs.train, budget, seed, &mut rng, config)?;
            out.rows.push(row);
            out.points.extend(points);
        }
        Ok(out)
    };

    let results: Vec<Result<CellResult>> = if config.jobs == 1 {
        cells.iter().map(run_cell).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        pool.install(|| cells.par_iter().map(run_cell).collect())
    };

    let mut report = SweepReport { full_reveal_floor: full_reveal_floor(inputs.train, inputs.test, config.k), ..SweepReport::default() };
    for result in results {
        let cell = result?;
        report.rows.extend(cell.rows);
        report.points.extend(cell.points);
        report.dqn_traces.extend(cell.trace);
    }
    Ok(report)
}
