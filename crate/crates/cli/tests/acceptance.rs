//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use frugalnn::cbctree::{self, CbcTree, Node, NodeKind, TreeParams};
use frugalnn::cluster::{kmeans, Clustering};
use frugalnn::data::{split, CostSchedule, Dataset, NormMode, SplitSpec};
use frugalnn::dqn::{self, DqnHyper, QNetwork};
use frugalnn::env::{Action, Environment};
use frugalnn::eval::{budget_sweep, spearman, AgentKind, SweepConfig, SweepInputs};
use frugalnn::synthetic::{gaussian_clusters, stacked_blobs, GaussianSpec};
use frugalnn::FeatureSet;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Problem {
    train: Dataset,
    test: Dataset,
    clustering: Clustering,
    schedule: CostSchedule,
}

/// The 8-feature synthetic set: 4 informative features, 5 clusters, 4 noise features.
fn synthetic_problem(seed: u64) -> Problem {
    let data = gaussian_clusters(&GaussianSpec { seed, ..GaussianSpec::default() }).unwrap().data;
    let parts = split(&data, &SplitSpec { train_fraction: 0.8, seed }, NormMode::MinMax).unwrap();
    let clustering = kmeans(&parts.train, 5, seed).unwrap();
    Problem { train: parts.train, test: parts.test, clustering, schedule: CostSchedule::uniform(8) }
}

fn criterion_1() -> Outcome {
    let p = synthetic_problem(11);
    let grouped = CostSchedule::new(vec![0.05, 0.1, 0.2, 0.05, 0.3, 0.15, 0.1, 0.05], vec![vec![1, 5], vec![2, 6, 7]]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for episode in 0..10_000 {
        let schedule = if episode % 2 == 0 { &p.schedule } else { &grouped };
        let alpha = [0.0, 0.5, 1.0, 2.0][episode % 4];
        let env = Environment::new(&p.train, &p.clustering, schedule, alpha).unwrap();
        let budget = rng.gen_range(0.01..1.2);
        let mut state = env.reset(rng.gen_range(0..env.n_points()), budget).unwrap();
        let mut total = 0.0;
        while !state.done {
            let mask = env.mask(&state);
            let allowed: Vec<usize> = (0..mask.len()).filter(|&a| mask[a]).collect();
            let action = Action::from_index(allowed[rng.gen_range(0..allowed.len())], env.n_features());
            let step = env.step(&state, action).unwrap();
            total += step.reward;
            state = step.next_state;
        }
        let expected = -alpha * state.accrued_cost - env.score(&state);
        worst = worst.max((total - expected).abs());
    }
    check(worst <= 1e-12, format!("10000 episodes, max |return - (-a*cost - S)| = {worst:e}"))
}

/// Rank MSE computed without sorting: a cluster's rank is one plus the number
/// of clusters strictly closer, or equally close with a lower index.
fn brute_force_score(p: &[f64], revealed: &FeatureSet, centroids: &[Vec<f64>]) -> f64 {
    let dist = |c: &[f64], all: bool| -> f64 {
        (0..p.len()).filter(|&f| all || revealed.contains(f)).map(|f| (p[f] - c[f]) * (p[f] - c[f])).sum::<f64>().sqrt()
    };
    let ranks = |all: bool| -> Vec<usize> {
        let d: Vec<f64> = centroids.iter().map(|c| dist(c, all)).collect();
        (0..d.len()).map(|i| 1 + (0..d.len()).filter(|&j| d[j] < d[i] || (d[j] == d[i] && j < i)).count()).collect()
    };
    let (partial, full) = (ranks(false), ranks(true));
    let k = centroids.len() as f64;
    partial.iter().zip(&full).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / k
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..7);
        let k = rng.gen_range(1..7);
        let rows: Vec<Vec<f64>> = (0..k + 3).map(|_| (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let train = Dataset::from_rows(rows).unwrap();
        let centroids: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..n).map(|_| (rng.gen_range(0..5) as f64) / 4.0).collect())
            .collect();
        let clustering = Clustering::from_centroids(centroids.clone(), &train).unwrap();
        let p: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..5) as f64) / 4.0).collect();
        let revealed = FeatureSet::from_indices(n, (0..n).filter(|_| rng.gen_bool(0.5)));
        if clustering.score(&revealed, &p) != brute_force_score(&p, &revealed, &centroids) {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("1000 instances, {mismatches} mismatches"))
}

fn oracle_spread(train: &Dataset, points: &[usize]) -> f64 {
    let d = train.n_features();
    let m = points.len() as f64;
    let centroid: Vec<f64> = (0..d).map(|f| points.iter().map(|&i| train.row(i)[f]).sum::<f64>() / m).collect();
    points
        .iter()
        .map(|&i| (0..d).map(|f| (train.row(i)[f] - centroid[f]).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / m
}

/// Every (boundary, reward) a node could have chosen, computed from scratch.
fn oracle_candidates(train: &Dataset, points: &[usize], schedule: &CostSchedule, params: &TreeParams, used: &FeatureSet) -> Vec<(usize, f64, f64)> {
    let delta = oracle_spread(train, points);
    let n = points.len() as f64;
    let mut out = Vec::new();
    for f in 0..train.n_features() {
        if params.exclude_used_features && used.contains(f) {
            continue;
        }
        let values: Vec<f64> = points.iter().map(|&i| train.row(i)[f]).collect();
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            continue;
        }
        let step = (hi - lo) / (params.ell + 1) as f64;
        for j in 1..=params.ell {
            let v = lo + step * j as f64;
            let left: Vec<usize> = points.iter().copied().filter(|&i| train.row(i)[f] < v).collect();
            let right: Vec<usize> = points.iter().copied().filter(|&i| train.row(i)[f] >= v).collect();
            if left.is_empty() || right.is_empty() {
                continue;
            }
            let score = delta
                - (left.len() as f64 / n * oracle_spread(train, &left) + right.len() as f64 / n * oracle_spread(train, &right));
            let cost = if used.contains(f) { 0.0 } else { schedule.cost(f) };
            out.push((f, v, (1.0 - params.alpha * cost) * score));
        }
    }
    out
}

fn verify_node(tree: &CbcTree, node: &Node, train: &Dataset, schedule: &CostSchedule, used: &FeatureSet, checked: &mut usize) -> Result<(), String> {
    const TOL: f64 = 1e-12;
    let params = &tree.params;
    let candidates = oracle_candidates(train, &node.points, schedule, params, used);
    let max = candidates.iter().map(|c| c.2).fold(f64::NEG_INFINITY, f64::max);
    match &node.kind {
        NodeKind::Leaf => {
            if node.size() > params.tau && max > TOL {
                return Err(format!("leaf #{} could split with reward {max}", node.id));
            }
        }
        NodeKind::Internal { boundary, reward, left, right } => {
            *checked += 1;
            let mine = candidates
                .iter()
                .find(|c| c.0 == boundary.feature && c.1 == boundary.value)
                .ok_or_else(|| format!("node #{} boundary is not a candidate", node.id))?;
            if (mine.2 - max).abs() > TOL || (reward - max).abs() > TOL || max <= 0.0 {
                return Err(format!("node #{}: stored {reward}, oracle {} for it, max {max}", node.id, mine.2));
            }
            let mut used = used.clone();
            used.insert(boundary.feature);
            verify_node(tree, left, train, schedule, &used, checked)?;
            verify_node(tree, right, train, schedule, &used, checked)?;
        }
    }
    Ok(())
}

fn criterion_3() -> Outcome {
    let mut fixtures: Vec<(Dataset, CostSchedule, TreeParams)> = Vec::new();
    for seed in 0..3 {
        let data = gaussian_clusters(&GaussianSpec { n_points: 150, seed, ..GaussianSpec::default() }).unwrap().data;
        fixtures.push((frugalnn::data::normalize(&data).unwrap(), CostSchedule::uniform(8), TreeParams::default()));
    }
    let data = gaussian_clusters(&GaussianSpec { n_points: 120, seed: 9, ..GaussianSpec::default() }).unwrap().data;
    let costs = CostSchedule::new(vec![0.3, 0.05, 0.2, 0.1, 0.02, 0.4, 0.1, 0.05], vec![]).unwrap();
    fixtures.push((
        frugalnn::data::normalize(&data).unwrap(),
        costs,
        TreeParams { exclude_used_features: true, ell: 7, tau: 6, ..TreeParams::default() },
    ));
    fixtures.push((stacked_blobs(4), CostSchedule::new(vec![0.5, 0.5], vec![]).unwrap(), TreeParams::default()));

    let mut checked = 0;
    for (i, (train, schedule, params)) in fixtures.iter().enumerate() {
        let tree = cbctree::build(train, schedule, params.clone()).map_err(|e| e.to_string())?;
        verify_node(&tree, &tree.root, train, schedule, &FeatureSet::empty(train.n_features()), &mut checked)
            .map_err(|e| format!("fixture {i}: {e}"))?;
    }
    check(checked > 0, format!("5 fixtures, {checked} internal nodes attain the maximum reward"))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut params = 0;
    for config in 0..20 {
        let inputs = rng.gen_range(2..6);
        let actions = rng.gen_range(2..6);
        let hidden: Vec<usize> = (0..rng.gen_range(1..3)).map(|_| rng.gen_range(2..7)).collect();
        let net = QNetwork::new(inputs, &hidden, actions, config);
        let batch = rng.gen_range(1..5);
        let states = Array2::from_shape_fn((batch, inputs), |_| rng.gen_range(-1.0..1.0));
        let chosen: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..actions)).collect();
        let targets: Vec<f64> = (0..batch).map(|_| rng.gen_range(-2.0..1.0)).collect();
        let (_, grad) = net.loss_and_gradient(states.view(), &chosen, &targets);
        let h = 1e-5;
        for (i, &g) in grad.params().enumerate() {
            let mut plus = net.clone();
            *plus.params_mut().nth(i).unwrap() += h;
            let mut minus = net.clone();
            *minus.params_mut().nth(i).unwrap() -= h;
            let numeric = (plus.loss_and_gradient(states.view(), &chosen, &targets).0
                - minus.loss_and_gradient(states.view(), &chosen, &targets).0)
                / (2.0 * h);
            worst = worst.max((g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-6));
            params += 1;
        }
    }
    check(worst < 1e-4, format!("20 networks, {params} parameters, max relative error {worst:e}"))
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 8;
    let net = QNetwork::new(n + 1, &[128, 256], n + 1, 5);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let revealed = FeatureSet::from_indices(n, (0..n).filter(|_| rng.gen_bool(0.5)));
        let x = frugalnn::env::encode(&revealed, rng.gen_range(0.0..1.0));
        let q = net.forward(&x);
        let v = net.value(&x);
        worst = worst.max((q.iter().map(|q| q - v).sum::<f64>() / q.len() as f64).abs());
    }
    check(worst <= 1e-6, format!("1000 states, max |mean(Q - V)| = {worst:e}"))
}

fn criterion_6() -> Outcome {
    let p = synthetic_problem(6);
    let grouped = CostSchedule::new(vec![0.05, 0.1, 0.2, 0.05, 0.3, 0.15, 0.1, 0.05], vec![vec![0, 4]]).unwrap();
    let (mut steps, mut violations) = (0usize, 0usize);
    let mut round = 0;
    while steps < 100_000 {
        let schedule = if round % 2 == 0 { &p.schedule } else { &grouped };
        let env = Environment::new(&p.train, &p.clustering, schedule, 1.0).unwrap();
        let budget = [0.3, 0.5, 0.7, 1.0][round % 4];
        let hyper = DqnHyper { episodes: 3000, hidden: vec![16, 16], batch_size: 16, eps_decay: 0.998, seed: round as u64, ..DqnHyper::default() };
        dqn::train_observed(&env, budget, &hyper, |rec| {
            steps += 1;
            let bad_action = !rec.mask[rec.action.index(env.n_features())];
            let overspent = rec.result.next_state.accrued_cost > rec.state.budget + frugalnn::COST_TOLERANCE;
            violations += usize::from(bad_action || overspent);
        })
        .map_err(|e| e.to_string())?;
        round += 1;
    }
    check(violations == 0, format!("{steps} training steps over {round} runs, {violations} violations"))
}

/// P(X >= wins) for X ~ Binomial(n, 1/2).
fn sign_test_p(wins: usize, n: usize) -> f64 {
    let choose = |n: usize, k: usize| (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64);
    (wins..=n).map(|k| choose(n, k)).sum::<f64>() / 2f64.powi(n as i32)
}

fn criterion_7() -> Outcome {
    let budgets = [0.3, 0.5, 0.7];
    let seeds: Vec<u64> = (0..10).collect();
    // distances[agent][budget][seed]
    let mut distances = vec![vec![Vec::new(); budgets.len()]; 3];
    let agents = [AgentKind::Random, AgentKind::Dqn, AgentKind::Tree];
    for &seed in &seeds {
        let p = synthetic_problem(seed);
        let config = SweepConfig { budgets: budgets.to_vec(), seeds: vec![seed], ..SweepConfig::default() };
        let inputs = SweepInputs { train: &p.train, test: &p.test, clustering: &p.clustering, schedule: &p.schedule, tree: None };
        let report = budget_sweep(inputs, &config).map_err(|e| e.to_string())?;
        for (a, &agent) in agents.iter().enumerate() {
            for (b, &budget) in budgets.iter().enumerate() {
                distances[a][b].push(report.row(agent, budget, seed).unwrap().mean_sum_true_distance);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut ok = true;
    let mut detail = Vec::new();
    for (a, name) in [(1, "dqn"), (2, "cbctree")] {
        for (b, budget) in budgets.iter().enumerate() {
            let wins = (0..seeds.len()).filter(|&s| distances[a][b][s] < distances[0][b][s]).count();
            let p = sign_test_p(wins, seeds.len());
            let (m, r) = (mean(&distances[a][b]), mean(&distances[0][b]));
            ok &= p < 0.05 && m < r;
            detail.push(format!("{name}@{budget}: {m:.3} vs random {r:.3}, {wins}/10 wins, p={p:.4}"));
        }
    }
    check(ok, detail.join("; "))
}

fn criterion_8() -> Outcome {
    let p = synthetic_problem(0);
    let budgets: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
    let config = SweepConfig {
        agents: vec![AgentKind::Random],
        budgets: budgets.clone(),
        seeds: (0..10).collect(),
        ..SweepConfig::default()
    };
    let inputs = SweepInputs { train: &p.train, test: &p.test, clustering: &p.clustering, schedule: &p.schedule, tree: None };
    let report = budget_sweep(inputs, &config).map_err(|e| e.to_string())?;
    let curve = |metric: fn(&frugalnn::eval::SweepRow) -> f64| -> Vec<f64> {
        budgets
            .iter()
            .map(|&b| {
                let rows: Vec<f64> = report.rows.iter().filter(|r| r.budget == b).map(metric).collect();
                rows.iter().sum::<f64>() / rows.len() as f64
            })
            .collect()
    };
    let rho = spearman(&curve(|r| r.mean_score), &curve(|r| r.mean_sum_true_distance));
    check(rho > 0.8, format!("Spearman correlation of random-agent score and distance curves = {rho:.4}"))
}

fn criterion_9() -> Outcome {
    let eps = DqnHyper::default().epsilon(4000);
    check((eps - 0.018).abs() < 1e-3, format!("epsilon after 4000 episodes = {eps:.5}"))
}

fn frugalnn(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_frugalnn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let s = |p: &Path| p.to_str().unwrap().to_owned();
    let data = gaussian_clusters(&GaussianSpec { n_points: 200, seed: 10, ..GaussianSpec::default() }).unwrap().data;
    data.write_csv(&d.join("raw.csv")).map_err(|e| e.to_string())?;
    frugalnn(&["prepare", "--data", &s(&d.join("raw.csv")), "--out", &s(&d.join("prep")), "--seed", "10"])?;
    let train = s(&d.join("prep/train.csv"));
    let test = s(&d.join("prep/test.csv"));
    frugalnn(&["cluster", "--train", &train, "--out", &s(&d.join("clustering.json")), "--seed", "10"])?;
    let config = d.join("sweep.json");
    std::fs::write(&config, r#"{"budgets": [0.3, 0.5, 0.7], "seeds": [10, 11], "episodes": 300, "hidden": [32, 32]}"#)
        .map_err(|e| e.to_string())?;
    let run = |out: &str| {
        frugalnn(&[
            "--config", &s(&config), "sweep", "--train", &train, "--test", &test,
            "--clustering", &s(&d.join("clustering.json")), "--out", out,
        ])
    };
    let (a, b) = (d.join("run1.csv"), d.join("run2.csv"));
    run(&s(&a))?;
    run(&s(&b))?;
    let read = |p: &Path| std::fs::read(p).map_err(|e| e.to_string());
    let same = read(&a)? == read(&b)?;
    let rows = String::from_utf8_lossy(&read(&a)?).lines().count() - 1;
    check(same && rows == 18, format!("two sweeps, {rows} rows each, byte-identical: {same}"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("reward identity", criterion_1),
        ("score oracle", criterion_2),
        ("tree-split oracle", criterion_3),
        ("gradient check", criterion_4),
        ("dueling identity", criterion_5),
        ("mask safety", criterion_6),
        ("agents beat random on sum of true distances", criterion_7),
        ("score and distance curves co-move", criterion_8),
        ("epsilon schedule", criterion_9),
        ("sweep determinism", criterion_10),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail} ({secs:.1}s)");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
