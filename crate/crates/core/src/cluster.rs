//! K-means clustering and rank-based scoring of partially revealed points.
//!
//! A point is compared with every centroid using only the revealed features.
//! Sorting the clusters by that distance gives a ranking; the score of a
//! revealed set is the mean squared difference between that ranking and the
//! one obtained with every feature.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::{Error, FeatureSet, Result};

pub const MAX_ITERATIONS: usize = 300;
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    centroids: Vec<Vec<f64>>,
    assignment: Vec<usize>,
    seed: u64,
    iterations: usize,
}

/// `rank[i]` is the 1-based rank of cluster `i`; rank 1 is the most similar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ranking(pub Vec<usize>);

impl Ranking {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the cluster ranked first.
    pub fn best(&self) -> usize {
        self.0.iter().position(|&r| r == 1).expect("ranking is a permutation")
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// L2 distance between `p` and `q` over the revealed coordinates only.
pub fn partial_distance(p: &[f64], q: &[f64], revealed: &FeatureSet) -> f64 {
    revealed.iter().map(|f| (p[f] - q[f]) * (p[f] - q[f])).sum::<f64>().sqrt()
}

pub fn full_distance(p: &[f64], q: &[f64]) -> f64 {
    squared_distance(p, q).sqrt()
}

impl Clustering {
    /// Builds a clustering from given centroids, assigning `train` rows to
    /// their nearest centroid.
    pub fn from_centroids(centroids: Vec<Vec<f64>>, train: &Dataset) -> Result<Self> {
        if centroids.is_empty() {
            return Err(Error::InvalidArgument("at least one centroid is required".into()));
        }
        if centroids.iter().any(|c| c.len() != train.n_features()) {
            return Err(Error::InvalidArgument("centroid length differs from feature count".into()));
        }
        let assignment = train.rows().map(|r| nearest(&centroids, r)).collect();
        Ok(Self { centroids, assignment, seed: 0, iterations: 0 })
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn n_features(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    pub fn centroid(&self, i: usize) -> &[f64] {
        &self.centroids[i]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Ranks the clusters by partial distance from `p` to each centroid.
    /// Ties keep ascending cluster order.
    pub fn rank(&self, p: &[f64], revealed: &FeatureSet) -> Ranking {
        rank_clusters(p, revealed, self)
    }

    pub fn score(&self, revealed: &FeatureSet, p: &[f64]) -> f64 {
        score(revealed, p, self)
    }
}

fn nearest(centroids: &[Vec<f64>], row: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(row, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// K-means with k-means++ seeding and Lloyd iterations, stopping when the
/// assignment no longer changes or after [`MAX_ITERATIONS`]. A cluster that
/// becomes empty takes over the point farthest from its own centroid.
pub fn kmeans(train: &Dataset, k: usize, seed: u64) -> Result<Clustering> {
    let n = train.n_rows();
    if k < 1 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if k > n {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds the {n} training rows")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(train, k, &mut rng);
    let mut assignment: Vec<usize> = train.rows().map(|r| nearest(&centroids, r)).collect();
    let mut iterations = 0;

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        repair_empty_clusters(train, &centroids, &mut assignment);
        centroids = cluster_means(train, &assignment, k);
        let next: Vec<usize> = train.rows().map(|r| nearest(&centroids, r)).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    repair_empty_clusters(train, &centroids, &mut assignment);
    let centroids = cluster_means(train, &assignment, k);
    Ok(Clustering { centroids, assignment, seed, iterations })
}

fn kmeans_plus_plus(train: &Dataset, k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = train.n_rows();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut closest: Vec<f64> = train.rows().map(|r| squared_distance(r, train.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = closest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &d) in closest.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if target < d {
                        break;
                    }
                    target -= d;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // Every remaining point coincides with a chosen one.
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (i, row) in train.rows().enumerate() {
            closest[i] = closest[i].min(squared_distance(row, train.row(next)));
        }
    }
    chosen.iter().map(|&i| train.row(i).to_vec()).collect()
}

fn cluster_means(train: &Dataset, assignment: &[usize], k: usize) -> Vec<Vec<f64>> {
    let d = train.n_features();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (row, &c) in train.rows().zip(assignment) {
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(row) {
            *s += v;
        }
    }
    for (sum, &count) in sums.iter_mut().zip(&counts) {
        debug_assert!(count > 0);
        for s in sum.iter_mut() {
            *s /= count as f64;
        }
    }
    sums
}

fn repair_empty_clusters(train: &Dataset, centroids: &[Vec<f64>], assignment: &mut [usize]) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        for &c in assignment.iter() {
            counts[c] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else { return };
        // Farthest point among those whose cluster can spare one.
        let donor = (0..assignment.len())
            .filter(|&i| counts[assignment[i]] > 1)
            .max_by(|&a, &b| {
                let da = squared_distance(train.row(a), &centroids[assignment[a]]);
                let db = squared_distance(train.row(b), &centroids[assignment[b]]);
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("k <= n leaves a cluster with two or more points");
        assignment[donor] = empty;
    }
}

/// Ranks the clusters of `cl` for point `p` using only the revealed features.
pub fn rank_clusters(p: &[f64], revealed: &FeatureSet, cl: &Clustering) -> Ranking {
    let distances: Vec<f64> = cl.centroids.iter().map(|c| partial_distance(p, c, revealed)).collect();
    let mut order: Vec<usize> = (0..cl.k()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]));
    let mut rank = vec![0; cl.k()];
    for (position, &cluster) in order.iter().enumerate() {
        rank[cluster] = position + 1;
    }
    Ranking(rank)
}

/// Mean squared difference between the ranking under `revealed` and the
/// ranking under every feature. `p` must be complete.
pub fn score(revealed: &FeatureSet, p: &[f64], cl: &Clustering) -> f64 {
    let predicted = rank_clusters(p, revealed, cl);
    let truth = rank_clusters(p, &FeatureSet::full(p.len()), cl);
    ranking_mse(&predicted, &truth)
}

pub fn ranking_mse(predicted: &Ranking, truth: &Ranking) -> f64 {
    let sum: f64 = predicted
        .0
        .iter()
        .zip(&truth.0)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    sum / predicted.len() as f64
}
