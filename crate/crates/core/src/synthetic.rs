//! Seeded synthetic datasets with known structure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaussianSpec {
    pub n_points: usize,
    pub n_informative: usize,
    pub n_noise: usize,
    pub n_clusters: usize,
    /// Standard deviation of each cluster along every informative axis.
    pub spread: f64,
    /// Minimum distance between any two cluster centres.
    pub min_separation: f64,
    pub seed: u64,
}

impl Default for GaussianSpec {
    fn default() -> Self {
        Self {
            n_points: 500,
            n_informative: 4,
            n_noise: 4,
            n_clusters: 5,
            spread: 0.06,
            min_separation: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub data: Dataset,
    /// Generating cluster of every row.
    pub labels: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
}

/// Gaussian blobs on the informative features (listed first) followed by
/// noise features drawn from one shared normal distribution. Points are
/// assigned to clusters round-robin.
pub fn gaussian_clusters(spec: &GaussianSpec) -> Result<Synthetic> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(spec.n_clusters);
    let mut attempts = 0;
    while centers.len() < spec.n_clusters {
        let c: Vec<f64> = (0..spec.n_informative).map(|_| rng.gen_range(0.0..1.0)).collect();
        attempts += 1;
        // Give up on separation after many rejections rather than loop forever.
        let far = centers
            .iter()
            .all(|o| o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= spec.min_separation);
        if far || attempts > 10_000 {
            centers.push(c);
        }
    }
    let normal = Normal::new(0.0, spec.spread).map_err(|e| crate::Error::InvalidArgument(e.to_string()))?;
    let noise = Normal::new(0.5, 0.15).expect("valid parameters");
    let mut rows = Vec::with_capacity(spec.n_points);
    let mut labels = Vec::with_capacity(spec.n_points);
    for i in 0..spec.n_points {
        let label = i % spec.n_clusters.max(1);
        let mut row: Vec<f64> = centers[label].iter().map(|c| c + normal.sample(&mut rng)).collect();
        row.extend((0..spec.n_noise).map(|_| noise.sample(&mut rng)));
        rows.push(row);
        labels.push(label);
    }
    let names = (0..spec.n_informative)
        .map(|i| format!("informative{i}"))
        .chain((0..spec.n_noise).map(|i| format!("noise{i}")))
        .collect();
    Ok(Synthetic { data: Dataset::new(names, rows)?, labels, centers })
}

/// Four blobs of ten points stacked along `y`, all sharing the same spread
/// of `x`. Only `y` separates them.
pub fn stacked_blobs(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..40)
        .map(|i| vec![rng.gen_range(0.0..1.0), (i / 10) as f64 * 0.25 + rng.gen_range(0.0..0.1)])
        .collect();
    Dataset::new(vec!["x".into(), "y".into()], rows).expect("fixed shape")
}
