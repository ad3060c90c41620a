//! Dataset ingestion, normalization, train/test splitting and cost schedules.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Cells that mark a missing value in common exports. The training set must be
/// complete, so these are rejected rather than imputed.
const MISSING_MARKERS: &[&str] = &["", "?", "na", "nan", "null"];

/// A complete numeric table, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    feature_names: Vec<String>,
    values: Vec<f64>,
    n_rows: usize,
    n_features: usize,
    /// Present once the values have been normalized.
    normalization: Option<Normalization>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub range: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    /// `(v - min) / (max - min)`, values land in `[0, 1]`.
    #[default]
    MinMax,
    /// `(v - mean) / (max - min)`, values land in `[-1, 1]`.
    MeanRange,
}

/// Per-feature statistics of the training portion and the transform they define.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mode: NormMode,
    pub stats: Vec<FeatureStats>,
}

impl Dataset {
    pub fn new(feature_names: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_features = feature_names.len();
        let mut values = Vec::with_capacity(rows.len() * n_features);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n_features {
                return Err(Error::Arity { row: i + 1, expected: n_features, found: row.len() });
            }
            values.extend_from_slice(row);
        }
        Ok(Self { feature_names, values, n_rows: rows.len(), n_features, normalization: None })
    }

    /// Builds an unnamed dataset with features `f0..f{n-1}`.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        Self::new(default_names(n), rows)
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn is_empty(&self) -> bool {
        self.n_rows == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        (0..self.n_rows).map(move |i| self.row(i))
    }

    pub fn column(&self, f: usize) -> impl Iterator<Item = f64> + '_ {
        self.rows().map(move |r| r[f])
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    /// Statistics of the values as currently stored.
    pub fn stats(&self) -> Result<Vec<FeatureStats>> {
        if self.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok((0..self.n_features)
            .map(|f| {
                let (mut min, mut max, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
                for v in self.column(f) {
                    min = min.min(v);
                    max = max.max(v);
                    sum += v;
                }
                FeatureStats { min, max, mean: sum / self.n_rows as f64, range: max - min }
            })
            .collect())
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut values = Vec::with_capacity(indices.len() * self.n_features);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Dataset {
            feature_names: self.feature_names.clone(),
            values,
            n_rows: indices.len(),
            n_features: self.n_features,
            normalization: self.normalization.clone(),
        }
    }

    /// Marks already-normalized values with the transform that produced them,
    /// e.g. after reloading a prepared file.
    pub fn with_normalization(mut self, normalization: Normalization) -> Result<Self> {
        if normalization.stats.len() != self.n_features {
            return Err(Error::InvalidArgument(format!(
                "normalization has {} features, dataset has {}",
                normalization.stats.len(),
                self.n_features
            )));
        }
        self.normalization = Some(normalization);
        Ok(self)
    }

    /// Writes the values as CSV with a header line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let write = |out: &mut BufWriter<File>| -> std::io::Result<()> {
            writeln!(out, "{}", self.feature_names.join(","))?;
            for row in self.rows() {
                let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                writeln!(out, "{}", cells.join(","))?;
            }
            out.flush()
        };
        write(&mut out).map_err(|e| Error::io(path, e))
    }
}

fn default_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("f{i}")).collect()
}

/// Reads a comma-separated numeric file. Feature names come from the first
/// line when `header` is set, otherwise they are generated as `f0..f{n-1}`.
pub fn load_dataset(path: &Path, header: bool) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let mut names = if header {
        let headers = reader.headers().map_err(|e| Error::Format(e.to_string()))?;
        Some(headers.iter().map(str::to_owned).collect::<Vec<_>>())
    } else {
        None
    };

    let line_offset = usize::from(header) + 1;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Format(e.to_string()))?;
        let line = i + line_offset;
        let expected = names.get_or_insert_with(|| default_names(record.len())).len();
        if record.len() != expected {
            return Err(Error::Arity { row: line, expected, found: record.len() });
        }
        let row = record
            .iter()
            .enumerate()
            .map(|(j, cell)| parse_cell(cell).ok_or_else(|| Error::Parse {
                row: line,
                column: j + 1,
                cell: cell.to_owned(),
            }))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Dataset::new(names.unwrap_or_default(), rows)
}

fn parse_cell(cell: &str) -> Option<f64> {
    if MISSING_MARKERS.contains(&cell.to_ascii_lowercase().as_str()) {
        return None;
    }
    cell.parse::<f64>().ok().filter(|v| v.is_finite())
}

impl Normalization {
    /// Computes the statistics of `ds`. Constant features are rejected because
    /// they have no range to scale by.
    pub fn fit(ds: &Dataset, mode: NormMode) -> Result<Self> {
        let stats = ds.stats()?;
        if let Some(f) = stats.iter().position(|s| s.range <= 0.0) {
            return Err(Error::ConstantFeature(ds.feature_names[f].clone()));
        }
        Ok(Self { mode, stats })
    }

    pub fn n_features(&self) -> usize {
        self.stats.len()
    }

    fn offset(&self, f: usize) -> f64 {
        match self.mode {
            NormMode::MinMax => self.stats[f].min,
            NormMode::MeanRange => self.stats[f].mean,
        }
    }

    /// Bounds of the normalized values of the fitted data.
    pub fn bounds(&self, f: usize) -> (f64, f64) {
        let s = &self.stats[f];
        ((s.min - self.offset(f)) / s.range, (s.max - self.offset(f)) / s.range)
    }

    /// Normalizes one raw value, clamping it into the range seen at fit time.
    pub fn normalize_value(&self, f: usize, raw: f64) -> f64 {
        let (lo, hi) = self.bounds(f);
        ((raw - self.offset(f)) / self.stats[f].range).clamp(lo, hi)
    }

    pub fn denormalize_value(&self, f: usize, v: f64) -> f64 {
        v * self.stats[f].range + self.offset(f)
    }

    /// Applies the transform to a raw dataset.
    pub fn apply(&self, raw: &Dataset) -> Result<Dataset> {
        if raw.normalization.is_some() {
            return Err(Error::InvalidArgument("dataset is already normalized".into()));
        }
        if raw.n_features != self.n_features() {
            return Err(Error::InvalidArgument(format!(
                "normalization has {} features, dataset has {}",
                self.n_features(),
                raw.n_features
            )));
        }
        let n = raw.n_features;
        let values = raw
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| self.normalize_value(i % n, v))
            .collect();
        Ok(Dataset { values, normalization: Some(self.clone()), ..raw.clone() })
    }

    /// Maps normalized values back to raw units.
    pub fn invert(&self, ds: &Dataset) -> Dataset {
        let n = ds.n_features;
        let values = ds
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| self.denormalize_value(i % n, v))
            .collect();
        Dataset { values, normalization: None, ..ds.clone() }
    }
}

/// Min-max normalization of a raw dataset using its own statistics.
pub fn normalize(ds: &Dataset) -> Result<Dataset> {
    normalize_with(ds, NormMode::MinMax)
}

pub fn normalize_with(ds: &Dataset, mode: NormMode) -> Result<Dataset> {
    Normalization::fit(ds, mode)?.apply(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train_fraction: 0.8, seed: 0 }
    }
}

impl SplitSpec {
    /// Training rows for a dataset of `n` rows: `ceil(fraction * n)`, kept
    /// within `1..n` so neither side is empty.
    pub fn train_size(&self, n: usize) -> usize {
        ((self.train_fraction * n as f64).ceil() as usize).clamp(1, n - 1)
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
    /// Original row index of every train row, in order.
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    pub normalization: Normalization,
}

/// Random train/test partition. Normalization statistics are fitted on the
/// train rows only and applied to both sides; test values outside the train
/// range are clamped.
pub fn split(ds: &Dataset, spec: &SplitSpec, mode: NormMode) -> Result<Split> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::InvalidSplit(format!(
            "train fraction {} is outside (0, 1)",
            spec.train_fraction
        )));
    }
    if ds.n_rows < 2 {
        return Err(Error::InvalidSplit(format!("need at least 2 rows, have {}", ds.n_rows)));
    }
    let raw = match &ds.normalization {
        Some(norm) => norm.invert(ds),
        None => ds.clone(),
    };

    let mut order: Vec<usize> = (0..raw.n_rows).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_train = spec.train_size(raw.n_rows);
    let mut train_rows = order[..n_train].to_vec();
    let mut test_rows = order[n_train..].to_vec();
    train_rows.sort_unstable();
    test_rows.sort_unstable();

    let raw_train = raw.select(&train_rows);
    let normalization = Normalization::fit(&raw_train, mode)?;
    Ok(Split {
        train: normalization.apply(&raw_train)?,
        test: normalization.apply(&raw.select(&test_rows))?,
        train_rows,
        test_rows,
        normalization,
    })
}

/// Normalized per-feature acquisition costs plus optional feature groups.
/// Revealing any member of a group reveals the whole group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSchedule {
    costs: Vec<f64>,
    #[serde(default)]
    groups: Vec<Vec<usize>>,
}

impl CostSchedule {
    /// Every feature costs `1/n`.
    pub fn uniform(n: usize) -> Self {
        Self { costs: vec![1.0 / n as f64; n], groups: Vec::new() }
    }

    /// Validates the schedule and rescales it so the largest cost is at most 1.
    pub fn new(costs: Vec<f64>, groups: Vec<Vec<usize>>) -> Result<Self> {
        if let Some((i, c)) = costs.iter().enumerate().find(|(_, c)| !(**c >= 0.0) || !c.is_finite()) {
            return Err(Error::CostSchedule(format!("cost of feature {i} is {c}, must be finite and nonnegative")));
        }
        let n = costs.len();
        let mut owner = vec![None; n];
        for (g, group) in groups.iter().enumerate() {
            for &f in group {
                if f >= n {
                    return Err(Error::CostSchedule(format!("group {g} names feature {f}, only {n} features")));
                }
                match owner[f] {
                    Some(other) if other != g => {
                        return Err(Error::CostSchedule(format!(
                            "overlapping groups: feature {f} is in groups {other} and {g}"
                        )))
                    }
                    _ => owner[f] = Some(g),
                }
            }
        }
        let max = costs.iter().copied().fold(0.0, f64::max);
        let costs = if max > 1.0 { costs.iter().map(|c| c / max).collect() } else { costs };
        Ok(Self { costs, groups })
    }

    pub fn from_json(text: &str, n: usize) -> Result<Self> {
        let parsed: CostSchedule = serde_json::from_str(text)?;
        if parsed.costs.len() != n {
            return Err(Error::CostSchedule(format!(
                "{} costs given for {n} features",
                parsed.costs.len()
            )));
        }
        Self::new(parsed.costs, parsed.groups)
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    pub fn cost(&self, f: usize) -> f64 {
        self.costs[f]
    }

    pub fn n_features(&self) -> usize {
        self.costs.len()
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    /// The group containing `f`, if any.
    pub fn group_of(&self, f: usize) -> Option<&[usize]> {
        self.groups.iter().find(|g| g.contains(&f)).map(Vec::as_slice)
    }

    pub fn total(&self) -> f64 {
        self.costs.iter().sum()
    }

    pub fn min_cost(&self) -> f64 {
        self.costs.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Reads a JSON cost schedule (`{"costs": [...], "groups": [[...]]}`), or
/// returns the uniform schedule when no file is given.
pub fn load_cost_schedule(path: Option<&Path>, n: usize) -> Result<CostSchedule> {
    match path {
        None => Ok(CostSchedule::uniform(n)),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            CostSchedule::from_json(&text, n)
        }
    }
}
