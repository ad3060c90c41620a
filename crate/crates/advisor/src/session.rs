use std::time::Instant;

use frugalnn::cbctree::CbcTree;
use frugalnn::cluster::{partial_distance, Clustering};
use frugalnn::data::{CostSchedule, Dataset, Normalization};
use frugalnn::dqn::{masked_argmax, QNetwork};
use frugalnn::env::{affordable, encode, Action};
use frugalnn::eval::knn_retrieve;
use frugalnn::FeatureSet;
use serde::{Deserialize, Serialize};

use crate::ApiError;

#[derive(Debug, Clone)]
pub enum Policy {
    Tree(CbcTree),
    Dqn(QNetwork),
}

impl Policy {
    pub fn kind(&self) -> &'static str {
        match self {
            Policy::Tree(_) => "cbctree",
            Policy::Dqn(_) => "dqn",
        }
    }
}

/// Everything one served model needs: a policy plus the normalized training
/// data, clustering and cost schedule it was built against.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub policy: Policy,
    /// Normalized training rows; neighbour ids index into these.
    pub train: Dataset,
    pub normalization: Option<Normalization>,
    pub clustering: Clustering,
    pub schedule: CostSchedule,
    pub k: usize,
}

impl ModelBundle {
    pub fn n_features(&self) -> usize {
        self.train.n_features()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.train.feature_index(name)
    }

    fn normalize(&self, f: usize, raw: f64) -> f64 {
        match &self.normalization {
            Some(norm) => norm.normalize_value(f, raw),
            None => raw,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    Reveal { feature: String, value: f64 },
    Terminate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub seq: usize,
    #[serde(flatten)]
    pub event: Event,
    /// Cost charged by this event; zero for pending group members.
    pub charged: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Suggestion {
    Reveal { feature: String },
    Terminate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedCluster {
    /// `cbctree` for a tree node id, `kmeans` for a clustering index.
    pub source: String,
    pub id: usize,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureInfo {
    pub name: String,
    pub cost: f64,
    pub group: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Advice {
    pub budget: f64,
    pub remaining_budget: f64,
    /// Features paid for, in feature order.
    pub revealed: Vec<String>,
    /// Paid for through a group but still waiting for a value.
    pub pending: Vec<String>,
    pub suggestion: Suggestion,
    /// Cluster indices, most similar first.
    pub cluster_ranking: Vec<usize>,
    pub predicted_cluster: PredictedCluster,
    pub neighbors: Vec<Neighbor>,
    pub finished: bool,
}

/// One interactive acquisition. Values come from the user, normalized with
/// the bundle's training statistics.
#[derive(Debug, Clone)]
pub struct Session {
    pub id: String,
    pub model: String,
    pub budget: f64,
    pub created_at: Instant,
    pub last_access: Instant,
    revealed: FeatureSet,
    values: Vec<Option<f64>>,
    raw: Vec<Option<f64>>,
    accrued_cost: f64,
    finished: bool,
    history: Vec<HistoryEntry>,
}

impl Session {
    pub fn new(id: String, model: String, bundle: &ModelBundle, budget: f64) -> Result<Self, ApiError> {
        if !(budget > 0.0) || !budget.is_finite() {
            return Err(ApiError::bad_request("invalid_budget", format!("budget must be positive, got {budget}")));
        }
        let n = bundle.n_features();
        let now = Instant::now();
        Ok(Self {
            id,
            model,
            budget,
            created_at: now,
            last_access: now,
            revealed: FeatureSet::empty(n),
            values: vec![None; n],
            raw: vec![None; n],
            accrued_cost: 0.0,
            finished: false,
            history: Vec::new(),
        })
    }

    /// Rebuilds a session by applying `history` to a fresh one.
    pub fn replay(id: String, model: String, bundle: &ModelBundle, budget: f64, history: &[HistoryEntry]) -> Result<Self, ApiError> {
        let mut session = Session::new(id, model, bundle, budget)?;
        for entry in history {
            match &entry.event {
                Event::Reveal { feature, value } => session.reveal(bundle, feature, *value)?,
                Event::Terminate => session.terminate()?,
            }
        }
        Ok(session)
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    pub fn accrued_cost(&self) -> f64 {
        self.accrued_cost
    }

    pub fn revealed(&self) -> &FeatureSet {
        &self.revealed
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Features with a user-supplied value.
    pub fn known(&self) -> FeatureSet {
        FeatureSet::from_indices(self.values.len(), (0..self.values.len()).filter(|&f| self.values[f].is_some()))
    }

    /// Normalized partial point; unknown coordinates are zero and never read.
    pub fn point(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.unwrap_or(0.0)).collect()
    }

    pub fn raw_values(&self) -> &[Option<f64>] {
        &self.raw
    }

    fn is_pending(&self, f: usize) -> bool {
        self.revealed.contains(f) && self.values[f].is_none()
    }

    pub fn reveal(&mut self, bundle: &ModelBundle, feature: &str, value: f64) -> Result<(), ApiError> {
        if self.finished {
            return Err(ApiError::conflict("session_finished", "the session has been terminated"));
        }
        let f = bundle
            .feature_index(feature)
            .ok_or_else(|| ApiError::bad_request("unknown_feature", format!("no feature named {feature:?}")))?;
        if !value.is_finite() {
            return Err(ApiError::bad_request("invalid_value", format!("value for {feature:?} must be finite")));
        }
        if self.values[f].is_some() {
            return Err(ApiError::conflict("already_revealed", format!("{feature:?} is already revealed")));
        }
        let charged = if self.is_pending(f) {
            0.0
        } else {
            let cost = bundle.schedule.cost(f);
            if !affordable(&self.revealed, self.accrued_cost, self.budget, cost, f) {
                return Err(ApiError::conflict(
                    "unaffordable",
                    format!("{feature:?} costs {cost}, {} of the budget left", self.budget - self.accrued_cost),
                ));
            }
            self.revealed.insert(f);
            for &g in bundle.schedule.group_of(f).unwrap_or(&[]) {
                self.revealed.insert(g);
            }
            self.accrued_cost += cost;
            cost
        };
        self.values[f] = Some(bundle.normalize(f, value));
        self.raw[f] = Some(value);
        self.history.push(HistoryEntry {
            seq: self.history.len(),
            event: Event::Reveal { feature: feature.to_owned(), value },
            charged,
        });
        Ok(())
    }

    pub fn terminate(&mut self) -> Result<(), ApiError> {
        if self.finished {
            return Err(ApiError::conflict("session_finished", "the session has been terminated"));
        }
        self.finished = true;
        self.history.push(HistoryEntry { seq: self.history.len(), event: Event::Terminate, charged: 0.0 });
        Ok(())
    }

    fn suggest(&self, bundle: &ModelBundle) -> Action {
        if self.finished {
            return Action::Terminate;
        }
        let n = bundle.n_features();
        match &bundle.policy {
            Policy::Dqn(net) => {
                let mask: Vec<bool> = (0..n)
                    .map(|f| affordable(&self.revealed, self.accrued_cost, self.budget, bundle.schedule.cost(f), f))
                    .chain(std::iter::once(true))
                    .collect();
                let q = net.forward(&encode(&self.revealed, self.accrued_cost));
                Action::from_index(masked_argmax(&q, &mask), n)
            }
            Policy::Tree(tree) => {
                // Pending group members are already paid for.
                let costs: Vec<f64> =
                    (0..n).map(|f| if self.is_pending(f) { 0.0 } else { bundle.schedule.cost(f) }).collect();
                tree.suggest(&bundle.train, &self.point(), &self.known(), &costs, self.budget - self.accrued_cost)
            }
        }
    }

    pub fn advice(&self, bundle: &ModelBundle) -> Advice {
        let names = bundle.train.feature_names();
        let known = self.known();
        let p = self.point();

        let ranking = bundle.clustering.rank(&p, &known);
        let mut cluster_ranking: Vec<usize> = (0..ranking.len()).collect();
        cluster_ranking.sort_by_key(|&c| ranking.0[c]);

        let (predicted_cluster, restriction) = match &bundle.policy {
            Policy::Tree(tree) => {
                let node = tree.predict_cluster(&bundle.train, &p, &known);
                let predicted = PredictedCluster { source: "cbctree".into(), id: node.id, size: node.size() };
                (predicted, Some(node.points.as_slice()))
            }
            Policy::Dqn(_) => {
                let best = ranking.best();
                let size = bundle.clustering.assignment().iter().filter(|&&a| a == best).count();
                (PredictedCluster { source: "kmeans".into(), id: best, size }, None)
            }
        };
        let neighbors = knn_retrieve(&bundle.train, &p, &known, bundle.k, restriction)
            .into_iter()
            .map(|id| Neighbor { id, distance: partial_distance(&p, bundle.train.row(id), &known) })
            .collect();

        let suggestion = match self.suggest(bundle) {
            Action::Reveal(f) => Suggestion::Reveal { feature: names[f].clone() },
            Action::Terminate => Suggestion::Terminate,
        };
        Advice {
            budget: self.budget,
            remaining_budget: self.budget - self.accrued_cost,
            revealed: self.revealed.iter().map(|f| names[f].clone()).collect(),
            pending: (0..names.len()).filter(|&f| self.is_pending(f)).map(|f| names[f].clone()).collect(),
            suggestion,
            cluster_ranking,
            predicted_cluster,
            neighbors,
            finished: self.finished,
        }
    }
}

pub fn feature_info(bundle: &ModelBundle) -> Vec<FeatureInfo> {
    let names = bundle.train.feature_names();
    (0..names.len())
        .map(|f| FeatureInfo {
            name: names[f].clone(),
            cost: bundle.schedule.cost(f),
            group: bundle.schedule.group_of(f).map(|g| g.iter().map(|&i| names[i].clone()).collect()),
        })
        .collect()
}
