//! The feature-acquisition MDP.
//!
//! A state is a point together with the set of features revealed so far and
//! the cost spent on them. Revealing feature `f` earns `-alpha * c(f)`;
//! terminating earns minus the rank score of the revealed set. When no
//! unrevealed feature fits in the remaining budget the episode terminates on
//! its own, and the terminal penalty is folded into the reveal that caused it.

use serde::{Deserialize, Serialize};

use crate::cluster::Clustering;
use crate::data::{CostSchedule, Dataset};
use crate::{Error, FeatureSet, Result, COST_TOLERANCE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "action", content = "feature", rename_all = "snake_case")]
pub enum Action {
    Reveal(usize),
    Terminate,
}

impl Action {
    /// Position in the action vector: features first, terminate last.
    pub fn index(self, n_features: usize) -> usize {
        match self {
            Action::Reveal(f) => f,
            Action::Terminate => n_features,
        }
    }

    pub fn from_index(index: usize, n_features: usize) -> Self {
        if index >= n_features {
            Action::Terminate
        } else {
            Action::Reveal(index)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub point_index: usize,
    pub revealed: FeatureSet,
    pub accrued_cost: f64,
    pub budget: f64,
    pub done: bool,
}

impl EnvState {
    pub fn remaining_budget(&self) -> f64 {
        (self.budget - self.accrued_cost).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: EnvState,
    pub reward: f64,
    pub done: bool,
}

/// Environment over the rows of `points`. The dataset, clustering and cost
/// schedule are shared read-only; episodes own their [`EnvState`].
#[derive(Debug, Clone, Copy)]
pub struct Environment<'a> {
    points: &'a Dataset,
    clustering: &'a Clustering,
    schedule: &'a CostSchedule,
    alpha: f64,
}

/// Whether `f` is unrevealed and fits in the remaining budget.
pub fn affordable(revealed: &FeatureSet, accrued_cost: f64, budget: f64, cost: f64, f: usize) -> bool {
    !revealed.contains(f) && accrued_cost + cost <= budget + COST_TOLERANCE
}

impl<'a> Environment<'a> {
    pub fn new(points: &'a Dataset, clustering: &'a Clustering, schedule: &'a CostSchedule, alpha: f64) -> Result<Self> {
        let n = points.n_features();
        if clustering.n_features() != n || schedule.n_features() != n {
            return Err(Error::InvalidArgument(format!(
                "feature counts differ: points {n}, clustering {}, costs {}",
                clustering.n_features(),
                schedule.n_features()
            )));
        }
        if !(alpha >= 0.0) {
            return Err(Error::InvalidArgument(format!("alpha must be nonnegative, got {alpha}")));
        }
        Ok(Self { points, clustering, schedule, alpha })
    }

    pub fn n_features(&self) -> usize {
        self.points.n_features()
    }

    pub fn n_actions(&self) -> usize {
        self.n_features() + 1
    }

    pub fn n_points(&self) -> usize {
        self.points.n_rows()
    }

    pub fn points(&self) -> &'a Dataset {
        self.points
    }

    pub fn clustering(&self) -> &'a Clustering {
        self.clustering
    }

    pub fn schedule(&self) -> &'a CostSchedule {
        self.schedule
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn point(&self, s: &EnvState) -> &'a [f64] {
        self.points.row(s.point_index)
    }

    pub fn reset(&self, point_index: usize, budget: f64) -> Result<EnvState> {
        if point_index >= self.n_points() {
            return Err(Error::InvalidArgument(format!(
                "point {point_index} out of range ({} points)",
                self.n_points()
            )));
        }
        if !(budget > 0.0) {
            return Err(Error::InvalidArgument(format!("budget must be positive, got {budget}")));
        }
        Ok(EnvState {
            point_index,
            revealed: FeatureSet::empty(self.n_features()),
            accrued_cost: 0.0,
            budget,
            done: false,
        })
    }

    pub fn can_reveal(&self, s: &EnvState, f: usize) -> bool {
        f < self.n_features() && affordable(&s.revealed, s.accrued_cost, s.budget, self.schedule.cost(f), f)
    }

    /// Bit `i < n` is set when feature `i` can be revealed; bit `n`
    /// (terminate) is always set.
    pub fn mask(&self, s: &EnvState) -> Vec<bool> {
        let n = self.n_features();
        (0..n).map(|f| self.can_reveal(s, f)).chain(std::iter::once(true)).collect()
    }

    /// True when no unrevealed feature fits in the remaining budget.
    pub fn is_terminal(&self, s: &EnvState) -> bool {
        !(0..self.n_features()).any(|f| self.can_reveal(s, f))
    }

    /// Multi-hot revealed vector followed by the accrued cost.
    pub fn encode(&self, s: &EnvState) -> Vec<f64> {
        encode(&s.revealed, s.accrued_cost)
    }

    pub fn score(&self, s: &EnvState) -> f64 {
        self.clustering.score(&s.revealed, self.point(s))
    }

    pub fn step(&self, s: &EnvState, action: Action) -> Result<StepResult> {
        if s.done {
            return Err(Error::EpisodeFinished);
        }
        match action {
            Action::Terminate => {
                let mut next = s.clone();
                next.done = true;
                Ok(StepResult { reward: -self.score(s), next_state: next, done: true })
            }
            Action::Reveal(f) => {
                if f >= self.n_features() {
                    return Err(Error::InvalidAction(format!("feature {f} does not exist")));
                }
                if s.revealed.contains(f) {
                    return Err(Error::InvalidAction(format!("feature {f} is already revealed")));
                }
                let cost = self.schedule.cost(f);
                if !self.can_reveal(s, f) {
                    return Err(Error::InvalidAction(format!(
                        "feature {f} costs {cost}, only {} of the budget left",
                        s.remaining_budget()
                    )));
                }
                let mut next = s.clone();
                next.revealed.insert(f);
                if let Some(group) = self.schedule.group_of(f) {
                    for &g in group {
                        next.revealed.insert(g);
                    }
                }
                next.accrued_cost += cost;
                let mut reward = -self.alpha * cost;
                if self.is_terminal(&next) {
                    reward -= self.score(&next);
                    next.done = true;
                }
                let done = next.done;
                Ok(StepResult { next_state: next, reward, done })
            }
        }
    }
}

pub fn encode(revealed: &FeatureSet, accrued_cost: f64) -> Vec<f64> {
    revealed
        .as_mask()
        .iter()
        .map(|&m| if m { 1.0 } else { 0.0 })
        .chain(std::iter::once(accrued_cost))
        .collect()
}
