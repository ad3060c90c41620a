//! Cost-balancing clustering tree.
//!
//! The tree is grown like ID3: every node tries evenly spaced thresholds on
//! each feature and keeps the boundary whose reduction in average distance to
//! the centroid, discounted by the scaled cost of the feature, is largest.
//! A feature already split on along the path is free from then on.
//!
//! At query time only the revealed features of a point are known. Descending
//! the tree with those features, the first boundary on an unknown feature is
//! the suggested next reveal, and the leaves still reachable are the clusters
//! the point may belong to.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::partial_distance;
use crate::data::{CostSchedule, Dataset};
use crate::env::Action;
use crate::{Error, FeatureSet, Result, COST_TOLERANCE};

/// Floor on the similarity denominator; a perfect fit scores `1 / SIMILARITY_EPSILON`.
pub const SIMILARITY_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    /// Nodes with at most this many points become leaves.
    pub tau: usize,
    /// Cost scaler in the split reward.
    pub alpha: f64,
    /// Candidate thresholds per feature and node.
    pub ell: usize,
    /// Skip features already used on the path instead of making them free.
    #[serde(default)]
    pub exclude_used_features: bool,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self { tau: 10, alpha: 1.0, ell: 20, exclude_used_features: false }
    }
}

impl TreeParams {
    pub fn validate(&self) -> Result<()> {
        if self.tau < 1 {
            return Err(Error::InvalidArgument("tau must be at least 1".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::InvalidArgument(format!("alpha must be nonnegative, got {}", self.alpha)));
        }
        if self.ell < 2 {
            return Err(Error::InvalidArgument("ell must be at least 2".into()));
        }
        Ok(())
    }
}

/// Points with `p[feature] < value` go left, the rest go right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Boundary {
    pub feature: usize,
    pub value: f64,
}

impl Boundary {
    pub fn goes_left(&self, p: &[f64]) -> bool {
        p[self.feature] < self.value
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    /// Preorder position in the tree.
    pub id: usize,
    /// Training rows that reach this node.
    pub points: Vec<usize>,
    pub centroid: Vec<f64>,
    /// Mean L2 distance from the points to the centroid.
    pub avg_dist: f64,
    pub kind: NodeKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Leaf,
    Internal {
        boundary: Boundary,
        /// Split reward of the chosen boundary.
        reward: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        matches!(self.kind, NodeKind::Leaf)
    }

    pub fn boundary(&self) -> Option<Boundary> {
        match &self.kind {
            NodeKind::Internal { boundary, .. } => Some(*boundary),
            NodeKind::Leaf => None,
        }
    }

    pub fn size(&self) -> usize {
        self.points.len()
    }

    fn children(&self) -> Option<(&Node, &Node)> {
        match &self.kind {
            NodeKind::Internal { left, right, .. } => Some((left, right)),
            NodeKind::Leaf => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbcTree {
    pub params: TreeParams,
    pub n_features: usize,
    pub n_points: usize,
    pub root: Node,
}

/// Centroid of `points` and the mean L2 distance of the points to it.
/// Empty sets have no centroid; a singleton has distance 0.
pub fn centroid_spread(train: &Dataset, points: &[usize]) -> (Vec<f64>, f64) {
    let d = train.n_features();
    let mut centroid = vec![0.0; d];
    if points.is_empty() {
        return (centroid, 0.0);
    }
    for &i in points {
        for (c, v) in centroid.iter_mut().zip(train.row(i)) {
            *c += v;
        }
    }
    let m = points.len() as f64;
    for c in centroid.iter_mut() {
        *c /= m;
    }
    let total: f64 = points
        .iter()
        .map(|&i| crate::cluster::full_distance(train.row(i), &centroid))
        .sum();
    (centroid, total / m)
}

fn partition(train: &Dataset, points: &[usize], b: Boundary) -> (Vec<usize>, Vec<usize>) {
    points.iter().partition(|&&i| b.goes_left(train.row(i)))
}

/// `delta(D) - (p_l * delta(D_l) + p_r * delta(D_r))`, or `None` when the
/// boundary leaves one side empty.
pub fn split_score(train: &Dataset, points: &[usize], b: Boundary) -> Option<f64> {
    let (_, delta) = centroid_spread(train, points);
    split_score_with(train, points, b, delta)
}

fn split_score_with(train: &Dataset, points: &[usize], b: Boundary, delta: f64) -> Option<f64> {
    let (left, right) = partition(train, points, b);
    if left.is_empty() || right.is_empty() {
        return None;
    }
    let n = points.len() as f64;
    let (_, dl) = centroid_spread(train, &left);
    let (_, dr) = centroid_spread(train, &right);
    Some(delta - (left.len() as f64 / n * dl + right.len() as f64 / n * dr))
}

fn effective_cost(schedule: &CostSchedule, feature: usize, path_used: &FeatureSet) -> f64 {
    if path_used.contains(feature) {
        0.0
    } else {
        schedule.cost(feature)
    }
}

/// Split score discounted by `1 - alpha * c(f)`; features already used on the
/// path cost nothing.
pub fn split_reward(
    train: &Dataset,
    points: &[usize],
    b: Boundary,
    schedule: &CostSchedule,
    alpha: f64,
    path_used: &FeatureSet,
) -> Option<f64> {
    let score = split_score(train, points, b)?;
    Some((1.0 - alpha * effective_cost(schedule, b.feature, path_used)) * score)
}

/// `ell` evenly spaced thresholds strictly inside `(min, max)`.
pub fn candidate_values(min: f64, max: f64, ell: usize) -> Vec<f64> {
    if !(max > min) {
        return Vec::new();
    }
    let step = (max - min) / (ell + 1) as f64;
    (1..=ell).map(|j| min + step * j as f64).collect()
}

/// All boundaries considered at a node holding `points`.
pub fn candidate_boundaries(
    train: &Dataset,
    points: &[usize],
    params: &TreeParams,
    path_used: &FeatureSet,
) -> Vec<Boundary> {
    let mut out = Vec::new();
    for feature in 0..train.n_features() {
        if params.exclude_used_features && path_used.contains(feature) {
            continue;
        }
        let (lo, hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
            let v = train.row(i)[feature];
            (lo.min(v), hi.max(v))
        });
        out.extend(candidate_values(lo, hi, params.ell).into_iter().map(|value| Boundary { feature, value }));
    }
    out
}

/// Grows a tree over every row of `train`.
pub fn build(train: &Dataset, schedule: &CostSchedule, params: TreeParams) -> Result<CbcTree> {
    params.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if schedule.n_features() != train.n_features() {
        return Err(Error::InvalidArgument(format!(
            "{} costs for {} features",
            schedule.n_features(),
            train.n_features()
        )));
    }
    let mut builder = Builder { train, schedule, params, next_id: 0 };
    let points: Vec<usize> = (0..train.n_rows()).collect();
    let root = builder.grow(points, FeatureSet::empty(train.n_features()));
    Ok(CbcTree { params, n_features: train.n_features(), n_points: train.n_rows(), root })
}

struct Builder<'a> {
    train: &'a Dataset,
    schedule: &'a CostSchedule,
    params: TreeParams,
    next_id: usize,
}

impl Builder<'_> {
    fn grow(&mut self, points: Vec<usize>, path_used: FeatureSet) -> Node {
        let id = self.next_id;
        self.next_id += 1;
        let (centroid, avg_dist) = centroid_spread(self.train, &points);

        let best = if points.len() <= self.params.tau { None } else { self.best_boundary(&points, avg_dist, &path_used) };
        let kind = match best {
            None => NodeKind::Leaf,
            Some((boundary, reward)) => {
                let (left, right) = partition(self.train, &points, boundary);
                let mut used = path_used;
                used.insert(boundary.feature);
                let left = Box::new(self.grow(left, used.clone()));
                let right = Box::new(self.grow(right, used));
                NodeKind::Internal { boundary, reward, left, right }
            }
        };
        Node { id, points, centroid, avg_dist, kind }
    }

    /// Highest positive reward, first candidate winning ties.
    fn best_boundary(&self, points: &[usize], delta: f64, path_used: &FeatureSet) -> Option<(Boundary, f64)> {
        let mut best: Option<(Boundary, f64)> = None;
        for b in candidate_boundaries(self.train, points, &self.params, path_used) {
            let Some(score) = split_score_with(self.train, points, b, delta) else { continue };
            let reward = (1.0 - self.params.alpha * effective_cost(self.schedule, b.feature, path_used)) * score;
            if reward > 0.0 && best.map_or(true, |(_, r)| reward > r) {
                best = Some((b, reward));
            }
        }
        best
    }
}

/// `[ (|D_N| / total) * sum_{q in D_N} d(p, q, known) ]^-1`, with the bracket
/// floored at [`SIMILARITY_EPSILON`].
pub fn similarity(node: &Node, train: &Dataset, p: &[f64], known: &FeatureSet, total: usize) -> f64 {
    let sum: f64 = node.points.iter().map(|&i| partial_distance(p, train.row(i), known)).sum();
    let weight = node.size() as f64 / total.max(1) as f64;
    1.0 / (weight * sum).max(SIMILARITY_EPSILON)
}

impl CbcTree {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tree: CbcTree = serde_json::from_str(&text)?;
        tree.check()?;
        Ok(tree)
    }

    fn check(&self) -> Result<()> {
        let mut seen = vec![false; self.n_points];
        for leaf in self.leaves() {
            for &i in &leaf.points {
                if i >= self.n_points || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Format(format!("leaf {} lists point {i} twice or out of range", leaf.id)));
                }
            }
        }
        for node in self.nodes() {
            if let Some(b) = node.boundary() {
                if b.feature >= self.n_features {
                    return Err(Error::Format(format!("node {} splits on feature {}", node.id, b.feature)));
                }
            }
        }
        Ok(())
    }

    /// Every node in preorder (left subtree before right).
    pub fn nodes(&self) -> Vec<&Node> {
        let mut out = Vec::new();
        let mut stack = vec![&self.root];
        while let Some(node) = stack.pop() {
            out.push(node);
            if let Some((left, right)) = node.children() {
                stack.push(right);
                stack.push(left);
            }
        }
        out
    }

    pub fn leaves(&self) -> Vec<&Node> {
        self.nodes().into_iter().filter(|n| n.is_leaf()).collect()
    }

    pub fn node(&self, id: usize) -> Option<&Node> {
        self.nodes().into_iter().find(|n| n.id == id)
    }

    pub fn depth(&self) -> usize {
        fn depth(node: &Node) -> usize {
            node.children().map_or(0, |(l, r)| 1 + depth(l).max(depth(r)))
        }
        depth(&self.root)
    }

    /// Nodes reachable when `extra` is about to be revealed: known split
    /// features are followed, splits on `extra` branch both ways, any other
    /// split stops the descent at that node. Results are in left-to-right order.
    pub fn reachable_with_feature(&self, p: &[f64], known: &FeatureSet, extra: usize) -> Vec<&Node> {
        let mut out = Vec::new();
        collect(&self.root, p, known, &|f| f == extra, &mut out);
        out
    }

    /// Nodes reachable when every unknown split feature branches both ways:
    /// the clusters `p` may belong to.
    pub fn reachable_all(&self, p: &[f64], known: &FeatureSet) -> Vec<&Node> {
        let mut out = Vec::new();
        collect(&self.root, p, known, &|_| true, &mut out);
        out
    }

    /// Sum of similarities over `reachable_with_feature`.
    pub fn expected_similarity(&self, train: &Dataset, p: &[f64], known: &FeatureSet, feature: usize) -> f64 {
        let nodes = self.reachable_with_feature(p, known, feature);
        let total = nodes.iter().map(|n| n.size()).sum();
        nodes.iter().map(|n| similarity(n, train, p, known, total)).sum()
    }

    /// The first boundary on an unknown feature met while descending with the
    /// known features, or `None` if the descent ends in a leaf.
    pub fn first_unknown_split(&self, p: &[f64], known: &FeatureSet) -> Option<usize> {
        let mut node = &self.root;
        loop {
            let (boundary, (left, right)) = (node.boundary()?, node.children()?);
            if !known.contains(boundary.feature) {
                return Some(boundary.feature);
            }
            node = if boundary.goes_left(p) { left } else { right };
        }
    }

    /// Next feature to reveal. `costs[f]` is the price of revealing `f` now.
    /// When the tree's own choice is unaffordable, the affordable unknown
    /// feature with the largest expected similarity is suggested instead.
    pub fn suggest(&self, train: &Dataset, p: &[f64], known: &FeatureSet, costs: &[f64], budget_left: f64) -> Action {
        let fits = |f: usize| !known.contains(f) && costs[f] <= budget_left + COST_TOLERANCE;
        let Some(first) = self.first_unknown_split(p, known) else { return Action::Terminate };
        if fits(first) {
            return Action::Reveal(first);
        }
        let mut best: Option<(usize, f64)> = None;
        for f in (0..self.n_features).filter(|&f| fits(f)) {
            let value = self.expected_similarity(train, p, known, f);
            if best.map_or(true, |(_, v)| value > v) {
                best = Some((f, value));
            }
        }
        best.map_or(Action::Terminate, |(f, _)| Action::Reveal(f))
    }

    /// The reachable cluster with the highest similarity; ties go to the
    /// larger cluster, then to the leftmost.
    pub fn predict_cluster(&self, train: &Dataset, p: &[f64], known: &FeatureSet) -> &Node {
        let nodes = self.reachable_all(p, known);
        let total = nodes.iter().map(|n| n.size()).sum();
        let mut best: Option<(&Node, f64)> = None;
        for node in nodes {
            let s = similarity(node, train, p, known, total);
            let better = match best {
                None => true,
                Some((b, bs)) => s > bs || (s == bs && node.size() > b.size()),
            };
            if better {
                best = Some((node, s));
            }
        }
        best.expect("the root is always reachable").0
    }

    /// Indented listing of the tree, one line per node.
    pub fn render(&self, feature_names: Option<&[String]>) -> String {
        fn walk(node: &Node, depth: usize, names: Option<&[String]>, out: &mut String) {
            let indent = "  ".repeat(depth);
            match &node.kind {
                NodeKind::Leaf => {
                    let _ = writeln!(out, "{indent}leaf #{} n={} spread={:.4}", node.id, node.size(), node.avg_dist);
                }
                NodeKind::Internal { boundary, reward, left, right } => {
                    let name = names
                        .and_then(|n| n.get(boundary.feature).cloned())
                        .unwrap_or_else(|| format!("f{}", boundary.feature));
                    let _ = writeln!(
                        out,
                        "{indent}#{} {name} < {:.4} n={} reward={:.4}",
                        node.id,
                        boundary.value,
                        node.size(),
                        reward
                    );
                    walk(left, depth + 1, names, out);
                    walk(right, depth + 1, names, out);
                }
            }
        }
        let mut out = String::new();
        walk(&self.root, 0, feature_names, &mut out);
        out
    }
}

fn collect<'t>(node: &'t Node, p: &[f64], known: &FeatureSet, branch: &dyn Fn(usize) -> bool, out: &mut Vec<&'t Node>) {
    let (Some(boundary), Some((left, right))) = (node.boundary(), node.children()) else {
        out.push(node);
        return;
    };
    if known.contains(boundary.feature) {
        let next = if boundary.goes_left(p) { left } else { right };
        collect(next, p, known, branch, out);
    } else if branch(boundary.feature) {
        collect(left, p, known, branch, out);
        collect(right, p, known, branch, out);
    } else {
        out.push(node);
    }
}
