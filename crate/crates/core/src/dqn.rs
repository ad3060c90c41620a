//! Dueling double deep Q-network over the acquisition environment.
//!
//! The network sees only which features are revealed (a multi-hot vector) and
//! the cost spent so far, never the feature values themselves. Forward and
//! backward passes are written out by hand on top of `ndarray`.

use std::collections::VecDeque;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::env::{Action, EnvState, Environment, StepResult};
use crate::{Error, Result};

pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DqnHyper {
    pub episodes: usize,
    pub lr: f64,
    pub gamma: f64,
    pub eps0: f64,
    pub eps_decay: f64,
    pub hidden: Vec<usize>,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    /// Training steps between hard copies of the online network into the target.
    pub sync_interval: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for DqnHyper {
    fn default() -> Self {
        Self {
            episodes: 4000,
            lr: 0.01,
            gamma: 0.8,
            eps0: 1.0,
            eps_decay: 0.999,
            hidden: vec![128, 256],
            buffer_capacity: 50_000,
            batch_size: 64,
            sync_interval: 100,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
        }
    }
}

impl DqnHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_owned()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.eps_decay > 0.0 && self.eps_decay <= 1.0) {
            return bad("eps_decay must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.eps0) {
            return bad("eps0 must lie in [0, 1]");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 || self.sync_interval == 0 || self.buffer_capacity < self.batch_size {
            return bad("batch size and sync interval must be positive and the buffer must hold a batch");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layers must have at least one unit");
        }
        Ok(())
    }

    /// Exploration rate used during episode `episode` (0-based).
    pub fn epsilon(&self, episode: usize) -> f64 {
        self.eps0 * self.eps_decay.powi(episode as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `inputs x outputs`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn init(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        Self {
            weights: Array2::from_shape_fn((inputs, outputs), |_| rng.gen_range(-bound..bound)),
            bias: Array1::from_shape_fn(outputs, |_| rng.gen_range(-bound..bound)),
        }
    }

    fn zeros_like(&self) -> Self {
        Self { weights: Array2::zeros(self.weights.raw_dim()), bias: Array1::zeros(self.bias.raw_dim()) }
    }

    fn apply(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weights) + &self.bias
    }
}

/// Rectified-linear hidden layers feeding a scalar value head and an
/// advantage head; `Q = V + A - mean(A)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QNetwork {
    pub hidden: Vec<Dense>,
    pub value: Dense,
    pub advantage: Dense,
}

/// Activations kept for the backward pass.
struct Trace {
    /// Input followed by every hidden activation.
    activations: Vec<Array2<f64>>,
    value: Array2<f64>,
    q: Array2<f64>,
}

impl QNetwork {
    pub fn new(n_inputs: usize, hidden: &[usize], n_actions: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(hidden.len());
        let mut width = n_inputs;
        for &h in hidden {
            layers.push(Dense::init(width, h, &mut rng));
            width = h;
        }
        Self {
            hidden: layers,
            value: Dense::init(width, 1, &mut rng),
            advantage: Dense::init(width, n_actions, &mut rng),
        }
    }

    pub fn n_inputs(&self) -> usize {
        self.hidden.first().unwrap_or(&self.value).weights.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.advantage.bias.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            hidden: self.hidden.iter().map(Dense::zeros_like).collect(),
            value: self.value.zeros_like(),
            advantage: self.advantage.zeros_like(),
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.hidden.iter().chain([&self.value, &self.advantage])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.hidden.iter_mut().chain([&mut self.value, &mut self.advantage])
    }

    /// Every parameter in a fixed order (per layer: weights row-major, then bias).
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers().flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers_mut().flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn n_params(&self) -> usize {
        self.params().count()
    }

    fn trace(&self, x: ArrayView2<f64>) -> Trace {
        let mut activations = vec![x.to_owned()];
        for layer in &self.hidden {
            let mut z = layer.apply(&activations.last().expect("input present").view());
            z.mapv_inplace(|v| v.max(0.0));
            activations.push(z);
        }
        let top = activations.last().expect("input present").view();
        let value = self.value.apply(&top);
        let advantage = self.advantage.apply(&top);
        let mean = advantage.mean_axis(Axis(1)).expect("at least one action");
        let q = advantage - &mean.insert_axis(Axis(1)) + &value;
        Trace { activations, value, q }
    }

    /// Q-values for a batch of encoded states, one row per state.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.trace(x).q
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let x = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        self.forward_batch(x).row(0).to_vec()
    }

    /// State value `V(s)` alone.
    pub fn value(&self, x: &[f64]) -> f64 {
        let x = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        self.trace(x).value[[0, 0]]
    }

    /// Mean over the batch of `(Q(s, a) - y)^2`, and its gradient.
    pub fn loss_and_gradient(&self, states: ArrayView2<f64>, actions: &[usize], targets: &[f64]) -> (f64, QNetwork) {
        let batch = actions.len();
        let trace = self.trace(states);
        let mut d_q = Array2::<f64>::zeros(trace.q.raw_dim());
        let mut loss = 0.0;
        for (b, (&a, &y)) in actions.iter().zip(targets).enumerate() {
            let err = trace.q[[b, a]] - y;
            loss += err * err;
            d_q[[b, a]] = 2.0 * err / batch as f64;
        }
        loss /= batch as f64;

        // Dueling head: dV = sum_a dQ, dA = dQ - mean_a dQ.
        let d_value = d_q.sum_axis(Axis(1)).insert_axis(Axis(1));
        let d_adv = &d_q - &d_q.mean_axis(Axis(1)).expect("at least one action").insert_axis(Axis(1));

        let mut grad = self.zeros_like();
        let top = trace.activations.last().expect("input present");
        grad.value.weights = top.t().dot(&d_value);
        grad.value.bias = d_value.sum_axis(Axis(0));
        grad.advantage.weights = top.t().dot(&d_adv);
        grad.advantage.bias = d_adv.sum_axis(Axis(0));

        let mut d_act = d_value.dot(&self.value.weights.t()) + d_adv.dot(&self.advantage.weights.t());
        for l in (0..self.hidden.len()).rev() {
            let out = &trace.activations[l + 1];
            d_act.zip_mut_with(out, |d, &a| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            });
            let input = &trace.activations[l];
            grad.hidden[l].weights = input.t().dot(&d_act);
            grad.hidden[l].bias = d_act.sum_axis(Axis(0));
            if l > 0 {
                d_act = d_act.dot(&self.hidden[l].weights.t());
            }
        }
        (loss, grad)
    }
}

/// Index of the largest masked value; ties go to the lowest index.
pub fn masked_argmax(values: &[f64], mask: &[bool]) -> usize {
    let mut best: Option<usize> = None;
    for (i, (&v, &allowed)) in values.iter().zip(mask).enumerate() {
        if allowed && best.map_or(true, |b| v > values[b]) {
            best = Some(i);
        }
    }
    best.expect("mask allows at least one action")
}

/// Epsilon-greedy choice restricted to the mask.
pub fn act(net: &QNetwork, state: &[f64], mask: &[bool], eps: f64, rng: &mut impl Rng) -> usize {
    if rng.gen::<f64>() < eps {
        let allowed: Vec<usize> = (0..mask.len()).filter(|&a| mask[a]).collect();
        allowed[rng.gen_range(0..allowed.len())]
    } else {
        masked_argmax(&net.forward(state), mask)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub next_mask: Vec<bool>,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, items: VecDeque::with_capacity(capacity.min(1 << 16)) }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// `size` distinct transitions drawn uniformly.
    pub fn sample(&self, size: usize, rng: &mut impl Rng) -> Vec<&Transition> {
        index::sample(rng, self.items.len(), size.min(self.items.len()))
            .into_iter()
            .map(|i| &self.items[i])
            .collect()
    }
}

fn stack(rows: impl ExactSizeIterator<Item = Vec<f64>>, width: usize) -> Array2<f64> {
    let n = rows.len();
    let flat: Vec<f64> = rows.flatten().collect();
    Array2::from_shape_vec((n, width), flat).expect("rows share a width")
}

/// `y = r + gamma * Q_target(s', argmax_{a allowed} Q_online(s', a))`, or
/// `y = r` for terminal transitions.
pub fn double_target(batch: &[&Transition], net: &QNetwork, target: &QNetwork, gamma: f64) -> Vec<f64> {
    let width = net.n_inputs();
    let next = stack(batch.iter().map(|t| t.next_state.clone()), width);
    let online = net.forward_batch(next.view());
    let frozen = target.forward_batch(next.view());
    batch
        .iter()
        .enumerate()
        .map(|(b, t)| {
            if t.done || gamma == 0.0 {
                t.reward
            } else {
                let row = online.row(b);
                let a = masked_argmax(row.as_slice().expect("contiguous row"), &t.next_mask);
                t.reward + gamma * frozen[[b, a]]
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum Optimizer {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64>, t: i32 },
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(kind: OptimizerKind, n_params: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam { m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 },
        }
    }

    fn apply(&mut self, net: &mut QNetwork, grad: &QNetwork, lr: f64) {
        match self {
            Optimizer::Sgd => {
                for (p, g) in net.params_mut().zip(grad.params()) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam { m, v, t } => {
                *t += 1;
                let (c1, c2) = (1.0 - Self::BETA1.powi(*t), 1.0 - Self::BETA2.powi(*t));
                for (((p, g), m), v) in net.params_mut().zip(grad.params()).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                    *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
                }
            }
        }
    }
}

/// Online network, frozen target copy and optimizer state.
#[derive(Debug, Clone)]
pub struct Learner {
    pub online: QNetwork,
    pub target: QNetwork,
    optimizer: Optimizer,
    lr: f64,
    gamma: f64,
    steps: usize,
    sync_interval: usize,
}

impl Learner {
    pub fn new(online: QNetwork, hyper: &DqnHyper) -> Self {
        let optimizer = Optimizer::new(hyper.optimizer, online.n_params());
        Self {
            target: online.clone(),
            online,
            optimizer,
            lr: hyper.lr,
            gamma: hyper.gamma,
            steps: 0,
            sync_interval: hyper.sync_interval,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One gradient step on the online network against double-DQN targets.
    /// Returns the loss before the update; the target network is copied from
    /// the online one every `sync_interval` steps.
    pub fn train_step(&mut self, batch: &[&Transition]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let targets = double_target(batch, &self.online, &self.target, self.gamma);
        let loss = self.fit(batch, &targets)?;
        if self.steps % self.sync_interval == 0 {
            self.target = self.online.clone();
        }
        Ok(loss)
    }

    /// Gradient step towards fixed targets.
    pub fn fit(&mut self, batch: &[&Transition], targets: &[f64]) -> Result<f64> {
        let states = stack(batch.iter().map(|t| t.state.clone()), self.online.n_inputs());
        let actions: Vec<usize> = batch.iter().map(|t| t.action).collect();
        let (loss, grad) = self.online.loss_and_gradient(states.view(), &actions, targets);
        self.steps += 1;
        if !loss.is_finite() {
            return Err(Error::Divergence { step: self.steps, loss });
        }
        self.optimizer.apply(&mut self.online, &grad, self.lr);
        Ok(loss)
    }
}

/// What the training loop saw at one environment step.
#[derive(Debug)]
pub struct StepRecord<'s> {
    pub episode: usize,
    pub state: &'s EnvState,
    pub mask: &'s [bool],
    pub action: Action,
    pub result: &'s StepResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    /// First episode of the bucket.
    pub episode: usize,
    pub avg_reward: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: QNetwork,
    pub episode_returns: Vec<f64>,
    /// Average return per block of 100 episodes.
    pub trace: Vec<TraceRow>,
    pub final_epsilon: f64,
    pub env_steps: usize,
    pub train_steps: usize,
}

pub const TRACE_BUCKET: usize = 100;

pub fn train(env: &Environment<'_>, budget: f64, hyper: &DqnHyper) -> Result<TrainOutcome> {
    train_observed(env, budget, hyper, |_| {})
}

/// Epsilon-greedy training. Each episode starts from a uniformly drawn point;
/// every environment step is stored and followed by one minibatch update once
/// the buffer holds a batch. `observe` sees every step before it is stored.
pub fn train_observed(
    env: &Environment<'_>,
    budget: f64,
    hyper: &DqnHyper,
    mut observe: impl FnMut(&StepRecord<'_>),
) -> Result<TrainOutcome> {
    hyper.validate()?;
    if env.n_points() == 0 {
        return Err(Error::EmptyDataset);
    }
    let n = env.n_features();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let net = QNetwork::new(n + 1, &hyper.hidden, n + 1, rng.gen());
    let mut learner = Learner::new(net, hyper);
    let mut buffer = ReplayBuffer::new(hyper.buffer_capacity);
    let mut returns = Vec::with_capacity(hyper.episodes);
    let mut env_steps = 0;

    for episode in 0..hyper.episodes {
        let eps = hyper.epsilon(episode);
        let mut state = env.reset(rng.gen_range(0..env.n_points()), budget)?;
        let mut total = 0.0;
        while !state.done {
            let encoded = env.encode(&state);
            let mask = env.mask(&state);
            let action = Action::from_index(act(&learner.online, &encoded, &mask, eps, &mut rng), n);
            let result = env.step(&state, action)?;
            observe(&StepRecord { episode, state: &state, mask: &mask, action, result: &result });
            env_steps += 1;
            total += result.reward;
            buffer.push(Transition {
                state: encoded,
                action: action.index(n),
                reward: result.reward,
                next_state: env.encode(&result.next_state),
                next_mask: env.mask(&result.next_state),
                done: result.done,
            });
            state = result.next_state;
            if buffer.len() >= hyper.batch_size {
                let batch = buffer.sample(hyper.batch_size, &mut rng);
                learner.train_step(&batch)?;
            }
        }
        returns.push(total);
    }

    let trace = returns
        .chunks(TRACE_BUCKET)
        .enumerate()
        .map(|(i, chunk)| TraceRow {
            episode: i * TRACE_BUCKET,
            avg_reward: chunk.iter().sum::<f64>() / chunk.len() as f64,
        })
        .collect();
    Ok(TrainOutcome {
        final_epsilon: hyper.epsilon(hyper.episodes),
        train_steps: learner.steps(),
        network: learner.online,
        episode_returns: returns,
        trace,
        env_steps,
    })
}

/// Greedy action of a trained network in `state`.
pub fn greedy_action(net: &QNetwork, env: &Environment<'_>, state: &EnvState) -> Action {
    let q = net.forward(&env.encode(state));
    Action::from_index(masked_argmax(&q, &env.mask(state)), env.n_features())
}

/// A trained network with what is needed to use it elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DqnModel {
    pub version: u32,
    pub hyper: DqnHyper,
    pub budget: f64,
    pub alpha: f64,
    pub network: QNetwork,
    pub normalization: Option<Normalization>,
    /// Digest of the clustering the rewards were computed against.
    pub clustering_digest: Option<String>,
}

impl DqnModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: DqnModel = serde_json::from_str(&text)?;
        if model.version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model version {}", model.version)));
        }
        Ok(model)
    }
}

/// Writes `episode,avg_reward` rows.
pub fn write_trace_csv(trace: &[TraceRow], path: &Path) -> Result<()> {
    let mut text = String::from("episode_bucket,avg_reward\n");
    for row in trace {
        text.push_str(&format!("{},{}\n", row.episode, row.avg_reward));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
