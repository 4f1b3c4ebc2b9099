//! Multi-agent clipped-surrogate policy gradient for the leaders' game
//! under parking-capacity constraints.
//!
//! Each operator is an independent agent. It observes the last `L` reward
//! vectors posted by its opponents, samples a normalized reward from a
//! Gaussian policy, and is paid the capacity-penalized profit. Agents share
//! nothing but the public history of posted rewards.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{Game, PloProfile};
use crate::neural::{forward, sigmoid, ModelWeights};
use crate::rng::{self, Rng};

static CLAMPED_ACTIONS: AtomicUsize = AtomicUsize::new(0);

/// How many out-of-range values [`normalize_action`] and
/// [`denormalize_action`] have clamped since process start.
pub fn clamped_action_count() -> usize {
    CLAMPED_ACTIONS.load(Ordering::Relaxed)
}

fn clamp_counted(v: f64, lo: f64, hi: f64) -> f64 {
    if v < lo || v > hi || v.is_nan() {
        CLAMPED_ACTIONS.fetch_add(1, Ordering::Relaxed);
        log::debug!("clamping {v} into [{lo}, {hi}]");
        if v.is_nan() {
            return lo;
        }
    }
    v.clamp(lo, hi)
}

/// `(r - r_min) / (r_max - r_min)`.
pub fn normalize_action(r: f64, plo: &PloProfile) -> f64 {
    let r = clamp_counted(r, plo.r_min, plo.r_max);
    (r - plo.r_min) / (plo.r_max - plo.r_min)
}

/// `r_min + a (r_max - r_min)`.
pub fn denormalize_action(a: f64, plo: &PloProfile) -> f64 {
    let a = clamp_counted(a, 0.0, 1.0);
    plo.r_min + a * (plo.r_max - plo.r_min)
}

/// Penalty divisor used when a lot has no free spaces at all.
pub const ZERO_CAPACITY_GUARD: f64 = 0.1;

/// Both branches of the capacity-penalized reward, evaluated regardless of
/// which one applies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RewardBranches {
    pub arrivals: f64,
    /// `sum_i rho (g - r) f_i d_i`.
    pub within: f64,
    /// `(n / I) sum_i (g - r) f_i d_i - (iota / n) max(arrivals - n, 0)`.
    pub over: f64,
    pub penalty: f64,
}

pub fn capacity_reward_branches(game: &Game, lot: usize, r: &[f64], capacity: f64) -> Result<RewardBranches> {
    if capacity < 0.0 {
        return Err(Error::InvalidArgument(format!("capacity {capacity} is negative")));
    }
    let plo = &game.plos[lot];
    let vehicles = game.num_vehicles() as f64;
    let arrivals = game.expected_arrivals(lot, r)?;
    let within = game.plo_expected_utility(lot, r)?;
    let margin = plo.revenue - r[lot];
    let full: f64 = game.mu(lot)? * r[lot] * margin;
    let divisor = if capacity > 0.0 { capacity } else { ZERO_CAPACITY_GUARD };
    let penalty = plo.penalty / divisor * (arrivals - capacity).max(0.0);
    let over = if vehicles > 0.0 { capacity / vehicles * full } else { 0.0 } - penalty;
    Ok(RewardBranches {
        arrivals,
        within,
        over,
        penalty,
    })
}

/// Profit of `lot` under capacity `n`; `None` means unconstrained.
pub fn capacity_reward(game: &Game, lot: usize, r: &[f64], capacity: Option<f64>) -> Result<f64> {
    match capacity {
        None => game.plo_expected_utility(lot, r),
        Some(n) => {
            let b = capacity_reward_branches(game, lot, r, n)?;
            Ok(if b.arrivals <= n { b.within } else { b.over })
        }
    }
}

/// Free spaces predicted by a forecaster: `floor((1 - occupancy) * total)`,
/// clamped to `[0, total]`.
pub fn capacity_from_forecast(model: &ModelWeights, recent_window: &[f64], total_spaces: u32) -> Result<u32> {
    let (occupancy, _) = forward(model, recent_window)?;
    let free = ((1.0 - occupancy) * f64::from(total_spaces)).floor();
    Ok(free.clamp(0.0, f64::from(total_spaces)) as u32)
}

/// Per-step capacity limits `n_t^j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CapacitySchedule {
    Unconstrained,
    Fixed(Vec<f64>),
    /// One vector per step, cycled if the episode is longer.
    PerStep(Vec<Vec<f64>>),
}

impl CapacitySchedule {
    pub fn at(&self, step: usize, lot: usize) -> Option<f64> {
        match self {
            Self::Unconstrained => None,
            Self::Fixed(n) => Some(n[lot]),
            Self::PerStep(rows) => Some(rows[step % rows.len()][lot]),
        }
    }

    pub fn validate(&self, lots: usize) -> Result<()> {
        let rows: Vec<&Vec<f64>> = match self {
            Self::Unconstrained => return Ok(()),
            Self::Fixed(n) => vec![n],
            Self::PerStep(rows) if rows.is_empty() => return Err(Error::Empty("capacity schedule")),
            Self::PerStep(rows) => rows.iter().collect(),
        };
        for row in rows {
            if row.len() != lots || row.iter().any(|n| !(*n >= 0.0)) {
                return Err(Error::Config(format!(
                    "capacity row {row:?} needs {lots} non-negative entries"
                )));
            }
        }
        Ok(())
    }
}

/// What agent `j` sees: its opponents' last `L` rewards and its own revenue.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentState {
    /// Oldest first, opponents in index order within each step.
    pub history: Vec<f64>,
    pub own_revenue: f64,
    /// `t / T`, fed to the critic only.
    pub progress: f64,
}

impl AgentState {
    pub fn policy_features(&self) -> Vec<f64> {
        let mut f = self.history.clone();
        f.push(self.own_revenue);
        f
    }

    pub fn critic_features(&self) -> Vec<f64> {
        let mut f = self.policy_features();
        f.push(self.progress);
        f
    }
}

/// The last `L` joint reward vectors, padded with each leader's `r_min`.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryBuffer {
    len: usize,
    rows: VecDeque<Vec<f64>>,
}

impl HistoryBuffer {
    pub fn new(len: usize, plos: &[PloProfile]) -> Self {
        let pad: Vec<f64> = plos.iter().map(|p| p.r_min).collect();
        Self {
            len,
            rows: std::iter::repeat_n(pad, len).collect(),
        }
    }

    pub fn push(&mut self, r: Vec<f64>) {
        if self.len == 0 {
            return;
        }
        self.rows.pop_front();
        self.rows.push_back(r);
    }

    pub fn rows(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.rows.iter()
    }

    pub fn state_for(&self, lot: usize, own_revenue: f64, progress: f64) -> AgentState {
        let history = self
            .rows
            .iter()
            .flat_map(|row| row.iter().enumerate().filter(move |&(k, _)| k != lot).map(|(_, v)| *v))
            .collect();
        AgentState {
            history,
            own_revenue,
            progress,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepOutcome {
    pub rewards_posted: Vec<f64>,
    pub profits: Vec<f64>,
    pub arrivals: Vec<f64>,
    pub next_states: Vec<AgentState>,
}

/// Environment shared by all agents for one episode.
#[derive(Debug, Clone)]
pub struct Environment<'a> {
    pub game: &'a Game,
    pub schedule: &'a CapacitySchedule,
    pub horizon: usize,
    history: HistoryBuffer,
    step: usize,
}

impl<'a> Environment<'a> {
    pub fn new(game: &'a Game, schedule: &'a CapacitySchedule, horizon: usize, history_len: usize) -> Result<Self> {
        schedule.validate(game.num_plos())?;
        if horizon == 0 {
            return Err(Error::Config("episode length must be positive".into()));
        }
        Ok(Self {
            game,
            schedule,
            horizon,
            history: HistoryBuffer::new(history_len, &game.plos),
            step: 0,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn history(&self) -> &HistoryBuffer {
        &self.history
    }

    pub fn states(&self) -> Vec<AgentState> {
        let progress = self.step as f64 / self.horizon as f64;
        self.game
            .plos
            .iter()
            .enumerate()
            .map(|(j, p)| self.history.state_for(j, p.revenue, progress))
            .collect()
    }

    /// Maps normalized actions to rewards, pays every agent and advances
    /// the history by one step.
    pub fn step(&mut self, actions: &[f64]) -> Result<StepOutcome> {
        let game = self.game;
        if actions.len() != game.num_plos() {
            return Err(Error::DimensionMismatch(format!(
                "{} actions for {} agents",
                actions.len(),
                game.num_plos()
            )));
        }
        let r: Vec<f64> = actions
            .iter()
            .zip(&game.plos)
            .map(|(a, p)| denormalize_action(*a, p))
            .collect();
        let mut profits = Vec::with_capacity(r.len());
        let mut arrivals = Vec::with_capacity(r.len());
        for j in 0..r.len() {
            profits.push(capacity_reward(game, j, &r, self.schedule.at(self.step, j))?);
            arrivals.push(game.expected_arrivals(j, &r)?);
        }
        self.history.push(r.clone());
        self.step += 1;
        Ok(StepOutcome {
            rewards_posted: r,
            profits,
            arrivals,
            next_states: self.states(),
        })
    }
}

/// Fully connected layer `y = W x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Tanh MLP with a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Activations kept from a batched forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input followed by every hidden activation.
    activations: Vec<Array2<f64>>,
}

impl Mlp {
    /// `sizes = [input, hidden..., output]`. Weights uniform in
    /// `±1/sqrt(fan_in)`; the output layer is further scaled by
    /// `output_scale`.
    pub fn new(sizes: &[usize], output_scale: f64, rng: &mut Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let n = sizes.len() - 1;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(k, pair)| {
                let bound = 1.0 / (pair[0] as f64).sqrt() * if k + 1 == n { output_scale } else { 1.0 };
                let mut draw = || rng.random_range(-bound..=bound);
                Dense {
                    w: Array2::from_shape_simple_fn((pair[1], pair[0]), &mut draw),
                    b: Array1::zeros(pair[1]),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    w: Array2::zeros(l.w.raw_dim()),
                    b: Array1::zeros(l.b.len()),
                })
                .collect(),
        }
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(l.b.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.w.iter_mut().chain(l.b.iter_mut()))
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Rows of `x` are samples. Returns outputs (one row per sample).
    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        if x.ncols() != self.input_size() {
            return Err(Error::DimensionMismatch(format!(
                "MLP expects {} inputs, got {}",
                self.input_size(),
                x.ncols()
            )));
        }
        let mut activations = vec![x.clone()];
        let last = self.layers.len() - 1;
        let mut out = x.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = out.dot(&layer.w.t()) + &layer.b;
            if k == last {
                out = z;
            } else {
                out = z.mapv(f64::tanh);
                activations.push(out.clone());
            }
        }
        Ok((out, MlpCache { activations }))
    }

    /// Accumulates parameter gradients for upstream gradient `d_out`.
    pub fn backward(&self, cache: &MlpCache, d_out: &Array2<f64>, grad: &mut Mlp) {
        let mut delta = d_out.clone();
        for k in (0..self.layers.len()).rev() {
            let input = &cache.activations[k];
            grad.layers[k].w += &delta.t().dot(input);
            grad.layers[k].b += &delta.sum_axis(Axis(0));
            if k > 0 {
                let upstream = delta.dot(&self.layers[k].w);
                delta = upstream * input.mapv(|a| 1.0 - a * a);
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let row = Array2::from_shape_vec((1, x.len()), x.to_vec())
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        Ok(self.forward(&row)?.0.row(0).to_vec())
    }
}

fn stack(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), cols), flat).map_err(|e| Error::DimensionMismatch(e.to_string()))
}

/// Adam over a flat parameter sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; params],
            v: vec![0.0; params],
            t: 0,
        }
    }

    /// Descends along `grads`.
    pub fn step<'p>(&mut self, params: impl Iterator<Item = &'p mut f64>, grads: impl Iterator<Item = f64>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

pub const LOG_STD_BOUNDS: (f64, f64) = (-5.0, 1.0);

/// Scalar Gaussian policy in normalized action space: mean
/// `sigmoid(mlp(s))` and a state-independent log standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub net: Mlp,
    pub log_std: f64,
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

impl GaussianPolicy {
    pub fn new(input: usize, hidden: &[usize], log_std: f64, rng: &mut Rng) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Self {
            net: Mlp::new(&sizes, 0.01, rng),
            log_std: log_std.clamp(LOG_STD_BOUNDS.0, LOG_STD_BOUNDS.1),
        }
    }

    pub fn mean(&self, features: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.net.predict(features)?[0]))
    }

    pub fn std(&self) -> f64 {
        self.log_std.exp()
    }

    pub fn log_prob(&self, mean: f64, action: f64) -> f64 {
        let z = (action - mean) / self.std();
        -0.5 * z * z - self.log_std - LN_SQRT_2PI
    }

    /// Raw (unclamped) sample and its log-probability.
    pub fn sample(&self, features: &[f64], rng: &mut Rng) -> Result<(f64, f64)> {
        let mean = self.mean(features)?;
        let noise: f64 = StandardNormal.sample(rng);
        let action = mean + self.std() * noise;
        Ok((action, self.log_prob(mean, action)))
    }

    pub fn parameter_count(&self) -> usize {
        self.net.parameter_count() + 1
    }
}

/// One sample for the surrogate objective.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicySample {
    pub features: Vec<f64>,
    pub action: f64,
    pub old_log_prob: f64,
    pub advantage: f64,
}

/// `F(P)`: the ratio clamped into `[1 - eps, 1 + eps]`.
pub fn clip_ratio(ratio: f64, eps: f64) -> f64 {
    ratio.clamp(1.0 - eps, 1.0 + eps)
}

/// Mean clipped surrogate `min(P A, F(P) A)` over `batch` and its gradient
/// with respect to the network parameters and the log-std.
pub fn surrogate_and_grad(policy: &GaussianPolicy, batch: &[PolicySample], eps: f64) -> Result<(f64, Mlp, f64)> {
    if batch.is_empty() {
        return Err(Error::Empty("policy batch"));
    }
    let x = stack(&batch.iter().map(|s| s.features.clone()).collect::<Vec<_>>())?;
    let (z, cache) = policy.net.forward(&x)?;
    let m = batch.len() as f64;
    let var = policy.std().powi(2);
    let mut objective = 0.0;
    let mut d_z = Array2::zeros((batch.len(), 1));
    let mut d_log_std = 0.0;
    for (i, s) in batch.iter().enumerate() {
        let mean = sigmoid(z[[i, 0]]);
        let log_prob = policy.log_prob(mean, s.action);
        let ratio = (log_prob - s.old_log_prob).exp();
        let unclipped = ratio * s.advantage;
        let clipped = clip_ratio(ratio, eps) * s.advantage;
        objective += unclipped.min(clipped);
        if unclipped <= clipped {
            // d(P A)/d(log pi) = P A.
            let g = unclipped / m;
            let diff = s.action - mean;
            d_z[[i, 0]] = g * diff / var * mean * (1.0 - mean);
            d_log_std += g * (diff * diff / var - 1.0);
        }
    }
    let mut grad = policy.net.zeros_like();
    policy.net.backward(&cache, &d_z, &mut grad);
    Ok((objective / m, grad, d_log_std))
}

/// State-value critic over the flattened observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueNet {
    pub net: Mlp,
}

impl ValueNet {
    pub fn new(input: usize, hidden: &[usize], rng: &mut Rng) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Self {
            net: Mlp::new(&sizes, 1.0, rng),
        }
    }

    pub fn value(&self, features: &[f64]) -> Result<f64> {
        Ok(self.net.predict(features)?[0])
    }

    /// Mean squared error to `targets` and its gradient.
    pub fn loss_and_grad(&self, features: &[Vec<f64>], targets: &[f64]) -> Result<(f64, Mlp)> {
        if features.is_empty() || features.len() != targets.len() {
            return Err(Error::DimensionMismatch("critic batch and targets differ".into()));
        }
        let x = stack(features)?;
        let (v, cache) = self.net.forward(&x)?;
        let m = targets.len() as f64;
        let mut d = Array2::zeros((targets.len(), 1));
        let mut loss = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let e = v[[i, 0]] - t;
            loss += e * e;
            d[[i, 0]] = 2.0 * e / m;
        }
        let mut grad = self.net.zeros_like();
        self.net.backward(&cache, &d, &mut grad);
        Ok((loss / m, grad))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryStep {
    pub state: AgentState,
    /// Raw sample; the environment receives it clamped to `[0, 1]`.
    pub action: f64,
    pub old_log_prob: f64,
    pub reward: f64,
    pub ret: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    /// Checks `ret_t = R_t + gamma ret_{t+1}` with `ret_{T+1} = 0`.
    pub fn returns_consistent(&self, gamma: f64, tol: f64) -> bool {
        let mut next = 0.0;
        self.steps.iter().rev().all(|s| {
            let ok = (s.ret - (s.reward + gamma * next)).abs() <= tol * s.ret.abs().max(1.0);
            next = s.ret;
            ok
        })
    }
}

/// Fills discounted returns and advantages `ret_t - V(S_t)`, normalizing
/// the advantages to zero mean and unit variance unless they are constant.
pub fn compute_returns_advantages(traj: &mut Trajectory, values: &[f64], gamma: f64) -> Result<()> {
    if traj.steps.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    if values.len() != traj.steps.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} values for {} steps",
            values.len(),
            traj.steps.len()
        )));
    }
    let mut running = 0.0;
    for (s, v) in traj.steps.iter_mut().zip(values).rev() {
        running = s.reward + gamma * running;
        s.ret = running;
        s.advantage = running - v;
    }
    let n = traj.steps.len() as f64;
    let mean = traj.steps.iter().map(|s| s.advantage).sum::<f64>() / n;
    let var = traj.steps.iter().map(|s| (s.advantage - mean).powi(2)).sum::<f64>() / n;
    if var > 1e-24 {
        let sd = var.sqrt();
        traj.steps.iter_mut().for_each(|s| s.advantage = (s.advantage - mean) / sd);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarlConfig {
    pub episodes: usize,
    pub horizon: usize,
    pub history_len: usize,
    pub gamma: f64,
    pub clip_eps: f64,
    pub ppo_epochs: usize,
    pub minibatch: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub init_log_std: f64,
    pub seed: u64,
}

impl Default for MarlConfig {
    fn default() -> Self {
        Self {
            episodes: 2000,
            horizon: 20,
            history_len: 5,
            gamma: 0.95,
            clip_eps: 0.1,
            ppo_epochs: 4,
            minibatch: 64,
            actor_lr: 3e-4,
            critic_lr: 1e-3,
            actor_hidden: vec![200, 50],
            critic_hidden: vec![128, 64],
            init_log_std: -1.0,
            seed: 0,
        }
    }
}

impl MarlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 || self.horizon == 0 || self.ppo_epochs == 0 || self.minibatch == 0 {
            return Err(Error::Config("episodes, horizon, ppo_epochs and minibatch must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::Config(format!(
                "gamma {} must lie in [0, 1] and clip epsilon {} in (0, 1)",
                self.gamma, self.clip_eps
            )));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// One learning operator: actor, critic, their optimizers and its own
/// random stream.
#[derive(Debug, Clone)]
pub struct Agent {
    pub policy: GaussianPolicy,
    pub value: ValueNet,
    actor_opt: Adam,
    critic_opt: Adam,
    rng: Rng,
    /// Rewards are divided by this before learning; set from the first
    /// episode.
    pub reward_scale: Option<f64>,
}

impl Agent {
    pub fn new(state_len: usize, cfg: &MarlConfig, seed: u64) -> Self {
        let mut rng = rng::seeded(seed);
        let policy = GaussianPolicy::new(state_len, &cfg.actor_hidden, cfg.init_log_std, &mut rng);
        let value = ValueNet::new(state_len + 1, &cfg.critic_hidden, &mut rng);
        Self {
            actor_opt: Adam::new(cfg.actor_lr, policy.parameter_count()),
            critic_opt: Adam::new(cfg.critic_lr, value.net.parameter_count()),
            policy,
            value,
            rng,
            reward_scale: None,
        }
    }

    pub fn act(&mut self, state: &AgentState) -> Result<(f64, f64)> {
        let features = state.policy_features();
        self.policy.sample(&features, &mut self.rng)
    }

    pub fn greedy(&self, state: &AgentState) -> Result<f64> {
        self.policy.mean(&state.policy_features())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UpdateStats {
    pub surrogate: f64,
    pub value_loss: f64,
}

/// Clipped-surrogate update of one agent from one on-policy trajectory.
pub fn ppo_update(agent: &mut Agent, traj: &Trajectory, cfg: &MarlConfig) -> Result<UpdateStats> {
    if traj.steps.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    let samples: Vec<PolicySample> = traj
        .steps
        .iter()
        .map(|s| PolicySample {
            features: s.state.policy_features(),
            action: s.action,
            old_log_prob: s.old_log_prob,
            advantage: s.advantage,
        })
        .collect();
    let critic_x: Vec<Vec<f64>> = traj.steps.iter().map(|s| s.state.critic_features()).collect();
    let targets: Vec<f64> = traj.steps.iter().map(|s| s.ret).collect();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut stats = UpdateStats {
        surrogate: 0.0,
        value_loss: 0.0,
    };
    for _ in 0..cfg.ppo_epochs {
        order.shuffle(&mut agent.rng);
        for chunk in order.chunks(cfg.minibatch) {
            let batch: Vec<PolicySample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let (obj, grad, d_log_std) = surrogate_and_grad(&agent.policy, &batch, cfg.clip_eps)?;
            // Ascent on the surrogate is descent on its negation.
            let grads = grad.params().map(|g| -g).chain(std::iter::once(-d_log_std)).collect::<Vec<_>>();
            let policy = &mut agent.policy;
            agent
                .actor_opt
                .step(policy.net.params_mut().chain(std::iter::once(&mut policy.log_std)), grads.into_iter());
            policy.log_std = policy.log_std.clamp(LOG_STD_BOUNDS.0, LOG_STD_BOUNDS.1);

            let xs: Vec<Vec<f64>> = chunk.iter().map(|&i| critic_x[i].clone()).collect();
            let ts: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
            let (loss, vgrad) = agent.value.loss_and_grad(&xs, &ts)?;
            let vg: Vec<f64> = vgrad.params().copied().collect();
            agent.critic_opt.step(agent.value.net.params_mut(), vg.into_iter());
            stats = UpdateStats {
                surrogate: obj,
                value_loss: loss,
            };
        }
    }
    Ok(stats)
}

/// Per-episode, per-agent learning-curve entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub episode: usize,
    pub agent: usize,
    pub mean_reward: f64,
    pub mean_r: f64,
    pub expected_arrivals: f64,
}

#[derive(Debug, Clone)]
pub struct MarlOutcome {
    pub agents: Vec<Agent>,
    pub curve: Vec<CurveRow>,
}

/// Deterministic rollout of the agents' mean actions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GreedyRollout {
    /// Posted rewards per step.
    pub rewards_posted: Vec<Vec<f64>>,
    pub profits: Vec<Vec<f64>>,
    pub arrivals: Vec<Vec<f64>>,
}

impl GreedyRollout {
    pub fn final_rewards(&self) -> &[f64] {
        self.rewards_posted.last().map_or(&[], Vec::as_slice)
    }

    pub fn final_profits(&self) -> &[f64] {
        self.profits.last().map_or(&[], Vec::as_slice)
    }

    pub fn final_arrivals(&self) -> &[f64] {
        self.arrivals.last().map_or(&[], Vec::as_slice)
    }
}

pub fn greedy_rollout(
    agents: &[Agent],
    game: &Game,
    schedule: &CapacitySchedule,
    cfg: &MarlConfig,
) -> Result<GreedyRollout> {
    let mut env = Environment::new(game, schedule, cfg.horizon, cfg.history_len)?;
    let mut out = GreedyRollout {
        rewards_posted: Vec::new(),
        profits: Vec::new(),
        arrivals: Vec::new(),
    };
    for _ in 0..cfg.horizon {
        let states = env.states();
        let actions = agents
            .iter()
            .zip(&states)
            .map(|(a, s)| a.greedy(s))
            .collect::<Result<Vec<_>>>()?;
        let step = env.step(&actions)?;
        out.rewards_posted.push(step.rewards_posted);
        out.profits.push(step.profits);
        out.arrivals.push(step.arrivals);
    }
    Ok(out)
}

/// Trains one agent per operator for `cfg.episodes` episodes. Agents act
/// simultaneously; each then updates from its own trajectory.
pub fn train_marl(game: &Game, schedule: &CapacitySchedule, cfg: &MarlConfig) -> Result<MarlOutcome> {
    train_marl_with(game, schedule, cfg, |_| {})
}

/// [`train_marl`] with a callback receiving each episode's curve rows.
pub fn train_marl_with(
    game: &Game,
    schedule: &CapacitySchedule,
    cfg: &MarlConfig,
    mut on_episode: impl FnMut(&[CurveRow]),
) -> Result<MarlOutcome> {
    cfg.validate()?;
    let j_count = game.num_plos();
    if j_count < 2 {
        return Err(Error::Config("multi-agent training needs at least two operators".into()));
    }
    let state_len = cfg.history_len * (j_count - 1) + 1;
    let mut agents: Vec<Agent> = (0..j_count)
        .map(|j| Agent::new(state_len, cfg, rng::derive(cfg.seed, &[j as u64])))
        .collect();
    let mut curve = Vec::with_capacity(cfg.episodes * j_count);

    for episode in 0..cfg.episodes {
        let mut env = Environment::new(game, schedule, cfg.horizon, cfg.history_len)?;
        let mut trajs = vec![Trajectory::default(); j_count];
        let mut sums = vec![(0.0, 0.0, 0.0); j_count];
        for _ in 0..cfg.horizon {
            let states = env.states();
            let mut raw = Vec::with_capacity(j_count);
            let mut log_probs = Vec::with_capacity(j_count);
            for (agent, s) in agents.iter_mut().zip(&states) {
                let (a, lp) = agent.act(s)?;
                raw.push(a);
                log_probs.push(lp);
            }
            let clamped: Vec<f64> = raw.iter().map(|a| a.clamp(0.0, 1.0)).collect();
            let out = env.step(&clamped)?;
            for j in 0..j_count {
                trajs[j].steps.push(TrajectoryStep {
                    state: states[j].clone(),
                    action: raw[j],
                    old_log_prob: log_probs[j],
                    reward: out.profits[j],
                    ret: 0.0,
                    advantage: 0.0,
                });
                sums[j].0 += out.profits[j];
                sums[j].1 += out.rewards_posted[j];
                sums[j].2 += out.arrivals[j];
            }
        }

        let stats = agents
            .par_iter_mut()
            .zip(trajs.par_iter_mut())
            .map(|(agent, traj)| {
                let scale = *agent.reward_scale.get_or_insert_with(|| {
                    let m = traj.steps.iter().map(|s| s.reward.abs()).sum::<f64>() / traj.steps.len() as f64;
                    if m > 1e-9 {
                        m
                    } else {
                        1.0
                    }
                });
                traj.steps.iter_mut().for_each(|s| s.reward /= scale);
                let values = traj
                    .steps
                    .iter()
                    .map(|s| agent.value.value(&s.state.critic_features()))
                    .collect::<Result<Vec<_>>>()?;
                compute_returns_advantages(traj, &values, cfg.gamma)?;
                ppo_update(agent, traj, cfg)
            })
            .collect::<Result<Vec<_>>>()?;

        for (j, agent) in agents.iter().enumerate() {
            let finite = agent.policy.net.params().all(|p| p.is_finite())
                && agent.policy.log_std.is_finite()
                && agent.value.net.params().all(|p| p.is_finite())
                && stats[j].value_loss.is_finite();
            if !finite {
                return Err(Error::Diverged {
                    episode,
                    detail: format!("agent {j} has non-finite parameters"),
                });
            }
        }

        let t = cfg.horizon as f64;
        let rows: Vec<CurveRow> = sums
            .iter()
            .enumerate()
            .map(|(j, (rw, r, n))| CurveRow {
                episode,
                agent: j,
                mean_reward: rw / t,
                mean_r: r / t,
                expected_arrivals: n / t,
            })
            .collect();
        on_episode(&rows);
        if episode % 100 == 0 {
            log::debug!("episode {episode}: {rows:?}");
        }
        curve.extend(rows);
    }
    Ok(MarlOutcome { agents, curve })
}

pub fn write_curve<W: Write>(out: W, rows: &[CurveRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io("learning curve", e))?;
    Ok(())
}

pub fn save_curve(path: impl AsRef<Path>, rows: &[CurveRow]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_curve(file, rows)
}
