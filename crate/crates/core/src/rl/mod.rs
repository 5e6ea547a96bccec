//! Demonstration datasets, behavior cloning and TD3+BC on a 2D reach task.
//!
//! The actor loss is `λ·E‖π(s) − a‖² − (1−λ)·E[Q₁(s, π(s))]`, with the BC
//! expectation over demo transitions and the Q expectation over the whole
//! mixed batch.
//!
//! Transitions and datasets carry actions in environment units. The
//! networks work in normalized units (`a / a_max`, so `[-1, 1]` per
//! dimension): the policy outputs a normalized action and the critic takes
//! one as input.

pub mod net;
pub mod plot;

use std::io::Write as _;

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::lifting::{sample_trajectory, TrajectoryDistribution, WaypointGaussian};
pub use net::{decode_checkpoint, encode_checkpoint, Adam, CheckpointError, Grads, Mlp, OutputKind};

pub const STATE_DIM: usize = 2;
pub const ACTION_DIM: usize = 2;
pub const HIDDEN: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum RlError {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("training diverged at step {step}: non-finite parameters")]
    TrainingDiverged { step: usize },
    #[error("demo dataset changed during training ({before} -> {after})")]
    DemoMutated { before: String, after: String },
    #[error("demo file line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Point reach task in `[-bound, bound]²` with a terminal sparse reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyEnv {
    pub goal: [f64; 2],
    pub goal_radius: f64,
    pub horizon: usize,
    pub a_max: f64,
    pub bound: f64,
    /// Resets are uniform in the square `start_center ± start_half_width`.
    pub start_center: [f64; 2],
    pub start_half_width: f64,
}

impl Default for ToyEnv {
    fn default() -> Self {
        ToyEnv {
            goal: [0.0, 0.0],
            goal_radius: 0.05,
            horizon: 50,
            a_max: 0.1,
            bound: 1.0,
            start_center: [-0.5, 0.0],
            start_half_width: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvStep {
    pub next: [f64; 2],
    pub reward: f64,
    pub done: bool,
}

impl ToyEnv {
    pub fn validate(&self) -> Result<(), RlError> {
        let ok = self.goal_radius > 0.0
            && self.horizon > 0
            && self.a_max > 0.0
            && self.bound > 0.0
            && self.start_half_width >= 0.0
            && self.goal.iter().chain(&self.start_center).all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(RlError::Validation(format!("invalid environment {self:?}")))
        }
    }

    pub fn clamp_action(&self, a: [f64; 2]) -> [f64; 2] {
        a.map(|v| v.clamp(-self.a_max, self.a_max))
    }

    pub fn reached(&self, s: &[f64; 2]) -> bool {
        ((s[0] - self.goal[0]).powi(2) + (s[1] - self.goal[1]).powi(2)).sqrt() <= self.goal_radius
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let w = self.start_half_width;
        let s = [0, 1].map(|i| self.start_center[i] + if w > 0.0 { rng.random_range(-w..=w) } else { 0.0 });
        s.map(|v| v.clamp(-self.bound, self.bound))
    }

    /// `t` is the 1-based index of this step within the episode.
    pub fn step(&self, state: [f64; 2], action: [f64; 2], t: usize) -> EnvStep {
        let a = self.clamp_action(action);
        let next = [0, 1].map(|i| (state[i] + a[i]).clamp(-self.bound, self.bound));
        let hit = self.reached(&next);
        EnvStep { next, reward: if hit { 1.0 } else { 0.0 }, done: hit || t >= self.horizon }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

impl Transition {
    fn validate(&self) -> Result<(), String> {
        if self.state.len() != STATE_DIM || self.next_state.len() != STATE_DIM || self.action.len() != ACTION_DIM {
            return Err("state and action must be 2-vectors".into());
        }
        let all = self.state.iter().chain(&self.action).chain(&self.next_state).chain([&self.reward]);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err("non-finite entry".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoSource {
    pub seed: u64,
    pub n_rollouts: usize,
    pub distribution_digest: String,
    /// Number of actions clamped to `a_max` while building the dataset.
    pub clamped_actions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoDataset {
    pub transitions: Vec<Transition>,
    pub source: DemoSource,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DemoHeader {
    source: DemoSource,
}

impl DemoDataset {
    pub fn empty() -> Self {
        DemoDataset {
            transitions: Vec::new(),
            source: DemoSource { seed: 0, n_rollouts: 0, distribution_digest: String::new(), clamped_actions: 0 },
        }
    }

    /// First line `{"source": …}`, then one transition per line.
    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        serde_json::to_writer(&mut out, &DemoHeader { source: self.source.clone() }).unwrap();
        out.push(b'\n');
        for t in &self.transitions {
            serde_json::to_writer(&mut out, t).unwrap();
            out.push(b'\n');
        }
        out
    }

    pub fn from_jsonl(bytes: &[u8]) -> Result<Self, RlError> {
        let text = std::str::from_utf8(bytes).map_err(|e| RlError::Parse { line: 0, message: e.to_string() })?;
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(RlError::Parse { line: 1, message: "missing source header".into() })?;
        let header: DemoHeader =
            serde_json::from_str(first).map_err(|e| RlError::Parse { line: 1, message: e.to_string() })?;
        let mut transitions = Vec::new();
        for (i, line) in lines {
            let t: Transition =
                serde_json::from_str(line).map_err(|e| RlError::Parse { line: i + 1, message: e.to_string() })?;
            t.validate().map_err(|message| RlError::Parse { line: i + 1, message })?;
            transitions.push(t);
        }
        Ok(DemoDataset { transitions, source: header.source })
    }

    pub fn digest(&self) -> String {
        sha256_hex(&self.to_jsonl())
    }
}

/// Distribution along a straight line in the env plane (z = 0) with
/// isotropic standard deviation `std` on every waypoint.
pub fn line_distribution(from: [f64; 2], to: [f64; 2], horizon: usize, std: f64) -> TrajectoryDistribution {
    let waypoints = (0..horizon)
        .map(|i| {
            let f = if horizon == 1 { 0.0 } else { i as f64 / (horizon - 1) as f64 };
            WaypointGaussian {
                t: i + 1,
                mu: Vector3::new(from[0] + f * (to[0] - from[0]), from[1] + f * (to[1] - from[1]), 0.0),
                sigma: Matrix3::identity() * (std * std),
                n_samples: 0,
            }
        })
        .collect();
    TrajectoryDistribution::new(waypoints).expect("line distribution is valid")
}

/// Rolls out `n_rollouts` sampled trajectories, projected to the env plane
/// by dropping z. Every rollout contributes `H − 1` transitions.
pub fn build_demo_dataset(
    dist: &TrajectoryDistribution,
    env: &ToyEnv,
    n_rollouts: usize,
    seed: u64,
) -> Result<DemoDataset, RlError> {
    env.validate()?;
    let h = dist.horizon();
    if h < 2 {
        return Err(RlError::Validation("distribution needs at least 2 waypoints".into()));
    }
    if h > env.horizon + 1 {
        return Err(RlError::Validation(format!("distribution horizon {h} exceeds env horizon {}", env.horizon)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clamped = 0;
    let mut transitions = Vec::with_capacity(n_rollouts * (h - 1));
    for _ in 0..n_rollouts {
        let traj = sample_trajectory(dist, &mut rng);
        let states: Vec<[f64; 2]> = traj.iter().map(|p| [p.x, p.y]).collect();
        let mut s = states[0].map(|v| v.clamp(-env.bound, env.bound));
        for (i, target) in states.iter().enumerate().skip(1) {
            let raw = [target[0] - s[0], target[1] - s[1]];
            let a = env.clamp_action(raw);
            if a != raw {
                clamped += 1;
            }
            let step = env.step(s, a, i);
            transitions.push(Transition {
                state: s.to_vec(),
                action: a.to_vec(),
                reward: step.reward,
                next_state: step.next.to_vec(),
                done: step.reward > 0.0 || i == h - 1,
            });
            s = step.next;
        }
    }
    Ok(DemoDataset {
        transitions,
        source: DemoSource {
            seed,
            n_rollouts,
            distribution_digest: sha256_hex(&dist.to_json()),
            clamped_actions: clamped,
        },
    })
}

/// Policy with outputs in normalized action units.
pub fn new_policy<R: Rng + ?Sized>(rng: &mut R) -> Mlp {
    Mlp::new(&[STATE_DIM, HIDDEN, HIDDEN, ACTION_DIM], OutputKind::TanhScaled(1.0), rng)
}

/// Copy of `t` with its action divided by `a_max`.
pub fn normalize_transition(t: &Transition, a_max: f64) -> Transition {
    Transition { action: t.action.iter().map(|a| a / a_max).collect(), ..t.clone() }
}

pub fn new_critic<R: Rng + ?Sized>(rng: &mut R) -> Mlp {
    Mlp::new(&[STATE_DIM + ACTION_DIM, HIDDEN, HIDDEN, 1], OutputKind::Linear, rng)
}

fn columns<'a>(rows: usize, vs: impl ExactSizeIterator<Item = &'a [f64]>) -> DMatrix<f64> {
    let n = vs.len();
    let mut m = DMatrix::zeros(rows, n);
    for (j, v) in vs.enumerate() {
        m.column_mut(j).copy_from_slice(v);
    }
    m
}

fn states(batch: &[&Transition]) -> DMatrix<f64> {
    columns(STATE_DIM, batch.iter().map(|t| t.state.as_slice()))
}

fn actions(batch: &[&Transition]) -> DMatrix<f64> {
    columns(ACTION_DIM, batch.iter().map(|t| t.action.as_slice()))
}

fn stack(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    m.rows_mut(0, top.nrows()).copy_from(top);
    m.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    m
}

fn zero_grads(net: &Mlp) -> Grads {
    Grads {
        layers: net
            .layers
            .iter()
            .map(|l| net::Layer { w: DMatrix::zeros(l.w.nrows(), l.w.ncols()), b: nalgebra::DVector::zeros(l.b.len()) })
            .collect(),
    }
}

/// Batch-mean `‖π(s) − a‖²` and its gradient.
pub fn bc_loss(policy: &Mlp, batch: &[&Transition]) -> (f64, Grads) {
    let cache = policy.forward_cached(&states(batch));
    let diff = &cache.out - actions(batch);
    let n = batch.len() as f64;
    let loss = diff.norm_squared() / n;
    let (g, _) = policy.backward(&cache, &(diff * (2.0 / n)));
    (loss, g)
}

/// `λ·mean_bc‖π(s) − a‖² − (1−λ)·mean_q Q₁(s, π(s))` and its gradient with
/// respect to the policy parameters.
pub fn actor_loss_split(
    policy: &Mlp,
    q1: &Mlp,
    bc_batch: &[&Transition],
    q_batch: &[&Transition],
    lambda: f64,
) -> (f64, Grads) {
    let mut grads = zero_grads(policy);
    let mut bc = 0.0;
    if !bc_batch.is_empty() {
        let (l, mut g) = bc_loss(policy, bc_batch);
        bc = l;
        for layer in &mut g.layers {
            layer.w *= lambda;
            layer.b *= lambda;
        }
        grads.add_assign(&g);
    }
    let mut q_mean = 0.0;
    if !q_batch.is_empty() {
        let s = states(q_batch);
        let pc = policy.forward_cached(&s);
        let x = stack(&s, &pc.out);
        let qc = q1.forward_cached(&x);
        let n = q_batch.len() as f64;
        q_mean = qc.out.sum() / n;
        let dq = DMatrix::from_element(1, q_batch.len(), -(1.0 - lambda) / n);
        let (_, dx) = q1.backward(&qc, &dq);
        let da = dx.rows(STATE_DIM, ACTION_DIM).into_owned();
        let (g, _) = policy.backward(&pc, &da);
        grads.add_assign(&g);
    }
    (lambda * bc - (1.0 - lambda) * q_mean, grads)
}

/// Actor loss with both expectations over the same batch.
pub fn actor_loss(policy: &Mlp, q1: &Mlp, batch: &[&Transition], lambda: f64) -> (f64, Grads) {
    actor_loss_split(policy, q1, batch, batch, lambda)
}

/// Batch-mean `(Q(s,a) − y)²` and its gradient.
pub fn critic_loss(q: &Mlp, batch: &[&Transition], y: &[f64]) -> (f64, Grads) {
    let x = stack(&states(batch), &actions(batch));
    let cache = q.forward_cached(&x);
    let n = batch.len() as f64;
    let diff = DMatrix::from_fn(1, batch.len(), |_, j| cache.out[(0, j)] - y[j]);
    let loss = diff.norm_squared() / n;
    let (g, _) = q.backward(&cache, &(diff * (2.0 / n)));
    (loss, g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BcConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        BcConfig { epochs: 200, batch_size: 64, lr: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct BcResult {
    pub policy: Mlp,
    /// Full-dataset loss after each epoch. An epoch that would raise it is
    /// rolled back and Adam restarted at half the learning rate, so this never increases.
    pub losses: Vec<f64>,
}

/// Mini-batch Adam on `‖π(s) − a/a_max‖²`.
pub fn bc_pretrain(policy: &Mlp, data: &DemoDataset, a_max: f64, config: &BcConfig) -> Result<BcResult, RlError> {
    if config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(RlError::Validation("bc batch_size must be positive and lr > 0".into()));
    }
    let mut policy = policy.clone();
    if config.epochs == 0 {
        return Ok(BcResult { policy, losses: Vec::new() });
    }
    if data.transitions.is_empty() {
        return Err(RlError::Validation("behavior cloning needs a nonempty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&policy, config.lr);
    let normalized: Vec<Transition> = data.transitions.iter().map(|t| normalize_transition(t, a_max)).collect();
    let all: Vec<&Transition> = normalized.iter().collect();
    let mut order: Vec<usize> = (0..all.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    let mut current = bc_loss(&policy, &all).0;
    for _ in 0..config.epochs {
        let snapshot = policy.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Transition> = chunk.iter().map(|&i| all[i]).collect();
            let (_, g) = bc_loss(&policy, &batch);
            adam.step(&mut policy, &g);
        }
        let loss = bc_loss(&policy, &all).0;
        if loss <= current {
            current = loss;
        } else {
            // Reject the epoch; restart the optimizer with a smaller step.
            policy = snapshot;
            adam = Adam::new(&policy, adam.lr * 0.5);
        }
        losses.push(current);
    }
    Ok(BcResult { policy, losses })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Td3BcConfig {
    pub lambda: f64,
    pub gamma: f64,
    /// Polyak rate for target networks.
    pub tau: f64,
    pub policy_delay: usize,
    /// Critic-only updates before the first actor update.
    pub actor_warmup: usize,
    /// Target policy smoothing noise std, normalized units.
    pub target_noise: f64,
    pub noise_clip: f64,
    /// Exploration noise std during env interaction, normalized units.
    pub expl_noise: f64,
    pub batch_size: usize,
    /// Fraction of each batch drawn from the demo dataset.
    pub demo_fraction: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub total_steps: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for Td3BcConfig {
    fn default() -> Self {
        Td3BcConfig {
            lambda: 0.4,
            gamma: 0.99,
            tau: 0.005,
            policy_delay: 2,
            actor_warmup: 0,
            target_noise: 0.2,
            noise_clip: 0.5,
            expl_noise: 0.1,
            batch_size: 64,
            demo_fraction: 0.5,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            total_steps: 40_000,
            eval_interval: 2_000,
            eval_episodes: 20,
            seed: 0,
        }
    }
}

impl Td3BcConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let ok = (0.0..=1.0).contains(&self.lambda)
            && self.gamma > 0.0
            && self.gamma <= 1.0
            && (0.0..=1.0).contains(&self.tau)
            && self.policy_delay >= 1
            && self.target_noise >= 0.0
            && self.noise_clip >= 0.0
            && self.expl_noise >= 0.0
            && self.batch_size >= 1
            && (0.0..=1.0).contains(&self.demo_fraction)
            && self.actor_lr > 0.0
            && self.critic_lr > 0.0
            && self.eval_interval >= 1
            && self.eval_episodes >= 1;
        if ok {
            Ok(())
        } else {
            Err(RlError::Validation(format!("invalid TD3+BC config {self:?}")))
        }
    }
}

/// Target networks `π'`, `Q₁'`, `Q₂'`.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub policy: Mlp,
    pub q1: Mlp,
    pub q2: Mlp,
}

/// `y = r + γ·(1−done)·min(Q₁', Q₂')(s', clamp(π'(s') + clip(ε)))`.
pub fn td_targets<R: Rng + ?Sized>(
    targets: &Targets,
    batch: &[&Transition],
    config: &Td3BcConfig,
    rng: &mut R,
) -> Vec<f64> {
    let s2 = columns(STATE_DIM, batch.iter().map(|t| t.next_state.as_slice()));
    let mut a2 = targets.policy.forward(&s2);
    if config.target_noise > 0.0 {
        let normal = Normal::new(0.0, config.target_noise).unwrap();
        for v in a2.iter_mut() {
            let eps: f64 = normal.sample(rng);
            *v = (*v + eps.clamp(-config.noise_clip, config.noise_clip)).clamp(-1.0, 1.0);
        }
    }
    let x = stack(&s2, &a2);
    let q1 = targets.q1.forward(&x);
    let q2 = targets.q2.forward(&x);
    batch
        .iter()
        .enumerate()
        .map(|(j, t)| {
            let not_done = if t.done { 0.0 } else { 1.0 };
            t.reward + config.gamma * not_done * q1[(0, j)].min(q2[(0, j)])
        })
        .collect()
}

pub struct Critics {
    pub q1: Mlp,
    pub q2: Mlp,
    pub opt1: Adam,
    pub opt2: Adam,
}

/// One gradient step of both critics towards the shared TD target. Returns
/// the mean of the two critic losses.
pub fn critic_update<R: Rng + ?Sized>(
    critics: &mut Critics,
    targets: &Targets,
    batch: &[&Transition],
    config: &Td3BcConfig,
    rng: &mut R,
) -> f64 {
    let y = td_targets(targets, batch, config, rng);
    let (l1, g1) = critic_loss(&critics.q1, batch, &y);
    let (l2, g2) = critic_loss(&critics.q2, batch, &y);
    critics.opt1.step(&mut critics.q1, &g1);
    critics.opt2.step(&mut critics.q2, &g2);
    0.5 * (l1 + l2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub success_rate: f64,
    /// Mean losses over updates since the previous point; NaN if none
    /// (`null` in JSON).
    #[serde(with = "nan_as_null")]
    pub actor_loss: f64,
    #[serde(with = "nan_as_null")]
    pub critic_loss: f64,
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_f64(*x)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

pub fn curve_to_csv(curve: &[CurvePoint]) -> String {
    let mut out = Vec::new();
    writeln!(out, "step,success_rate,actor_loss,critic_loss").unwrap();
    for p in curve {
        writeln!(out, "{},{},{},{}", p.step, p.success_rate, p.actor_loss, p.critic_loss).unwrap();
    }
    String::from_utf8(out).unwrap()
}

pub fn curve_from_csv(text: &str) -> Result<Vec<CurvePoint>, RlError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "step,success_rate,actor_loss,critic_loss")) => {}
        _ => return Err(RlError::Parse { line: 1, message: "expected curve CSV header".into() }),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let err = |m: String| RlError::Parse { line: i + 1, message: m };
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(err(format!("expected 4 fields, got {}", f.len())));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
            Ok(CurvePoint {
                step: f[0].trim().parse().map_err(|e| err(format!("step: {e}")))?,
                success_rate: num(f[1])?,
                actor_loss: num(f[2])?,
                critic_loss: num(f[3])?,
            })
        })
        .collect()
}

const EVAL_SALT: u64 = 0x5eed_e7a1;

/// Fraction of `n_episodes` greedy rollouts that reach the goal. Start states
/// depend only on `seed`.
pub fn evaluate_with(env: &ToyEnv, n_episodes: usize, seed: u64, policy: impl Fn(&[f64; 2]) -> [f64; 2]) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut wins = 0;
    for _ in 0..n_episodes {
        let mut s = env.reset(&mut rng);
        for t in 1..=env.horizon {
            let step = env.step(s, policy(&s), t);
            s = step.next;
            if step.reward > 0.0 {
                wins += 1;
            }
            if step.done {
                break;
            }
        }
    }
    wins as f64 / n_episodes.max(1) as f64
}

/// Greedy action in environment units.
pub fn policy_action(policy: &Mlp, s: &[f64; 2], a_max: f64) -> [f64; 2] {
    let out = policy.forward(&DMatrix::from_column_slice(STATE_DIM, 1, s));
    [out[0] * a_max, out[1] * a_max]
}

pub fn evaluate_policy(policy: &Mlp, env: &ToyEnv, n_episodes: usize, seed: u64) -> f64 {
    evaluate_with(env, n_episodes, seed, |s| policy_action(policy, s, env.a_max))
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub policy: Mlp,
    pub q1: Mlp,
    pub q2: Mlp,
    pub curve: Vec<CurvePoint>,
    pub demo_digest: String,
}

impl TrainReport {
    pub fn best_success(&self) -> f64 {
        self.curve.iter().map(|p| p.success_rate).fold(0.0, f64::max)
    }

    pub fn final_success(&self) -> f64 {
        self.curve.last().map(|p| p.success_rate).unwrap_or(0.0)
    }
}

fn buffer_digest(buf: &[Transition]) -> String {
    let mut bytes = Vec::new();
    for t in buf {
        serde_json::to_writer(&mut bytes, t).unwrap();
        bytes.push(b'\n');
    }
    sha256_hex(&bytes)
}

/// TD3+BC from `init_policy`. The demo transitions seed the replay buffer
/// and stay in a separate read-only buffer that supplies the BC half of
/// every batch. With an empty demo set this is plain TD3 (the BC term
/// vanishes).
pub fn td3bc_train(
    env: &ToyEnv,
    demo: &DemoDataset,
    init_policy: &Mlp,
    config: &Td3BcConfig,
) -> Result<TrainReport, RlError> {
    env.validate()?;
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let eval_seed = config.seed ^ EVAL_SALT;
    for (i, t) in demo.transitions.iter().enumerate() {
        t.validate().map_err(|m| RlError::Validation(format!("demo transition {i}: {m}")))?;
    }
    let demo_buf: Vec<Transition> = demo.transitions.iter().map(|t| normalize_transition(t, env.a_max)).collect();
    let buf_digest = buffer_digest(&demo_buf);
    let demo_digest = demo.digest();

    let mut policy = init_policy.clone();
    let q1 = new_critic(&mut rng);
    let q2 = new_critic(&mut rng);
    let mut targets = Targets { policy: policy.clone(), q1: q1.clone(), q2: q2.clone() };
    let mut critics = Critics { opt1: Adam::new(&q1, config.critic_lr), opt2: Adam::new(&q2, config.critic_lr), q1, q2 };
    let mut actor_opt = Adam::new(&policy, config.actor_lr);

    let mut replay: Vec<Transition> = Vec::with_capacity(demo_buf.len() + config.total_steps);
    replay.extend(demo_buf.iter().cloned());
    let n_demo = if demo_buf.is_empty() { 0 } else { (config.batch_size as f64 * config.demo_fraction).round() as usize };
    let n_replay = config.batch_size - n_demo;
    let expl = (config.expl_noise > 0.0).then(|| Normal::new(0.0, config.expl_noise).unwrap());

    let mut curve = vec![CurvePoint {
        step: 0,
        success_rate: evaluate_policy(&policy, env, config.eval_episodes, eval_seed),
        actor_loss: f64::NAN,
        critic_loss: f64::NAN,
    }];
    let (mut a_sum, mut a_n, mut c_sum, mut c_n) = (0.0, 0usize, 0.0, 0usize);
    let mut state = env.reset(&mut rng);
    let mut ep_t = 0;

    for step in 1..=config.total_steps {
        let mut a = policy_action(&policy, &state, 1.0);
        if let Some(n) = &expl {
            for v in &mut a {
                *v = (*v + n.sample(&mut rng)).clamp(-1.0, 1.0);
            }
        }
        ep_t += 1;
        let r = env.step(state, a.map(|v| v * env.a_max), ep_t);
        replay.push(Transition {
            state: state.to_vec(),
            action: a.to_vec(),
            reward: r.reward,
            next_state: r.next.to_vec(),
            done: r.done,
        });
        if r.done {
            state = env.reset(&mut rng);
            ep_t = 0;
        } else {
            state = r.next;
        }

        if replay.len() >= config.batch_size {
            let mut batch: Vec<&Transition> = Vec::with_capacity(config.batch_size);
            for _ in 0..n_demo {
                batch.push(&demo_buf[rng.random_range(0..demo_buf.len())]);
            }
            for _ in 0..n_replay {
                batch.push(&replay[rng.random_range(0..replay.len())]);
            }
            c_sum += critic_update(&mut critics, &targets, &batch, config, &mut rng);
            c_n += 1;
            if step > config.actor_warmup && step % config.policy_delay == 0 {
                let (l, g) = actor_loss_split(&policy, &critics.q1, &batch[..n_demo], &batch, config.lambda);
                actor_opt.step(&mut policy, &g);
                a_sum += l;
                a_n += 1;
            }
            targets.policy.polyak_from(&policy, config.tau);
            targets.q1.polyak_from(&critics.q1, config.tau);
            targets.q2.polyak_from(&critics.q2, config.tau);
            if !(policy.is_finite() && critics.q1.is_finite() && critics.q2.is_finite()) {
                return Err(RlError::TrainingDiverged { step });
            }
        }

        if step % config.eval_interval == 0 || step == config.total_steps {
            let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
            curve.push(CurvePoint {
                step,
                success_rate: evaluate_policy(&policy, env, config.eval_episodes, eval_seed),
                actor_loss: mean(a_sum, a_n),
                critic_loss: mean(c_sum, c_n),
            });
            (a_sum, a_n, c_sum, c_n) = (0.0, 0, 0.0, 0);
        }
    }

    let after = buffer_digest(&demo_buf);
    if after != buf_digest {
        return Err(RlError::DemoMutated { before: buf_digest, after });
    }
    Ok(TrainReport { policy, q1: critics.q1, q2: critics.q2, curve, demo_digest })
}

/// Which arm of the initialization comparison to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Behavior cloning on sampled demos, then TD3+BC with the demo buffer.
    Demo,
    /// TD3 from a random policy with no demos and `λ = 0`.
    Scratch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReachExperiment {
    pub env: ToyEnv,
    pub demo_rollouts: usize,
    pub demo_horizon: usize,
    /// Per-waypoint standard deviation of the demo distribution.
    pub demo_std: f64,
    pub bc: BcConfig,
    pub td3: Td3BcConfig,
}

impl Default for ReachExperiment {
    fn default() -> Self {
        ReachExperiment {
            env: ToyEnv::default(),
            demo_rollouts: 50,
            demo_horizon: 11,
            demo_std: 0.03,
            bc: BcConfig::default(),
            td3: Td3BcConfig::default(),
        }
    }
}

impl ReachExperiment {
    pub fn demo_distribution(&self) -> TrajectoryDistribution {
        line_distribution(self.env.start_center, self.env.goal, self.demo_horizon, self.demo_std)
    }

    pub fn run(&self, arm: Arm, seed: u64) -> Result<TrainReport, RlError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = new_policy(&mut rng);
        match arm {
            Arm::Demo => {
                let demo = build_demo_dataset(&self.demo_distribution(), &self.env, self.demo_rollouts, seed)?;
                self.train_on_demo(&demo, seed)
            }
            Arm::Scratch => td3bc_train(
                &self.env,
                &DemoDataset::empty(),
                &policy,
                &Td3BcConfig { seed, lambda: 0.0, ..self.td3.clone() },
            ),
        }
    }
}

impl ReachExperiment {
    /// Behavior cloning on `demo`, then TD3+BC with `demo` as the BC buffer.
    pub fn train_on_demo(&self, demo: &DemoDataset, seed: u64) -> Result<TrainReport, RlError> {
        self.env.validate()?;
        let policy = new_policy(&mut ChaCha8Rng::seed_from_u64(seed));
        let bc = bc_pretrain(&policy, demo, self.env.a_max, &BcConfig { seed, ..self.bc.clone() })?;
        td3bc_train(&self.env, demo, &bc.policy, &Td3BcConfig { seed, ..self.td3.clone() })
    }
}

/// Named output files of a training run: checkpoints, curve CSV and plot,
/// and a JSON summary.
pub fn report_artifacts(report: &TrainReport, label: &str) -> Vec<(&'static str, Vec<u8>)> {
    let mut png = Vec::new();
    plot::plot_success_curves(&[(label.to_string(), report.curve.clone())], 480, 300)
        .write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
        .expect("png encodes");
    let summary = serde_json::json!({
        "demo_digest": report.demo_digest,
        "best_success": report.best_success(),
        "final_success": report.final_success(),
        "steps": report.curve.last().map(|p| p.step).unwrap_or(0),
    });
    let mut summary = serde_json::to_vec_pretty(&summary).unwrap();
    summary.push(b'\n');
    vec![
        ("policy.ckpt", encode_checkpoint(&report.policy)),
        ("q1.ckpt", encode_checkpoint(&report.q1)),
        ("q2.ckpt", encode_checkpoint(&report.q2)),
        ("curve.csv", curve_to_csv(&report.curve).into_bytes()),
        ("curve.png", png),
        ("summary.json", summary),
    ]
}
