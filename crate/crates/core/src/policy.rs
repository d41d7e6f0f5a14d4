//! Forward and backward policies over a DAG, trajectory log-probabilities,
//! score-function gradients, and trajectory sampling.
//!
//! Policies produce logits over a state's neighbors (children for the forward
//! policy, parents for the backward one) in the DAG's adjacency order. Every
//! parameter mutation gives the [`PolicySet`] a fresh version number, which
//! [`PolicyCache`] and [`Trajectory`] use to detect stale cached values.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dag::StateId;
use crate::env::Env;
use crate::error::{Error, Result};
use crate::math::log_softmax;
use crate::nn::{cosine_epsilon, Mlp};

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    fn name(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyModel {
    /// One logit per edge, laid out by the environment's offsets.
    Tabular { logits: Vec<f64> },
    /// Network over state features with one output per action slot.
    Mlp { net: Mlp },
    /// Uniform over neighbors; has no parameters.
    Uniform,
}

impl PolicyModel {
    pub fn params(&self) -> &[f64] {
        match self {
            PolicyModel::Tabular { logits } => logits,
            PolicyModel::Mlp { net } => net.params(),
            PolicyModel::Uniform => &[],
        }
    }

    fn params_mut(&mut self) -> &mut [f64] {
        match self {
            PolicyModel::Tabular { logits } => logits,
            PolicyModel::Mlp { net } => net.params_mut(),
            PolicyModel::Uniform => &mut [],
        }
    }

    pub fn num_params(&self) -> usize {
        self.params().len()
    }

    fn logits(&self, env: &Env, s: StateId, dir: Direction) -> Result<Vec<f64>> {
        let (count, offsets, slots) = match dir {
            Direction::Forward => (
                env.dag().children(s).len(),
                env.forward_offsets(),
                env.forward_slots(s),
            ),
            Direction::Backward => (
                env.dag().parents(s).len(),
                env.backward_offsets(),
                env.backward_slots(s),
            ),
        };
        if count == 0 {
            return Err(Error::NoNeighbors {
                state: s,
                direction: dir.name(),
            });
        }
        Ok(match self {
            PolicyModel::Tabular { logits } => logits[offsets[s]..offsets[s + 1]].to_vec(),
            PolicyModel::Mlp { net } => {
                let out = net.apply(&env.features(s))?;
                slots.iter().map(|&k| out[k]).collect()
            }
            PolicyModel::Uniform => vec![0.0; count],
        })
    }

    fn check(&self, env: &Env, dir: Direction) -> Result<()> {
        let (edges, slots) = match dir {
            Direction::Forward => (
                *env.forward_offsets().last().unwrap(),
                env.num_forward_slots(),
            ),
            Direction::Backward => (
                *env.backward_offsets().last().unwrap(),
                env.num_backward_slots(),
            ),
        };
        match self {
            PolicyModel::Tabular { logits } if logits.len() != edges => {
                Err(Error::DimensionMismatch {
                    expected: edges,
                    got: logits.len(),
                })
            }
            PolicyModel::Mlp { net } if net.input_dim() != env.input_dim() => {
                Err(Error::DimensionMismatch {
                    expected: env.input_dim(),
                    got: net.input_dim(),
                })
            }
            PolicyModel::Mlp { net } if net.output_dim() != slots => {
                Err(Error::DimensionMismatch {
                    expected: slots,
                    got: net.output_dim(),
                })
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackwardKind {
    Learned,
    Uniform,
}

/// Forward policy, backward policy, `log Z`, and optional hub log-flows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySet {
    forward: PolicyModel,
    backward: PolicyModel,
    log_z: f64,
    #[serde(default)]
    hub_flows: BTreeMap<StateId, f64>,
    #[serde(skip, default = "fresh_version")]
    version: u64,
}

impl PolicySet {
    pub fn new(forward: PolicyModel, backward: PolicyModel, log_z: f64) -> Self {
        Self {
            forward,
            backward,
            log_z,
            hub_flows: BTreeMap::new(),
            version: fresh_version(),
        }
    }

    /// Tabular policies with all-zero logits (uniform actions).
    pub fn tabular(env: &Env, backward: BackwardKind) -> Self {
        let fwd = PolicyModel::Tabular {
            logits: vec![0.0; *env.forward_offsets().last().unwrap()],
        };
        let bwd = match backward {
            BackwardKind::Learned => PolicyModel::Tabular {
                logits: vec![0.0; *env.backward_offsets().last().unwrap()],
            },
            BackwardKind::Uniform => PolicyModel::Uniform,
        };
        Self::new(fwd, bwd, 0.0)
    }

    /// Tabular policies with logits drawn from `U(-scale, scale)`.
    pub fn random_tabular<R: Rng + ?Sized>(
        env: &Env,
        backward: BackwardKind,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::tabular(env, backward);
        for v in p
            .forward
            .params_mut()
            .iter_mut()
            .chain(p.backward.params_mut())
        {
            *v = rng.gen_range(-scale..scale);
        }
        p
    }

    /// Untied MLP policies over the environment's state features.
    pub fn mlp<R: Rng + ?Sized>(
        env: &Env,
        hidden: &[usize],
        backward: BackwardKind,
        rng: &mut R,
    ) -> Result<Self> {
        let sizes = |out: usize| {
            let mut v = vec![env.input_dim()];
            v.extend_from_slice(hidden);
            v.push(out);
            v
        };
        let fwd = PolicyModel::Mlp {
            net: Mlp::new(&sizes(env.num_forward_slots()), rng)?,
        };
        let bwd = match backward {
            BackwardKind::Learned => PolicyModel::Mlp {
                net: Mlp::new(&sizes(env.num_backward_slots()), rng)?,
            },
            BackwardKind::Uniform => PolicyModel::Uniform,
        };
        Ok(Self::new(fwd, bwd, 0.0))
    }

    /// Checks parameter shapes against an environment.
    pub fn check_compatible(&self, env: &Env) -> Result<()> {
        self.forward.check(env, Direction::Forward)?;
        self.backward.check(env, Direction::Backward)?;
        if !self.log_z.is_finite() {
            return Err(Error::NonFinite("log_Z"));
        }
        for (&s, &f) in &self.hub_flows {
            if s >= env.num_states() {
                return Err(Error::InvalidSpec(format!("hub flow at unknown state {s}")));
            }
            if !f.is_finite() {
                return Err(Error::NonFinite("hub flow"));
            }
        }
        Ok(())
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    fn touch(&mut self) {
        self.version = fresh_version();
    }

    pub fn forward(&self) -> &PolicyModel {
        &self.forward
    }

    pub fn backward(&self) -> &PolicyModel {
        &self.backward
    }

    pub fn model(&self, dir: Direction) -> &PolicyModel {
        match dir {
            Direction::Forward => &self.forward,
            Direction::Backward => &self.backward,
        }
    }

    pub fn params_mut(&mut self, dir: Direction) -> &mut [f64] {
        self.touch();
        match dir {
            Direction::Forward => self.forward.params_mut(),
            Direction::Backward => self.backward.params_mut(),
        }
    }

    pub fn log_z(&self) -> f64 {
        self.log_z
    }

    pub fn set_log_z(&mut self, log_z: f64) {
        self.touch();
        self.log_z = log_z;
    }

    pub fn hub_flows(&self) -> &BTreeMap<StateId, f64> {
        &self.hub_flows
    }

    pub fn set_hub_flow(&mut self, s: StateId, log_flow: f64) {
        self.touch();
        self.hub_flows.insert(s, log_flow);
    }

    pub fn hub_flows_mut(&mut self) -> &mut BTreeMap<StateId, f64> {
        self.touch();
        &mut self.hub_flows
    }

    /// `log F(s)`: `log Z` at the initial state, `log R` at terminating states,
    /// the stored hub flow elsewhere.
    pub fn log_flow(&self, env: &Env, s: StateId) -> Result<f64> {
        if s == env.dag().initial() {
            Ok(self.log_z)
        } else if env.dag().is_terminating(s) {
            Ok(env.rewards().log_reward(s))
        } else {
            self.hub_flows.get(&s).copied().ok_or(Error::MissingFlow(s))
        }
    }

    pub fn logits(&self, env: &Env, s: StateId, dir: Direction) -> Result<Vec<f64>> {
        self.model(dir).logits(env, s, dir)
    }

    /// Log-probabilities over neighbors. For the forward direction, `eps` is
    /// subtracted from the exit-action logit before normalizing.
    pub fn action_logprobs(
        &self,
        env: &Env,
        s: StateId,
        dir: Direction,
        eps: f64,
    ) -> Result<Vec<f64>> {
        let mut logits = self.logits(env, s, dir)?;
        shift_exit(env, s, dir, eps, &mut logits)?;
        Ok(log_softmax(&logits))
    }

    pub fn action_distribution(
        &self,
        env: &Env,
        s: StateId,
        dir: Direction,
        eps: f64,
    ) -> Result<Vec<f64>> {
        Ok(self
            .action_logprobs(env, s, dir, eps)?
            .into_iter()
            .map(f64::exp)
            .collect())
    }
}

fn shift_exit(env: &Env, s: StateId, dir: Direction, eps: f64, logits: &mut [f64]) -> Result<()> {
    if eps != 0.0 && dir == Direction::Forward {
        match env.exit_position(s) {
            Some(pos) => logits[pos] -= eps,
            None if env.has_exit_actions() => {}
            None => return Err(Error::NoExitAction),
        }
    }
    Ok(())
}

/// Per-version memo of logits and log-probabilities at each state.
#[derive(Clone, Debug, Default)]
pub struct PolicyCache {
    version: u64,
    fwd_logits: Vec<Option<Vec<f64>>>,
    fwd_logp: Vec<Option<Vec<f64>>>,
    bwd_logp: Vec<Option<Vec<f64>>>,
}

impl PolicyCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn sync(&mut self, policy: &PolicySet, env: &Env) {
        if self.version != policy.version() || self.fwd_logp.len() != env.num_states() {
            let n = env.num_states();
            self.version = policy.version();
            self.fwd_logits = vec![None; n];
            self.fwd_logp = vec![None; n];
            self.bwd_logp = vec![None; n];
        }
    }

    pub fn forward_logits(&mut self, policy: &PolicySet, env: &Env, s: StateId) -> Result<&[f64]> {
        self.sync(policy, env);
        if self.fwd_logits[s].is_none() {
            self.fwd_logits[s] = Some(policy.logits(env, s, Direction::Forward)?);
        }
        Ok(self.fwd_logits[s].as_deref().unwrap())
    }

    pub fn logprobs(
        &mut self,
        policy: &PolicySet,
        env: &Env,
        s: StateId,
        dir: Direction,
    ) -> Result<&[f64]> {
        self.sync(policy, env);
        match dir {
            Direction::Forward => {
                if self.fwd_logp[s].is_none() {
                    let lp = log_softmax(self.forward_logits(policy, env, s)?);
                    self.fwd_logp[s] = Some(lp);
                }
                Ok(self.fwd_logp[s].as_deref().unwrap())
            }
            Direction::Backward => {
                if self.bwd_logp[s].is_none() {
                    self.bwd_logp[s] =
                        Some(log_softmax(&policy.logits(env, s, Direction::Backward)?));
                }
                Ok(self.bwd_logp[s].as_deref().unwrap())
            }
        }
    }
}

/// A complete trajectory or a segment between two states, with cached
/// log-probabilities tied to the parameter version that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<StateId>,
    /// `sum_i log P_F(s_{i+1} | s_i)`.
    pub log_pf: f64,
    /// `sum_i log P_B(s_i | s_{i+1})`.
    pub log_pb: f64,
    /// Log-probability under the policy that generated the trajectory.
    pub log_behavior: f64,
    fwd_pos: Vec<usize>,
    bwd_pos: Vec<usize>,
    version: u64,
}

impl Trajectory {
    /// Scores `states` under `policy`. Without an explicit behavior
    /// log-probability the trajectory is treated as on-policy.
    pub fn evaluate(
        policy: &PolicySet,
        env: &Env,
        cache: &mut PolicyCache,
        states: Vec<StateId>,
        log_behavior: Option<f64>,
    ) -> Result<Self> {
        let dag = env.dag();
        let mut fwd_pos = Vec::with_capacity(states.len().saturating_sub(1));
        let mut bwd_pos = Vec::with_capacity(states.len().saturating_sub(1));
        for w in states.windows(2) {
            fwd_pos.push(dag.child_position(w[0], w[1])?);
            bwd_pos.push(dag.parent_position(w[1], w[0])?);
        }
        let mut t = Self {
            states,
            log_pf: 0.0,
            log_pb: 0.0,
            log_behavior: 0.0,
            fwd_pos,
            bwd_pos,
            version: 0,
        };
        t.refresh(policy, env, cache)?;
        t.log_behavior = log_behavior.unwrap_or(t.log_pf);
        Ok(t)
    }

    /// Recomputes `log_pf` and `log_pb` under the current parameters.
    pub fn refresh(
        &mut self,
        policy: &PolicySet,
        env: &Env,
        cache: &mut PolicyCache,
    ) -> Result<()> {
        let mut lpf = 0.0;
        let mut lpb = 0.0;
        for (i, w) in self.states.windows(2).enumerate() {
            lpf += cache.logprobs(policy, env, w[0], Direction::Forward)?[self.fwd_pos[i]];
            lpb += cache.logprobs(policy, env, w[1], Direction::Backward)?[self.bwd_pos[i]];
        }
        self.log_pf = lpf;
        self.log_pb = lpb;
        self.version = policy.version();
        Ok(())
    }

    pub fn is_fresh(&self, policy: &PolicySet) -> bool {
        self.version == policy.version()
    }

    pub fn ensure_fresh(&self, policy: &PolicySet) -> Result<()> {
        if self.is_fresh(policy) {
            Ok(())
        } else {
            Err(Error::StaleTrajectory {
                cached: self.version,
                current: policy.version(),
            })
        }
    }

    pub fn first(&self) -> StateId {
        self.states[0]
    }

    pub fn last(&self) -> StateId {
        *self.states.last().unwrap()
    }

    /// Position of each step's child among its parent's children.
    pub fn forward_positions(&self) -> &[usize] {
        &self.fwd_pos
    }

    /// Position of each step's parent among its child's parents.
    pub fn backward_positions(&self) -> &[usize] {
        &self.bwd_pos
    }

    /// The sub-path `states[from..=to]`, rescored under `policy`.
    pub fn segment(
        &self,
        policy: &PolicySet,
        env: &Env,
        cache: &mut PolicyCache,
        from: usize,
        to: usize,
    ) -> Result<Trajectory> {
        Trajectory::evaluate(policy, env, cache, self.states[from..=to].to_vec(), None)
    }
}

pub fn trajectory_logprob_forward(
    policy: &PolicySet,
    env: &Env,
    states: &[StateId],
) -> Result<f64> {
    let mut total = 0.0;
    for w in states.windows(2) {
        let pos = env.dag().child_position(w[0], w[1])?;
        total += policy.action_logprobs(env, w[0], Direction::Forward, 0.0)?[pos];
    }
    Ok(total)
}

/// `log P_B(tau | last state)`.
pub fn trajectory_logprob_backward(
    policy: &PolicySet,
    env: &Env,
    states: &[StateId],
) -> Result<f64> {
    let mut total = 0.0;
    for w in states.windows(2) {
        let pos = env.dag().parent_position(w[1], w[0])?;
        total += policy.action_logprobs(env, w[1], Direction::Backward, 0.0)?[pos];
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorMode {
    OnPolicy,
    EpsilonShift,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorConfig {
    pub mode: BehaviorMode,
    #[serde(default)]
    pub eps_init: f64,
    /// Batch index at which the exit-logit shift reaches zero.
    #[serde(default)]
    pub t_max: u64,
}

impl BehaviorConfig {
    pub fn on_policy() -> Self {
        Self {
            mode: BehaviorMode::OnPolicy,
            eps_init: 0.0,
            t_max: 0,
        }
    }

    pub fn epsilon_shift(eps_init: f64, t_max: u64) -> Self {
        Self {
            mode: BehaviorMode::EpsilonShift,
            eps_init,
            t_max,
        }
    }

    pub fn validate(&self, env: &Env) -> Result<()> {
        if !(self.eps_init >= 0.0) {
            return Err(Error::InvalidSpec(format!(
                "eps_init must be >= 0, got {}",
                self.eps_init
            )));
        }
        if self.mode == BehaviorMode::EpsilonShift && !env.has_exit_actions() {
            return Err(Error::NoExitAction);
        }
        Ok(())
    }

    pub fn epsilon(&self, t: u64) -> f64 {
        match self.mode {
            BehaviorMode::OnPolicy => 0.0,
            BehaviorMode::EpsilonShift => cosine_epsilon(self.eps_init, t, self.t_max),
        }
    }

    /// Whether trajectories come from something other than `P_F` at step `t`.
    pub fn is_off_policy(&self, t: u64) -> bool {
        self.epsilon(t) != 0.0
    }
}

fn sample_index<R: Rng + ?Sized>(logp: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    logp.len() - 1
}

/// Samples a complete trajectory from the behavior policy at batch index `t`.
pub fn sample_trajectory<R: Rng + ?Sized>(
    policy: &PolicySet,
    env: &Env,
    behavior: &BehaviorConfig,
    t: u64,
    rng: &mut R,
    cache: &mut PolicyCache,
) -> Result<Trajectory> {
    behavior.validate(env)?;
    let eps = behavior.epsilon(t);
    let dag = env.dag();
    let mut s = dag.initial();
    let mut states = vec![s];
    let mut log_behavior = 0.0;
    while !dag.is_terminating(s) {
        let pos = if eps == 0.0 {
            let lp = cache.logprobs(policy, env, s, Direction::Forward)?;
            let pos = sample_index(lp, rng);
            log_behavior += lp[pos];
            pos
        } else {
            let mut logits = cache.forward_logits(policy, env, s)?.to_vec();
            shift_exit(env, s, Direction::Forward, eps, &mut logits)?;
            let lp = log_softmax(&logits);
            let pos = sample_index(&lp, rng);
            log_behavior += lp[pos];
            pos
        };
        s = dag.children(s)[pos];
        states.push(s);
    }
    Trajectory::evaluate(policy, env, cache, states, Some(log_behavior))
}

/// Gradient of every trainable quantity, laid out like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyGrad {
    pub forward: Vec<f64>,
    pub backward: Vec<f64>,
    pub log_z: f64,
    pub log_flows: BTreeMap<StateId, f64>,
}

impl PolicyGrad {
    pub fn zeros(policy: &PolicySet) -> Self {
        Self {
            forward: vec![0.0; policy.forward().num_params()],
            backward: vec![0.0; policy.backward().num_params()],
            log_z: 0.0,
            log_flows: BTreeMap::new(),
        }
    }

    pub fn add_scaled(&mut self, other: &PolicyGrad, a: f64) {
        for (x, y) in self.forward.iter_mut().zip(&other.forward) {
            *x += a * y;
        }
        for (x, y) in self.backward.iter_mut().zip(&other.backward) {
            *x += a * y;
        }
        self.log_z += a * other.log_z;
        for (&s, &g) in &other.log_flows {
            *self.log_flows.entry(s).or_insert(0.0) += a * g;
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.forward
            .iter_mut()
            .chain(self.backward.iter_mut())
            .for_each(|x| *x *= a);
        self.log_z *= a;
        self.log_flows.values_mut().for_each(|x| *x *= a);
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.forward
            .iter()
            .chain(&self.backward)
            .copied()
            .chain(std::iter::once(self.log_z))
            .chain(self.log_flows.values().copied())
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    /// Largest absolute componentwise difference.
    pub fn max_abs_diff(&self, other: &PolicyGrad) -> f64 {
        let vec_diff = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        };
        let mut m = vec_diff(&self.forward, &other.forward)
            .max(vec_diff(&self.backward, &other.backward))
            .max((self.log_z - other.log_z).abs());
        for (s, &g) in &self.log_flows {
            m = m.max((g - other.log_flows.get(s).copied().unwrap_or(0.0)).abs());
        }
        for (s, &g) in &other.log_flows {
            if !self.log_flows.contains_key(s) {
                m = m.max(g.abs());
            }
        }
        m
    }
}

/// Accumulates `sum coef * grad log P(action | state)` as upstream gradients
/// on each state's neighbor logits, then backpropagates once per state.
#[derive(Clone, Debug)]
pub struct GradAccumulator {
    fwd: Vec<Option<Vec<f64>>>,
    bwd: Vec<Option<Vec<f64>>>,
    pub log_z: f64,
    pub log_flows: BTreeMap<StateId, f64>,
}

impl GradAccumulator {
    pub fn new(env: &Env) -> Self {
        Self {
            fwd: vec![None; env.num_states()],
            bwd: vec![None; env.num_states()],
            log_z: 0.0,
            log_flows: BTreeMap::new(),
        }
    }

    /// Adds `coef * grad log P(neighbor pos | s)` in direction `dir`.
    pub fn add_step(
        &mut self,
        policy: &PolicySet,
        env: &Env,
        cache: &mut PolicyCache,
        s: StateId,
        dir: Direction,
        pos: usize,
        coef: f64,
    ) -> Result<()> {
        if matches!(policy.model(dir), PolicyModel::Uniform) {
            return Ok(());
        }
        let logp = cache.logprobs(policy, env, s, dir)?;
        if logp.len() < 2 {
            return Ok(());
        }
        let slot = match dir {
            Direction::Forward => &mut self.fwd[s],
            Direction::Backward => &mut self.bwd[s],
        };
        let up = slot.get_or_insert_with(|| vec![0.0; logp.len()]);
        for (k, (u, &lp)) in up.iter_mut().zip(logp).enumerate() {
            let indicator = if k == pos { 1.0 } else { 0.0 };
            *u += coef * (indicator - lp.exp());
        }
        Ok(())
    }

    /// Adds `coef * grad log P_F(traj)`.
    pub fn add_forward_path(
        &mut self,
        policy: &PolicySet,
        env: &Env,
        cache: &mut PolicyCache,
        traj: &Trajectory,
        coef: f64,
    ) -> Result<()> {
        if coef == 0.0 {
            return Ok(());
        }
        for (i, &pos) in traj.forward_positions().iter().enumerate() {
            self.add_step(
                policy,
                env,
                cache,
                traj.states[i],
                Direction::Forward,
                pos,
                coef,
            )?;
        }
        Ok(())
    }

    /// Adds `coef * grad log P_B(traj | last state)`.
    pub fn add_backward_path(
        &mut self,
        policy: &PolicySet,
        env: &Env,
        cache: &mut PolicyCache,
        traj: &Trajectory,
        coef: f64,
    ) -> Result<()> {
        if coef == 0.0 {
            return Ok(());
        }
        for (i, &pos) in traj.backward_positions().iter().enumerate() {
            self.add_step(
                policy,
                env,
                cache,
                traj.states[i + 1],
                Direction::Backward,
                pos,
                coef,
            )?;
        }
        Ok(())
    }

    pub fn add_log_flow(&mut self, s: StateId, g: f64) {
        *self.log_flows.entry(s).or_insert(0.0) += g;
    }

    /// Converts the accumulated logit upstreams into parameter gradients,
    /// visiting states in ascending order.
    pub fn finish(self, policy: &PolicySet, env: &Env) -> Result<PolicyGrad> {
        let forward = Self::backprop(policy.forward(), env, &self.fwd, Direction::Forward)?;
        let backward = Self::backprop(policy.backward(), env, &self.bwd, Direction::Backward)?;
        Ok(PolicyGrad {
            forward,
            backward,
            log_z: self.log_z,
            log_flows: self.log_flows,
        })
    }

    fn backprop(
        model: &PolicyModel,
        env: &Env,
        ups: &[Option<Vec<f64>>],
        dir: Direction,
    ) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; model.num_params()];
        match model {
            PolicyModel::Uniform => {}
            PolicyModel::Tabular { .. } => {
                let offsets = match dir {
                    Direction::Forward => env.forward_offsets(),
                    Direction::Backward => env.backward_offsets(),
                };
                for (s, up) in ups.iter().enumerate() {
                    if let Some(up) = up {
                        grad[offsets[s]..offsets[s + 1]].copy_from_slice(up);
                    }
                }
            }
            PolicyModel::Mlp { net } => {
                let mut full = vec![0.0; net.output_dim()];
                for (s, up) in ups.iter().enumerate() {
                    if let Some(up) = up {
                        let slots = match dir {
                            Direction::Forward => env.forward_slots(s),
                            Direction::Backward => env.backward_slots(s),
                        };
                        full.iter_mut().for_each(|v| *v = 0.0);
                        for (&k, &u) in slots.iter().zip(up) {
                            full[k] = u;
                        }
                        let trace = net.forward(&env.features(s))?;
                        net.accumulate_grad(&trace, &full, &mut grad)?;
                    }
                }
            }
        }
        Ok(grad)
    }
}

/// `grad log P_F(traj)` and `grad log P_B(traj | last)` as a pair of gradients.
pub fn trajectory_scores(
    policy: &PolicySet,
    env: &Env,
    cache: &mut PolicyCache,
    traj: &Trajectory,
) -> Result<(PolicyGrad, PolicyGrad)> {
    let mut f = GradAccumulator::new(env);
    f.add_forward_path(policy, env, cache, traj, 1.0)?;
    let mut b = GradAccumulator::new(env);
    b.add_backward_path(policy, env, cache, traj, 1.0)?;
    Ok((f.finish(policy, env)?, b.finish(policy, env)?))
}
