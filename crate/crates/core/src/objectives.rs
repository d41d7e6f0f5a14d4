//! Training objectives and their gradient estimators.
//!
//! The balance losses (TB, DB, SubTB) share one residual,
//! `log F(first) + log P_F(segment) - log F(last) - log P_B(segment | last)`,
//! with `F = Z` at the initial state and `F = R` at terminating states. The
//! variational objectives use score-function estimators with optional
//! baselines and self-normalized importance weights.

use serde::{Deserialize, Serialize};

use crate::dag::{StateId, DEFAULT_ENUMERATION_CAP};
use crate::env::Env;
use crate::error::{Error, Result};
use crate::exact::ExactDistribution;
use crate::math::logsumexp;
use crate::policy::{
    Direction, GradAccumulator, PolicyCache, PolicyGrad, PolicyModel, PolicySet, Trajectory,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PfLoss {
    #[serde(rename = "TB", alias = "tb")]
    Tb,
    #[serde(rename = "DB", alias = "db")]
    Db,
    #[serde(rename = "SubTB", alias = "subtb")]
    SubTb,
    #[serde(rename = "ReverseKL", alias = "reverse_kl")]
    ReverseKl,
    #[serde(rename = "ForwardKL", alias = "forward_kl")]
    ForwardKl,
}

impl PfLoss {
    pub fn is_balance(self) -> bool {
        matches!(self, PfLoss::Tb | PfLoss::Db | PfLoss::SubTb)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PbLoss {
    #[serde(rename = "same_as_pf")]
    SameAsPf,
    #[serde(rename = "ReverseKL", alias = "reverse_kl")]
    ReverseKl,
    #[serde(rename = "ForwardKL", alias = "forward_kl")]
    ForwardKl,
    #[serde(rename = "fixed")]
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    None,
    Local,
    Global,
}

/// Generator of an f-divergence `D_f(p || q) = E_q[f(p / q)]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FKind {
    /// `t log t`: `KL(p || q)`.
    TLogT,
    /// `-log t`: `KL(q || p)`.
    NegLog,
    /// `(log t)^2`, a pseudo-divergence.
    LogSquared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WakeSleep {
    Ws,
    ReverseWs,
}

/// Junction layers `m_0 = 0 < m_1 < ... < m_K = L` of a graded DAG.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct HubLayers(Vec<usize>);

impl HubLayers {
    pub fn new(layers: Vec<usize>) -> Result<Self> {
        if layers.len() < 2 || layers[0] != 0 {
            return Err(Error::InvalidSpec(
                "hub layers must start at 0 and have at least two entries".into(),
            ));
        }
        if layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSpec(
                "hub layers must be strictly increasing".into(),
            ));
        }
        Ok(Self(layers))
    }

    /// Every layer `0..=depth`.
    pub fn all(depth: usize) -> Self {
        Self((0..=depth).collect())
    }

    /// Checks that the last hub is the terminal layer of `env`'s graded DAG.
    pub fn check(&self, env: &Env) -> Result<()> {
        let depth = env.dag().depth()?;
        if *self.0.last().unwrap() != depth {
            return Err(Error::InvalidSpec(format!(
                "last hub layer must be the terminal layer {depth}, got {}",
                self.0.last().unwrap()
            )));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[usize] {
        &self.0
    }

    /// Number of junction segments `K`.
    pub fn num_segments(&self) -> usize {
        self.0.len() - 1
    }
}

impl TryFrom<Vec<usize>> for HubLayers {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<HubLayers> for Vec<usize> {
    fn from(h: HubLayers) -> Self {
        h.0
    }
}

fn default_eta() -> f64 {
    0.1
}

fn default_fkind() -> FKind {
    FKind::TLogT
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub pf_loss: PfLoss,
    #[serde(default = "ObjectiveSpec::default_pb")]
    pub pb_loss: PbLoss,
    #[serde(default = "ObjectiveSpec::default_baseline")]
    pub baseline: BaselineKind,
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Divergence reported in run summaries.
    #[serde(default = "default_fkind")]
    pub fkind: FKind,
    #[serde(default)]
    pub hub_layers: Option<HubLayers>,
}

impl ObjectiveSpec {
    fn default_pb() -> PbLoss {
        PbLoss::SameAsPf
    }

    fn default_baseline() -> BaselineKind {
        BaselineKind::None
    }

    pub fn new(pf_loss: PfLoss, pb_loss: PbLoss) -> Self {
        Self {
            pf_loss,
            pb_loss,
            baseline: BaselineKind::None,
            eta: default_eta(),
            fkind: default_fkind(),
            hub_layers: None,
        }
    }

    pub fn tb() -> Self {
        Self::new(PfLoss::Tb, PbLoss::SameAsPf)
    }

    pub fn reverse_kl(baseline: BaselineKind, eta: f64) -> Self {
        Self {
            baseline,
            eta,
            ..Self::new(PfLoss::ReverseKl, PbLoss::SameAsPf)
        }
    }

    pub fn wake_sleep(variant: WakeSleep) -> Self {
        match variant {
            WakeSleep::Ws => Self::new(PfLoss::ForwardKl, PbLoss::ReverseKl),
            WakeSleep::ReverseWs => Self::new(PfLoss::ReverseKl, PbLoss::ForwardKl),
        }
    }

    pub fn validate(&self, env: &Env) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::InvalidSpec(format!(
                "eta must lie in (0, 1], got {}",
                self.eta
            )));
        }
        if self.pf_loss == PfLoss::SubTb {
            self.hubs(env)?.check(env)?;
        }
        Ok(())
    }

    /// Hub layers for SubTB; every layer when none are configured.
    pub fn hubs(&self, env: &Env) -> Result<HubLayers> {
        match &self.hub_layers {
            Some(h) => Ok(h.clone()),
            None => Ok(HubLayers::all(env.dag().depth()?)),
        }
    }

    /// Which loss actually drives `P_B`.
    pub fn effective_pb_loss(&self) -> PbLoss {
        match (self.pb_loss, self.pf_loss) {
            (PbLoss::SameAsPf, PfLoss::ReverseKl) => PbLoss::ReverseKl,
            (PbLoss::SameAsPf, PfLoss::ForwardKl) => PbLoss::ForwardKl,
            (pb, _) => pb,
        }
    }
}

/// Running average baseline `b <- (1 - eta) b + eta * mean c`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineState {
    pub b_global: f64,
    pub eta: f64,
}

impl BaselineState {
    pub fn new(eta: f64) -> Result<Self> {
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(Error::InvalidSpec(format!(
                "eta must lie in (0, 1], got {eta}"
            )));
        }
        Ok(Self { b_global: 0.0, eta })
    }

    pub fn update(&mut self, batch_mean: f64) {
        self.b_global = (1.0 - self.eta) * self.b_global + self.eta * batch_mean;
    }
}

/// `c(tau) = log P_F(tau) - log R(x) - log P_B(tau | x)`.
pub fn reinforce_signal(env: &Env, t: &Trajectory) -> f64 {
    t.log_pf - env.rewards().log_reward(t.last()) - t.log_pb
}

fn mean_signal(env: &Env, batch: &[Trajectory]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(batch.iter().map(|t| reinforce_signal(env, t)).sum::<f64>() / batch.len() as f64)
}

pub fn update_global_baseline(
    state: &mut BaselineState,
    env: &Env,
    batch: &[Trajectory],
) -> Result<()> {
    state.update(mean_signal(env, batch)?);
    Ok(())
}

/// Balance residual of a segment with the given log-probabilities.
pub fn segment_residual(
    policy: &PolicySet,
    env: &Env,
    first: StateId,
    last: StateId,
    log_pf: f64,
    log_pb: f64,
) -> Result<f64> {
    Ok(policy.log_flow(env, first)? + log_pf - policy.log_flow(env, last)? - log_pb)
}

/// Adds `weight * grad r^2` for the segment `states[from..=to]` of `traj`
/// and returns `r^2`.
fn add_segment(
    acc: &mut GradAccumulator,
    policy: &PolicySet,
    env: &Env,
    cache: &mut PolicyCache,
    traj: &Trajectory,
    from: usize,
    to: usize,
    weight: f64,
) -> Result<f64> {
    let states = &traj.states;
    let (fpos, bpos) = (traj.forward_positions(), traj.backward_positions());
    let mut lpf = 0.0;
    let mut lpb = 0.0;
    for i in from..to {
        lpf += cache.logprobs(policy, env, states[i], Direction::Forward)?[fpos[i]];
        lpb += cache.logprobs(policy, env, states[i + 1], Direction::Backward)?[bpos[i]];
    }
    let (first, last) = (states[from], states[to]);
    let r = segment_residual(policy, env, first, last, lpf, lpb)?;
    let coef = weight * 2.0 * r;
    if coef != 0.0 {
        for i in from..to {
            acc.add_step(
                policy,
                env,
                cache,
                states[i],
                Direction::Forward,
                fpos[i],
                coef,
            )?;
            acc.add_step(
                policy,
                env,
                cache,
                states[i + 1],
                Direction::Backward,
                bpos[i],
                -coef,
            )?;
        }
    }
    let dag = env.dag();
    if first == dag.initial() {
        acc.log_z += coef;
    } else if !dag.is_terminating(first) {
        acc.add_log_flow(first, coef);
    }
    if !dag.is_terminating(last) {
        acc.add_log_flow(last, -coef);
    }
    Ok(r * r)
}

/// `sum_i w_i grad L(tau_i)` where each item is treated as one balance
/// segment; returns `(sum_i w_i L(tau_i), gradient)`.
pub fn balance_gradient(
    policy: &PolicySet,
    env: &Env,
    cache: &mut PolicyCache,
    items: &[(&Trajectory, f64)],
) -> Result<(f64, PolicyGrad)> {
    let mut acc = GradAccumulator::new(env);
    let mut loss = 0.0;
    for &(t, w) in items {
        loss += w * add_segment(&mut acc, policy, env, cache, t, 0, t.states.len() - 1, w)?;
    }
    Ok((loss, acc.finish(policy, env)?))
}

fn check_complete(env: &Env, t: &Trajectory) -> Result<()> {
    if t.first() != env.dag().initial() || !env.dag().is_terminating(t.last()) {
        return Err(Error::InvalidSpec("trajectory is not complete".into()));
    }
    Ok(())
}

/// `(log Z + log P_F(tau) - log R(x) - log P_B(tau | x))^2` and its gradient.
pub fn tb_loss(
    policy: &PolicySet,
    env: &Env,
    cache: &mut PolicyCache,
    t: &Trajectory,
) -> Result<(f64, PolicyGrad)> {
    check_complete(env, t)?;
    balance_gradient(policy, env, cache, &[(t, 1.0)])
}

/// `(log F(s) + log P_F(s'|s) - log F(s') - log P_B(s|s'))^2` and its gradient.
pub fn db_loss(
    policy: &PolicySet,
    env: &Env,
    cache: &mut PolicyCache,
    s: StateId,
    s_next: StateId,
) -> Result<(f64, PolicyGrad)> {
    let t = Trajectory::evaluate(policy, env, cache, vec![s, s_next], None)?;
    balance_gradient(policy, env, cache, &[(&t, 1.0)])
}

fn is_hub(policy: &PolicySet, env: &Env, s: StateId) -> bool {
    s == env.dag().initial() || env.dag().is_terminating(s) || policy.hub_flows().contains_key(&s)
}

/// Balance loss of a segment whose endpoints are hubs.
pub fn subtb_loss(
    policy: &PolicySet,
    env: &Env,
    cache: &mut PolicyCache,
    segment: &Trajectory,
) -> Result<(f64, PolicyGrad)> {
    for s in [segment.first(), segment.last()] {
        if !is_hub(policy, env, s) {
            return Err(Error::NotAHub(s));
        }
    }
    balance_gradient(policy, env, cache, &[(segment, 1.0)])
}

/// Cut points of a complete trajectory for a balance loss.
fn cuts(spec: &ObjectiveSpec, hubs: Option<&HubLayers>, t: &Trajectory) -> Result<Vec<usize>> {
    let last = t.states.len() - 1;
    Ok(match spec.pf_loss {
        PfLoss::Tb => vec![0, last],
        PfLoss::Db => (0..=last).collect(),
        PfLoss::SubTb => {
            let hubs = hubs.ok_or_else(|| Error::InvalidSpec("SubTB needs hub layers".into()))?;
            if *hubs.layers().last().unwrap() != last {
                return Err(Error::NotGraded);
            }
            hubs.layers().to_vec()
        }
        _ => unreachable!("not a balance loss"),
    })
}

/// Mean over the batch of the summed balance losses of each trajectory.
pub fn balance_batch_gradient(
    spec: &ObjectiveSpec,
    policy: &PolicySet,
    env: &Env,
    cache: &mut PolicyCache,
    batch: &[Trajectory],
) -> Result<(f64, PolicyGrad)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let hubs = if spec.pf_loss == PfLoss::SubTb {
        Some(spec.hubs(env)?)
    } else {
        None
    };
    let w = 1.0 / batch.len() as f64;
    let mut acc = GradAccumulator::new(env);
    let mut loss = 0.0;
    for t in batch {
        t.ensure_fresh(policy)?;
        let cuts = cuts(spec, hubs.as_ref(), t)?;
        for c in cuts.windows(2) {
            loss += w * add_segment(&mut acc, policy, env, cache, t, c[0], c[1], w)?;
        }
    }
    Ok((loss, acc.finish(policy, env)?))
}

/// Self-normalized weights `exp(log_pf - log_behavior)`, scaled to average 1.
pub fn reverse_importance_weights(batch: &[Trajectory]) -> Result<Vec<f64>> {
    let lw: Vec<f64> = batch.iter().map(|t| t.log_pf - t.log_behavior).collect();
    let w = normalized(&lw)?;
    let n = batch.len() as f64;
    Ok(w.into_iter().map(|x| x * n).collect())
}

/// Self-normalized weights `R(x) P_B(tau | x) / pi(tau)`, summing to 1.
pub fn forward_importance_weights(env: &Env, batch: &[Trajectory]) -> Result<Vec<f64>> {
    let lw: Vec<f64> = batch
        .iter()
        .map(|t| env.rewards().log_reward(t.last()) + t.log_pb - t.log_behavior)
        .collect();
    normalized(&lw)
}

fn normalized(log_weights: &[f64]) -> Result<Vec<f64>> {
    if log_weights.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let lse = logsumexp(log_weights);
    if !lse.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    Ok(log_weights.iter().map(|&l| (l - lse).exp()).collect())
}

/// Largest normalized weight above which a batch is flagged as degenerate.
pub const DEGENERATE_WEIGHT: f64 = 0.999;

/// Gradient estimate for a variational objective, with diagnostics.
#[derive(Clone, Debug)]
pub struct HviGradient {
    pub grad: PolicyGrad,
    /// Unweighted batch mean of `c(tau)`.
    pub signal_mean: f64,
    /// Largest self-normalized weight (as a fraction of the total), if weighted.
    pub max_weight: Option<f64>,
    pub degenerate: bool,
    /// Weighted batch surrogate, for monitoring only.
    pub loss: f64,
}

fn baseline_value(kind: BaselineKind, state: &BaselineState, signal_mean: f64) -> f64 {
    match kind {
        BaselineKind::None => 0.0,
        BaselineKind::Local => signal_mean,
        BaselineKind::Global => state.b_global,
    }
}

/// REINFORCE estimate of `grad_theta KL(P_F || P_B)`:
/// `(1/B) sum_i w_i grad log P_F(tau_i) (c(tau_i) - b)`. With `train_pb`,
/// also `grad_phi KL(P_F || P_B) ~ -(1/B) sum_i w_i grad log P_B(tau_i | x_i)`.
#[allow(clippy::too_many_arguments)]
pub fn reverse_kl_grad(
    policy: &PolicySet,
    env: &Env,
    cache: &mut PolicyCache,
    batch: &[Trajectory],
    baseline: BaselineKind,
    state: &BaselineState,
    weighted: bool,
    train_pb: bool,
) -> Result<HviGradient> {
    let signal_mean = mean_signal(env, batch)?;
    let b = baseline_value(baseline, state, signal_mean);
    let weights = if weighted {
        reverse_importance_weights(batch)?
    } else {
        vec![1.0; batch.len()]
    };
    let n = batch.len() as f64;
    let mut acc = GradAccumulator::new(env);
    let mut loss = 0.0;
    for (t, &w) in batch.iter().zip(&weights) {
        t.ensure_fresh(policy)?;
        let c = reinforce_signal(env, t);
        loss += w * c / n;
        acc.add_forward_path(policy, env, cache, t, w * (c - b) / n)?;
        if train_pb {
            acc.add_backward_path(policy, env, cache, t, -w / n)?;
        }
    }
    let max_weight = weighted.then(|| weights.iter().copied().fold(0.0, f64::max) / n);
    Ok(HviGradient {
        grad: acc.finish(policy, env)?,
        signal_mean,
        degenerate: max_weight.is_some_and(|m| m > DEGENERATE_WEIGHT),
        max_weight,
        loss,
    })
}

/// Importance-weighted estimate of `grad_theta KL(P_B || P_F)`:
/// `-sum_i w_i grad log P_F(tau_i)`. With `train_pb`, also
/// `grad_phi KL(P_B || P_F) ~ sum_i w_i grad log P_B(tau_i | x_i) (d_i - d_bar)`
/// with `d = -c` and `d_bar = sum_i w_i d_i`.
pub fn forward_kl_grad(
    policy: &PolicySet,
    env: &Env,
    cache: &mut PolicyCache,
    batch: &[Trajectory],
    train_pf: bool,
    train_pb: bool,
) -> Result<HviGradient> {
    let signal_mean = mean_signal(env, batch)?;
    let weights = forward_importance_weights(env, batch)?;
    let d: Vec<f64> = batch.iter().map(|t| -reinforce_signal(env, t)).collect();
    let d_bar: f64 = weights.iter().zip(&d).map(|(w, d)| w * d).sum();
    let mut acc = GradAccumulator::new(env);
    let mut loss = 0.0;
    for ((t, &w), &d) in batch.iter().zip(&weights).zip(&d) {
        t.ensure_fresh(policy)?;
        loss -= w * t.log_pf;
        if train_pf {
            acc.add_forward_path(policy, env, cache, t, -w)?;
        }
        if train_pb {
            acc.add_backward_path(policy, env, cache, t, w * (d - d_bar))?;
        }
    }
    let max_weight = weights.iter().copied().fold(0.0, f64::max);
    Ok(HviGradient {
        grad: acc.finish(policy, env)?,
        signal_mean,
        max_weight: Some(max_weight),
        degenerate: max_weight > DEGENERATE_WEIGHT,
        loss,
    })
}

/// Combined batch gradient for an objective specification.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    pub grad: PolicyGrad,
    pub loss: f64,
    pub signal_mean: f64,
    pub max_weight: Option<f64>,
    pub degenerate: bool,
}

fn merge(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.max(y)),
        (x, None) => x,
        (None, y) => y,
    }
}

/// Gradient for `P_F` per `pf_loss` and for `P_B` per `pb_loss`.
/// `weighted` marks an off-policy batch for the reverse-KL estimator.
pub fn objective_gradient(
    spec: &ObjectiveSpec,
    policy: &PolicySet,
    env: &Env,
    cache: &mut PolicyCache,
    batch: &[Trajectory],
    baseline: &BaselineState,
    weighted: bool,
) -> Result<BatchGradient> {
    let pb_loss = spec.effective_pb_loss();
    let pb_learned = !matches!(policy.backward(), PolicyModel::Uniform) && pb_loss != PbLoss::Fixed;
    let signal_mean = mean_signal(env, batch)?;
    let mut out = BatchGradient {
        grad: PolicyGrad::zeros(policy),
        loss: 0.0,
        signal_mean,
        max_weight: None,
        degenerate: false,
    };
    match spec.pf_loss {
        PfLoss::Tb | PfLoss::Db | PfLoss::SubTb => {
            let (loss, mut g) = balance_batch_gradient(spec, policy, env, cache, batch)?;
            if pb_loss != PbLoss::SameAsPf {
                g.backward.iter_mut().for_each(|v| *v = 0.0);
            }
            out.loss = loss;
            out.grad = g;
        }
        PfLoss::ReverseKl => {
            let train_pb = pb_learned && pb_loss == PbLoss::ReverseKl;
            let h = reverse_kl_grad(
                policy,
                env,
                cache,
                batch,
                spec.baseline,
                baseline,
                weighted,
                train_pb,
            )?;
            out.loss = h.loss;
            out.max_weight = h.max_weight;
            out.degenerate = h.degenerate;
            out.grad = h.grad;
        }
        PfLoss::ForwardKl => {
            let train_pb = pb_learned && pb_loss == PbLoss::ForwardKl;
            let h = forward_kl_grad(policy, env, cache, batch, true, train_pb)?;
            out.loss = h.loss;
            out.max_weight = h.max_weight;
            out.degenerate = h.degenerate;
            out.grad = h.grad;
        }
    }
    if !pb_learned {
        out.grad.backward.iter_mut().for_each(|v| *v = 0.0);
        return Ok(out);
    }
    // P_B trained by a different objective than P_F.
    let separate = !matches!(
        (spec.pf_loss, pb_loss),
        (PfLoss::ReverseKl, PbLoss::ReverseKl)
            | (PfLoss::ForwardKl, PbLoss::ForwardKl)
            | (_, PbLoss::SameAsPf)
            | (_, PbLoss::Fixed)
    );
    if separate {
        let h = match pb_loss {
            // Sleep update: forward samples, unweighted.
            PbLoss::ReverseKl => reverse_kl_grad(
                policy,
                env,
                cache,
                batch,
                BaselineKind::None,
                baseline,
                false,
                true,
            )?,
            PbLoss::ForwardKl => forward_kl_grad(policy, env, cache, batch, false, true)?,
            _ => unreachable!(),
        };
        out.grad.backward = h.grad.backward;
        out.max_weight = merge(out.max_weight, h.max_weight);
        out.degenerate |= h.degenerate;
    }
    Ok(out)
}

/// One wake-sleep gradient: `Ws` trains `P_F` on `KL(P_B || P_F)` and `P_B`
/// on `KL(P_F || P_B)`; `ReverseWs` the other way round.
pub fn wake_sleep_step(
    variant: WakeSleep,
    policy: &PolicySet,
    env: &Env,
    cache: &mut PolicyCache,
    batch: &[Trajectory],
    baseline: BaselineKind,
    state: &BaselineState,
    weighted: bool,
) -> Result<BatchGradient> {
    let spec = ObjectiveSpec {
        baseline,
        eta: state.eta,
        ..ObjectiveSpec::wake_sleep(variant)
    };
    objective_gradient(&spec, policy, env, cache, batch, state, weighted)
}

/// `D_f(p || q) = E_q[f(p / q)]`.
pub fn f_divergence<T: PartialEq>(
    p: &ExactDistribution<T>,
    q: &ExactDistribution<T>,
    fkind: FKind,
) -> Result<f64> {
    if p.support != q.support {
        return Err(Error::SupportMismatch);
    }
    let mut total = 0.0;
    for (&a, &b) in p.probs.iter().zip(&q.probs) {
        match fkind {
            FKind::TLogT => {
                if a > 0.0 {
                    if b <= 0.0 {
                        return Err(Error::SupportViolation(
                            "t log t needs q > 0 wherever p > 0",
                        ));
                    }
                    total += a * (a.ln() - b.ln());
                }
            }
            FKind::NegLog => {
                if b > 0.0 {
                    if a <= 0.0 {
                        return Err(Error::SupportViolation("-log t needs p > 0 wherever q > 0"));
                    }
                    total += b * (b.ln() - a.ln());
                }
            }
            FKind::LogSquared => {
                if (a > 0.0) != (b > 0.0) {
                    return Err(Error::SupportViolation("log^2 needs matching supports"));
                }
                if b > 0.0 {
                    total += b * (a.ln() - b.ln()).powi(2);
                }
            }
        }
    }
    Ok(total)
}

type Segments = (
    ExactDistribution<Vec<StateId>>,
    ExactDistribution<Vec<StateId>>,
    Vec<Trajectory>,
);

/// `p_hat_k`, `p_check_k`, and the segments between hub layers `k` and `k + 1`.
pub(crate) fn subnvi_segments(
    policy: &PolicySet,
    env: &Env,
    cache: &mut PolicyCache,
    hubs: &HubLayers,
    k: usize,
) -> Result<Segments> {
    hubs.check(env)?;
    if k >= hubs.num_segments() {
        return Err(Error::InvalidSpec(format!(
            "junction index {k} out of range"
        )));
    }
    let layers = env.dag().layers()?;
    let (from, to) = (hubs.layers()[k], hubs.layers()[k + 1]);
    let layer_lse = |l: usize| -> Result<f64> {
        let flows: Vec<f64> = layers[l]
            .iter()
            .map(|&s| policy.log_flow(env, s))
            .collect::<Result<_>>()?;
        Ok(logsumexp(&flows))
    };
    let (lse_from, lse_to) = (layer_lse(from)?, layer_lse(to)?);
    let items: Vec<Trajectory> = env
        .dag()
        .enumerate_layer_segments(from, to, DEFAULT_ENUMERATION_CAP)?
        .into_iter()
        .map(|states| Trajectory::evaluate(policy, env, cache, states, None))
        .collect::<Result<_>>()?;
    let mut lw_hat = Vec::with_capacity(items.len());
    let mut lw_check = Vec::with_capacity(items.len());
    for t in &items {
        lw_hat.push((policy.log_flow(env, t.first())? - lse_from) + t.log_pf);
        lw_check.push((policy.log_flow(env, t.last())? - lse_to) + t.log_pb);
    }
    let support: Vec<Vec<StateId>> = items.iter().map(|t| t.states.clone()).collect();
    let hat = ExactDistribution::from_log_weights(support.clone(), &lw_hat, lse_from)?;
    let check = ExactDistribution::from_log_weights(support, &lw_check, lse_to)?;
    Ok((hat, check, items))
}

/// `(p_hat_k, p_check_k)` over segments between hub layers `k` and `k + 1`,
/// with `p_hat_k ∝ F_k(start) P_F(segment)` and
/// `p_check_k ∝ F_{k+1}(end) P_B(segment | end)`.
pub fn subnvi_distributions(
    policy: &PolicySet,
    env: &Env,
    hubs: &HubLayers,
    k: usize,
) -> Result<(
    ExactDistribution<Vec<StateId>>,
    ExactDistribution<Vec<StateId>>,
)> {
    let mut cache = PolicyCache::new();
    let (hat, check, _) = subnvi_segments(policy, env, &mut cache, hubs, k)?;
    Ok((hat, check))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dag::DagSpec;
    use crate::policy::BackwardKind;

    fn env_of(n: usize, edges: &[(usize, usize)], term: &[usize], rewards: &[f64]) -> Env {
        let mut spec = DagSpec::new(n, edges, 0, term);
        spec.rewards = Some(rewards.to_vec());
        Env::from_dag_spec(&spec).unwrap()
    }

    fn dist(probs: &[f64]) -> ExactDistribution<usize> {
        ExactDistribution {
            support: (0..probs.len()).collect(),
            probs: probs.to_vec(),
            log_partition: 0.0,
        }
    }

    #[test]
    fn tb_loss_example() {
        // Two children of s0, each terminating: P_F = 0.5, P_B = 1, R = 1, log Z = 0.
        let env = env_of(3, &[(0, 1), (0, 2)], &[1, 2], &[1.0, 1.0]);
        let p = PolicySet::tabular(&env, BackwardKind::Learned);
        let mut cache = PolicyCache::new();
        let t = Trajectory::evaluate(&p, &env, &mut cache, vec![0, 1], None).unwrap();
        let (loss, g) = tb_loss(&p, &env, &mut cache, &t).unwrap();
        assert!((loss - 0.5f64.ln().powi(2)).abs() < 1e-15);
        assert!((loss - 0.4804530139182014).abs() < 1e-12);
        assert!((g.log_z - 2.0 * 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn balanced_trajectory_has_zero_loss_and_gradient() {
        let env = env_of(3, &[(0, 1), (0, 2)], &[1, 2], &[1.0, 1.0]);
        let mut p = PolicySet::tabular(&env, BackwardKind::Learned);
        p.set_log_z(2f64.ln());
        let mut cache = PolicyCache::new();
        let t = Trajectory::evaluate(&p, &env, &mut cache, vec![0, 2], None).unwrap();
        let (loss, g) = tb_loss(&p, &env, &mut cache, &t).unwrap();
        assert!(loss < 1e-30);
        assert!(g.norm() < 1e-15);
    }

    #[test]
    fn db_loss_examples() {
        // s0 -> a -> x and s0 -> b -> x: F(a) set by hand.
        let env = env_of(4, &[(0, 1), (0, 2), (1, 3), (2, 3)], &[3], &[1.0]);
        let mut p = PolicySet::tabular(&env, BackwardKind::Learned);
        let mut cache = PolicyCache::new();
        // Edge a -> x: P_F = 1, P_B(a | x) = 0.5, F(x) = 1.
        p.set_hub_flow(1, 0.5f64.ln());
        assert!(db_loss(&p, &env, &mut cache, 1, 3).unwrap().0 < 1e-30);
        p.set_hub_flow(1, 0.0);
        let (l, _) = db_loss(&p, &env, &mut cache, 1, 3).unwrap();
        assert!((l - 2f64.ln().powi(2)).abs() < 1e-15);
        // Edge s0 -> a with F(s0) = Z = 2, P_F = 0.5, F(a) = 1, P_B = 1.
        p.set_log_z(2f64.ln());
        assert!(db_loss(&p, &env, &mut cache, 0, 1).unwrap().0 < 1e-30);
        p.set_log_z(0.0);
        let (l, _) = db_loss(&p, &env, &mut cache, 0, 1).unwrap();
        assert!((l - 0.5f64.ln().powi(2)).abs() < 1e-15);
        p.hub_flows_mut().clear();
        assert!(matches!(
            db_loss(&p, &env, &mut cache, 0, 1),
            Err(Error::MissingFlow(1))
        ));
    }

    #[test]
    fn subtb_requires_hub_endpoints() {
        let env = env_of(4, &[(0, 1), (1, 2), (2, 3)], &[3], &[1.0]);
        let p = PolicySet::tabular(&env, BackwardKind::Learned);
        let mut cache = PolicyCache::new();
        let seg = Trajectory::evaluate(&p, &env, &mut cache, vec![0, 1, 2], None).unwrap();
        assert!(matches!(
            subtb_loss(&p, &env, &mut cache, &seg),
            Err(Error::NotAHub(2))
        ));
    }

    #[test]
    fn three_layer_subtb_by_hand() {
        // s0 -> {1, 2} -> 3 with hubs at every layer.
        let env = env_of(4, &[(0, 1), (0, 2), (1, 3), (2, 3)], &[3], &[4.0]);
        let mut p = PolicySet::tabular(&env, BackwardKind::Learned);
        p.set_log_z(1.0);
        p.set_hub_flow(1, 0.3);
        p.set_hub_flow(2, -0.2);
        let mut cache = PolicyCache::new();
        let t = Trajectory::evaluate(&p, &env, &mut cache, vec![0, 1, 3], None).unwrap();
        let spec = ObjectiveSpec {
            hub_layers: Some(HubLayers::new(vec![0, 1, 2]).unwrap()),
            ..ObjectiveSpec::new(PfLoss::SubTb, PbLoss::SameAsPf)
        };
        let (loss, _) = balance_batch_gradient(&spec, &p, &env, &mut cache, &[t]).unwrap();
        // (1 + log 0.5 - 0.3 - 0)^2 + (0.3 + 0 - log 4 - log 0.5)^2
        let h = 0.5f64.ln();
        let expected = (1.0 + h - 0.3f64).powi(2) + (0.3 - 4f64.ln() - h).powi(2);
        assert!((loss - expected).abs() < 1e-14);
    }

    #[test]
    fn global_baseline_updates() {
        let mut b = BaselineState::new(0.5).unwrap();
        b.update(2.0);
        assert_eq!(b.b_global, 1.0);
        let mut b = BaselineState::new(1.0).unwrap();
        b.update(-3.25);
        assert_eq!(b.b_global, -3.25);
        assert!(BaselineState::new(0.0).is_err());
        let mut b = BaselineState::new(0.3).unwrap();
        for _ in 0..200 {
            b.update(5.0);
        }
        assert!((b.b_global - 5.0).abs() < 1e-12);
    }

    #[test]
    fn local_baseline_cancels_identical_batch() {
        let env = env_of(3, &[(0, 1), (0, 2)], &[1, 2], &[1.0, 3.0]);
        let p = PolicySet::tabular(&env, BackwardKind::Learned);
        let mut cache = PolicyCache::new();
        let t = Trajectory::evaluate(&p, &env, &mut cache, vec![0, 2], None).unwrap();
        let batch = vec![t.clone(), t.clone(), t];
        let state = BaselineState::new(0.1).unwrap();
        let h = reverse_kl_grad(
            &p,
            &env,
            &mut cache,
            &batch,
            BaselineKind::Local,
            &state,
            false,
            false,
        )
        .unwrap();
        assert!(h.grad.norm() < 1e-15);
    }

    #[test]
    fn f_divergence_examples() {
        let p = dist(&[0.5, 0.5]);
        let q = dist(&[0.75, 0.25]);
        for f in [FKind::TLogT, FKind::NegLog, FKind::LogSquared] {
            assert_eq!(f_divergence(&p, &p, f).unwrap(), 0.0);
        }
        let neg_log = f_divergence(&p, &q, FKind::NegLog).unwrap();
        assert!((neg_log - (0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln())).abs() < 1e-15);
        assert!((neg_log - 0.1308).abs() < 1e-4);
        let tlogt = f_divergence(&p, &q, FKind::TLogT).unwrap();
        assert!((tlogt - (0.5 * (2.0f64 / 3.0).ln() + 0.5 * 2f64.ln())).abs() < 1e-15);
        assert!((tlogt - 0.1438).abs() < 1e-4);
        assert!(f_divergence(&dist(&[1.0, 0.0]), &dist(&[0.5, 0.5]), FKind::NegLog).is_err());
        assert!(f_divergence(&dist(&[0.5, 0.5]), &dist(&[1.0, 0.0]), FKind::TLogT).is_err());
    }

    #[test]
    fn hub_layer_validation() {
        assert!(HubLayers::new(vec![1, 2]).is_err());
        assert!(HubLayers::new(vec![0, 2, 2]).is_err());
        assert!(HubLayers::new(vec![0]).is_err());
        let h: HubLayers = serde_json::from_str("[0, 1, 3]").unwrap();
        assert_eq!(h.num_segments(), 2);
        assert!(serde_json::from_str::<HubLayers>("[0, 3, 1]").is_err());
    }

    #[test]
    fn objective_spec_json_keys() {
        let s: ObjectiveSpec = serde_json::from_str(
            r#"{"pf_loss": "ReverseKL", "pb_loss": "fixed", "baseline": "global", "eta": 0.1}"#,
        )
        .unwrap();
        assert_eq!(s.pf_loss, PfLoss::ReverseKl);
        assert_eq!(s.pb_loss, PbLoss::Fixed);
        assert_eq!(s.baseline, BaselineKind::Global);
        let s: ObjectiveSpec =
            serde_json::from_str(r#"{"pf_loss": "SubTB", "hub_layers": [0, 2, 4]}"#).unwrap();
        assert_eq!(s.hub_layers.unwrap().layers(), &[0, 2, 4]);
    }
}
