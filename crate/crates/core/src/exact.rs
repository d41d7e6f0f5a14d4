//! Exact computations on enumerable instances: flow propagation of the
//! terminating distribution, trajectory distributions, divergences, and the
//! expected-gradient oracle used to check gradient identities.

use serde::{Deserialize, Serialize};

use crate::dag::{StateId, DEFAULT_ENUMERATION_CAP};
use crate::env::Env;
use crate::error::{Error, Result};
use crate::math::logsumexp;
use crate::objectives::{balance_gradient, reinforce_signal, HubLayers};
use crate::policy::{trajectory_scores, Direction, PolicyCache, PolicyGrad, PolicySet, Trajectory};

/// A normalized table over states or trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactDistribution<T = StateId> {
    pub support: Vec<T>,
    pub probs: Vec<f64>,
    /// Log of the normalizer divided out of the weights.
    pub log_partition: f64,
}

impl<T> ExactDistribution<T> {
    /// Normalizes `exp(log_weights)`, absorbing `log_offset` into the
    /// reported partition.
    pub fn from_log_weights(support: Vec<T>, log_weights: &[f64], log_offset: f64) -> Result<Self> {
        if support.len() != log_weights.len() {
            return Err(Error::DimensionMismatch {
                expected: support.len(),
                got: log_weights.len(),
            });
        }
        let lse = logsumexp(log_weights);
        if !lse.is_finite() {
            return Err(Error::NonFinite("distribution normalizer"));
        }
        Ok(Self {
            support,
            probs: log_weights.iter().map(|&w| (w - lse).exp()).collect(),
            log_partition: log_offset + lse,
        })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn log_probs(&self) -> Vec<f64> {
        self.probs.iter().map(|p| p.ln()).collect()
    }

    /// Maps the support through `f`, keeping probabilities.
    pub fn map_support<U>(self, f: impl Fn(T) -> U) -> ExactDistribution<U> {
        ExactDistribution {
            support: self.support.into_iter().map(f).collect(),
            probs: self.probs,
            log_partition: self.log_partition,
        }
    }
}

/// Terminating marginal of `P_F` by forward flow propagation in topological
/// order; the support lists terminating states in ascending id order.
pub fn flow_propagate(policy: &PolicySet, env: &Env) -> Result<ExactDistribution> {
    let dag = env.dag();
    let mut cache = PolicyCache::new();
    let mut flow = vec![0.0; env.num_states()];
    flow[dag.initial()] = 1.0;
    for &s in dag.topological_order() {
        if dag.is_terminating(s) || flow[s] == 0.0 {
            continue;
        }
        let lp = cache.logprobs(policy, env, s, Direction::Forward)?;
        for (&c, &l) in dag.children(s).iter().zip(lp) {
            flow[c] += flow[s] * l.exp();
        }
    }
    let support = dag.terminating_sorted();
    let probs = support.iter().map(|&x| flow[x]).collect();
    Ok(ExactDistribution {
        support,
        probs,
        log_partition: 0.0,
    })
}

/// `R / Z_hat` over terminating states in ascending id order.
pub fn target_distribution(env: &Env) -> ExactDistribution {
    let r = env.rewards();
    let lz = r.log_partition();
    ExactDistribution {
        support: r.terminating().to_vec(),
        probs: r
            .terminating()
            .iter()
            .map(|&x| (r.log_reward(x) - lz).exp())
            .collect(),
        log_partition: lz,
    }
}

/// All complete trajectories with cached log-probabilities.
pub fn enumerate_trajectories(
    policy: &PolicySet,
    env: &Env,
    cache: &mut PolicyCache,
) -> Result<Vec<Trajectory>> {
    env.dag()
        .enumerate_complete_trajectories(DEFAULT_ENUMERATION_CAP)?
        .into_iter()
        .map(|states| Trajectory::evaluate(policy, env, cache, states, None))
        .collect()
}

fn paths(trajs: &[Trajectory]) -> Vec<Vec<StateId>> {
    trajs.iter().map(|t| t.states.clone()).collect()
}

/// `P_F(tau)` over enumerated complete trajectories.
pub fn forward_trajectory_distribution(
    trajs: &[Trajectory],
) -> Result<ExactDistribution<Vec<StateId>>> {
    let lw: Vec<f64> = trajs.iter().map(|t| t.log_pf).collect();
    ExactDistribution::from_log_weights(paths(trajs), &lw, 0.0)
}

/// `P_B(tau) = R(x) P_B(tau | x) / Z_hat` over enumerated complete trajectories.
pub fn backward_trajectory_distribution(
    env: &Env,
    trajs: &[Trajectory],
) -> Result<ExactDistribution<Vec<StateId>>> {
    let lz = env.rewards().log_partition();
    let lw: Vec<f64> = trajs
        .iter()
        .map(|t| (env.rewards().log_reward(t.last()) - lz) + t.log_pb)
        .collect();
    ExactDistribution::from_log_weights(paths(trajs), &lw, lz)
}

/// Marginal over last states, in ascending state order.
pub fn terminal_marginal(dist: &ExactDistribution<Vec<StateId>>) -> ExactDistribution {
    let mut acc = std::collections::BTreeMap::new();
    for (path, &p) in dist.support.iter().zip(&dist.probs) {
        *acc.entry(*path.last().unwrap()).or_insert(0.0) += p;
    }
    ExactDistribution {
        support: acc.keys().copied().collect(),
        probs: acc.values().copied().collect(),
        log_partition: dist.log_partition,
    }
}

fn check_support<T: PartialEq>(p: &ExactDistribution<T>, q: &ExactDistribution<T>) -> Result<()> {
    if p.support != q.support {
        return Err(Error::SupportMismatch);
    }
    Ok(())
}

fn kl_terms(p: &[f64], q: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return Err(Error::SupportViolation("KL needs q > 0 wherever p > 0"));
            }
            total += a * (a.ln() - b.ln());
        }
    }
    Ok(total)
}

/// `KL(p || q)` in nats.
pub fn kl<T: PartialEq>(p: &ExactDistribution<T>, q: &ExactDistribution<T>) -> Result<f64> {
    check_support(p, q)?;
    kl_terms(&p.probs, &q.probs)
}

/// Jensen-Shannon divergence in nats.
pub fn jsd<T: PartialEq>(p: &ExactDistribution<T>, q: &ExactDistribution<T>) -> Result<f64> {
    check_support(p, q)?;
    let m: Vec<f64> = p
        .probs
        .iter()
        .zip(&q.probs)
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    Ok(0.5 * (kl_terms(&p.probs, &m)? + kl_terms(&q.probs, &m)?))
}

/// Pearson correlation of `log p(x)` and `log R(x)` over the support of `dist`.
pub fn pearson_log_correlation(dist: &ExactDistribution, env: &Env) -> Result<f64> {
    if dist.probs.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::SupportViolation(
            "Pearson correlation needs positive probabilities",
        ));
    }
    let xs: Vec<f64> = dist.probs.iter().map(|p| p.ln()).collect();
    let ys: Vec<f64> = dist
        .support
        .iter()
        .map(|&x| env.rewards().log_reward(x))
        .collect();
    pearson(&xs, &ys)
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            got: ys.len(),
        });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if !(sxx > 0.0) || !(syy > 0.0) {
        return Err(Error::ZeroVariance(if sxx > 0.0 {
            "second vector"
        } else {
            "first vector"
        }));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// `E_{P_F}[(log Z + log P_F(tau) - log R(x) - log P_B(tau|x))^2]` by a
/// first/second moment recursion over the DAG.
pub fn expected_tb_loss(policy: &PolicySet, env: &Env, log_z: f64) -> Result<f64> {
    let dag = env.dag();
    let n = env.num_states();
    let mut cache = PolicyCache::new();
    let (mut m0, mut m1, mut m2) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    m0[dag.initial()] = 1.0;
    let mut total = 0.0;
    for &s in dag.topological_order() {
        if m0[s] == 0.0 {
            continue;
        }
        if dag.is_terminating(s) {
            let a = log_z - env.rewards().log_reward(s);
            total += m2[s] + 2.0 * a * m1[s] + a * a * m0[s];
            continue;
        }
        let lpf = cache.logprobs(policy, env, s, Direction::Forward)?.to_vec();
        for (k, &c) in dag.children(s).iter().enumerate() {
            let pos = dag.parent_position(c, s)?;
            let a = lpf[k] - cache.logprobs(policy, env, c, Direction::Backward)?[pos];
            let p = lpf[k].exp();
            m2[c] += p * (m2[s] + 2.0 * a * m1[s] + a * a * m0[s]);
            m1[c] += p * (m1[s] + a * m0[s]);
            m0[c] += p * m0[s];
        }
    }
    Ok(total)
}

/// `E_{P_F^T}[R(x)]`.
pub fn expected_reward(dist: &ExactDistribution, env: &Env) -> f64 {
    dist.support
        .iter()
        .zip(&dist.probs)
        .map(|(&x, &p)| p * env.rewards().reward(x))
        .sum()
}

/// Which distribution the oracle takes expectations under.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    Forward,
    Backward,
    /// `p_hat_k` (forward side) or `p_check_k` (backward side) for junction `k`.
    SubNvi {
        k: usize,
        side: Direction,
    },
}

/// Exact expected balance-loss gradients and directly differentiated
/// divergences for one enumerable instance.
#[derive(Clone, Debug)]
pub struct OracleReport {
    /// `sum_tau w(tau) grad L(tau)` under the requested sampling distribution.
    pub expected_loss_grad: PolicyGrad,
    /// `grad_theta KL(q_F || q_B)` where `q_F`, `q_B` are the forward-side and
    /// backward-side distributions (only `forward` is populated).
    pub grad_kl_forward: PolicyGrad,
    /// `grad_phi KL(q_B || q_F)` (only `backward` is populated).
    pub grad_kl_backward: PolicyGrad,
    /// `grad_phi KL(q_F || q_B)` (only `backward` is populated).
    pub grad_kl_forward_wrt_backward: PolicyGrad,
    /// `grad_phi D_{log^2}(q_B || q_F) = grad_phi E_{q_F}[(log q_B - log q_F)^2]`.
    pub grad_log_squared: PolicyGrad,
    pub kl_forward: f64,
    pub kl_backward: f64,
    pub log_squared: f64,
}

/// Forward-side and backward-side distributions over the same items, with
/// per-item score vectors.
pub struct PairedDistributions {
    pub items: Vec<Trajectory>,
    pub fwd: ExactDistribution<Vec<StateId>>,
    pub bwd: ExactDistribution<Vec<StateId>>,
}

impl PairedDistributions {
    /// `P_F(tau)` and `P_B(tau)` over complete trajectories.
    pub fn complete(policy: &PolicySet, env: &Env, cache: &mut PolicyCache) -> Result<Self> {
        let items = enumerate_trajectories(policy, env, cache)?;
        let fwd = forward_trajectory_distribution(&items)?;
        let bwd = backward_trajectory_distribution(env, &items)?;
        Ok(Self { items, fwd, bwd })
    }

    /// `p_hat_k` and `p_check_k` over segments between hub layers `k` and `k + 1`.
    pub fn subnvi(
        policy: &PolicySet,
        env: &Env,
        cache: &mut PolicyCache,
        hubs: &HubLayers,
        k: usize,
    ) -> Result<Self> {
        let (fwd, bwd, items) = crate::objectives::subnvi_segments(policy, env, cache, hubs, k)?;
        Ok(Self { items, fwd, bwd })
    }
}

fn weighted_scores(scores: &[PolicyGrad], coefs: &[f64], template: &PolicyGrad) -> PolicyGrad {
    let mut g = template.clone();
    g.scale(0.0);
    for (s, &c) in scores.iter().zip(coefs) {
        g.add_scaled(s, c);
    }
    g
}

/// `grad KL(p || q)` when only `p` depends on the parameters:
/// `sum_i p_i (log p_i - log q_i + 1) grad log p_i`.
fn direct_kl_grad(
    p: &[f64],
    q: &[f64],
    scores: &[PolicyGrad],
    template: &PolicyGrad,
) -> PolicyGrad {
    let coefs: Vec<f64> = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            if a > 0.0 {
                a * (a.ln() - b.ln() + 1.0)
            } else {
                0.0
            }
        })
        .collect();
    weighted_scores(scores, &coefs, template)
}

/// Runs the oracle over a paired distribution.
pub fn oracle_on(
    policy: &PolicySet,
    env: &Env,
    cache: &mut PolicyCache,
    pair: &PairedDistributions,
    side: Direction,
) -> Result<OracleReport> {
    let weights = match side {
        Direction::Forward => &pair.fwd.probs,
        Direction::Backward => &pair.bwd.probs,
    };
    let weighted: Vec<(&Trajectory, f64)> =
        pair.items.iter().zip(weights.iter().copied()).collect();
    let expected_loss_grad = balance_gradient(policy, env, cache, &weighted)?.1;

    let mut fscores = Vec::with_capacity(pair.items.len());
    let mut bscores = Vec::with_capacity(pair.items.len());
    for t in &pair.items {
        let (f, b) = trajectory_scores(policy, env, cache, t)?;
        fscores.push(f);
        bscores.push(b);
    }
    let template = PolicyGrad::zeros(policy);
    let p = &pair.fwd.probs;
    let q = &pair.bwd.probs;
    let grad_kl_forward = direct_kl_grad(p, q, &fscores, &template);
    let grad_kl_backward = direct_kl_grad(q, p, &bscores, &template);
    // KL(p || q) with q moving: -sum_i p_i grad log q_i.
    let neg_p: Vec<f64> = p.iter().map(|&a| -a).collect();
    let grad_kl_forward_wrt_backward = weighted_scores(&bscores, &neg_p, &template);
    let sq_coefs: Vec<f64> = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| 2.0 * a * (b.ln() - a.ln()))
        .collect();
    let grad_log_squared = weighted_scores(&bscores, &sq_coefs, &template);
    let log_squared = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| a * (b.ln() - a.ln()).powi(2))
        .sum();
    Ok(OracleReport {
        expected_loss_grad,
        grad_kl_forward,
        grad_kl_backward,
        grad_kl_forward_wrt_backward,
        grad_log_squared,
        kl_forward: kl_terms(p, q)?,
        kl_backward: kl_terms(q, p)?,
        log_squared,
    })
}

/// Exact expected gradients of the balance loss under `sampling`, together
/// with directly differentiated divergences between the paired distributions.
pub fn expected_gradient_oracle(
    policy: &PolicySet,
    env: &Env,
    sampling: Sampling,
    hubs: Option<&HubLayers>,
) -> Result<OracleReport> {
    let mut cache = PolicyCache::new();
    match sampling {
        Sampling::Forward | Sampling::Backward => {
            let pair = PairedDistributions::complete(policy, env, &mut cache)?;
            let side = if sampling == Sampling::Forward {
                Direction::Forward
            } else {
                Direction::Backward
            };
            oracle_on(policy, env, &mut cache, &pair, side)
        }
        Sampling::SubNvi { k, side } => {
            let hubs =
                hubs.ok_or_else(|| Error::InvalidSpec("SubNVI sampling needs hub layers".into()))?;
            let pair = PairedDistributions::subnvi(policy, env, &mut cache, hubs, k)?;
            oracle_on(policy, env, &mut cache, &pair, side)
        }
    }
}

/// Moments of the single-sample REINFORCE estimator `grad log P_F(tau) (c(tau) - b)`.
pub struct ScoreMoments {
    probs: Vec<f64>,
    c: Vec<f64>,
    norms2: Vec<f64>,
    scores: Vec<Vec<f64>>,
}

impl ScoreMoments {
    pub fn new(policy: &PolicySet, env: &Env) -> Result<Self> {
        let mut cache = PolicyCache::new();
        let trajs = enumerate_trajectories(policy, env, &mut cache)?;
        let dist = forward_trajectory_distribution(&trajs)?;
        let mut scores = Vec::with_capacity(trajs.len());
        for t in &trajs {
            scores.push(trajectory_scores(policy, env, &mut cache, t)?.0.forward);
        }
        Ok(Self {
            probs: dist.probs,
            c: trajs.iter().map(|t| reinforce_signal(env, t)).collect(),
            norms2: scores
                .iter()
                .map(|s| s.iter().map(|v| v * v).sum())
                .collect(),
            scores,
        })
    }

    /// `E_{P_F}[c(tau)]`.
    pub fn mean_signal(&self) -> f64 {
        self.probs.iter().zip(&self.c).map(|(p, c)| p * c).sum()
    }

    /// `E[c ||s||^2] / E[||s||^2]`.
    pub fn optimal_baseline(&self) -> Result<f64> {
        let den: f64 = self
            .probs
            .iter()
            .zip(&self.norms2)
            .map(|(p, n)| p * n)
            .sum();
        if !(den > 0.0) {
            return Err(Error::ZeroDenominator);
        }
        let num: f64 = self
            .probs
            .iter()
            .zip(&self.norms2)
            .zip(&self.c)
            .map(|((p, n), c)| p * n * c)
            .sum();
        Ok(num / den)
    }

    /// Trace of the estimator covariance at baseline `b`.
    pub fn covariance_trace(&self, b: f64) -> f64 {
        let dim = self.scores.first().map_or(0, Vec::len);
        let mut mean = vec![0.0; dim];
        let mut second = 0.0;
        for ((p, s), c) in self.probs.iter().zip(&self.scores).zip(&self.c) {
            let d = c - b;
            for (m, v) in mean.iter_mut().zip(s) {
                *m += p * v * d;
            }
        }
        for ((p, n), c) in self.probs.iter().zip(&self.norms2).zip(&self.c) {
            second += p * n * (c - b) * (c - b);
        }
        second - mean.iter().map(|m| m * m).sum::<f64>()
    }

    /// `E_{P_F}[grad log P_F(tau)]`, zero up to rounding.
    pub fn mean_score(&self) -> Vec<f64> {
        let dim = self.scores.first().map_or(0, Vec::len);
        let mut mean = vec![0.0; dim];
        for (p, s) in self.probs.iter().zip(&self.scores) {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += p * v;
            }
        }
        mean
    }
}

/// `b* = E[c ||grad log P_F||^2] / E[||grad log P_F||^2]` computed by enumeration.
pub fn optimal_baseline(policy: &PolicySet, env: &Env) -> Result<f64> {
    ScoreMoments::new(policy, env)?.optimal_baseline()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dag::DagSpec;
    use crate::hypergrid::HypergridSpec;
    use crate::policy::BackwardKind;

    fn dist(probs: &[f64]) -> ExactDistribution<usize> {
        ExactDistribution {
            support: (0..probs.len()).collect(),
            probs: probs.to_vec(),
            log_partition: 0.0,
        }
    }

    #[test]
    fn jsd_examples() {
        let p = dist(&[0.5, 0.5]);
        assert_eq!(jsd(&p, &p).unwrap(), 0.0);
        let a = dist(&[1.0, 0.0]);
        let b = dist(&[0.0, 1.0]);
        assert!((jsd(&a, &b).unwrap() - 2f64.ln()).abs() < 1e-15);
        let v = jsd(&p, &a).unwrap();
        assert!((v - 0.75 * (4.0f64 / 3.0).ln()).abs() < 1e-12, "{v}");
        assert!((v - jsd(&a, &p).unwrap()).abs() < 1e-15);
        assert!(jsd(&p, &dist(&[1.0])).is_err());
    }

    #[test]
    fn flow_on_two_cell_grid() {
        let env = Env::hypergrid(&HypergridSpec::new(2, 1, 0.1).unwrap()).unwrap();
        let mut p = PolicySet::tabular(&env, BackwardKind::Uniform);
        // children of 0: [1 (increment), 2 (exit)]
        let logits = p.params_mut(Direction::Forward);
        logits[0] = 0.6f64.ln();
        logits[1] = 0.4f64.ln();
        let d = flow_propagate(&p, &env).unwrap();
        assert_eq!(d.support, vec![2, 3]);
        assert!((d.probs[0] - 0.4).abs() < 1e-15 && (d.probs[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn backward_distribution_two_paths() {
        let mut spec = DagSpec::new(3, &[(0, 1), (0, 2)], 0, &[1, 2]);
        spec.rewards = Some(vec![1.0, 3.0]);
        let env = Env::from_dag_spec(&spec).unwrap();
        let p = PolicySet::tabular(&env, BackwardKind::Learned);
        let mut cache = PolicyCache::new();
        let trajs = enumerate_trajectories(&p, &env, &mut cache).unwrap();
        let d = backward_trajectory_distribution(&env, &trajs).unwrap();
        assert!((d.probs[0] - 0.25).abs() < 1e-15 && (d.probs[1] - 0.75).abs() < 1e-15);
        assert!((d.log_partition - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-15);
        // deviations (-1, 0, 1) and (-1, 2, -1): covariance 0
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[0.0, 3.0, 0.0]).unwrap(), 0.0);
        // deviations (-1, 0, 1) and (-2/3, -2/3, 4/3): r = 2 / sqrt(2 * 8/3) = sqrt(3)/2
        let r = pearson(&[1.0, 2.0, 3.0], &[0.0, 0.0, 2.0]).unwrap();
        assert!((r - 3f64.sqrt() / 2.0).abs() < 1e-15);
        assert!(matches!(
            pearson(&[1.0, 1.0], &[0.0, 1.0]),
            Err(Error::ZeroVariance(_))
        ));
    }

    #[test]
    fn single_trajectory_has_no_optimal_baseline() {
        let mut spec = DagSpec::new(2, &[(0, 1)], 0, &[1]);
        spec.rewards = Some(vec![2.0]);
        let env = Env::from_dag_spec(&spec).unwrap();
        let p = PolicySet::tabular(&env, BackwardKind::Learned);
        assert!(matches!(
            optimal_baseline(&p, &env),
            Err(Error::ZeroDenominator)
        ));
    }
}
