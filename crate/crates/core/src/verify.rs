//! Numerical checks of the gradient identities on random enumerable
//! instances, plus the constructions they rely on.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dag::{DagSpec, PointedDag, StateId};
use crate::env::{Env, EnvSpec, RewardTable};
use crate::error::{Error, Result};
use crate::exact::{
    expected_gradient_oracle, flow_propagate, jsd, oracle_on, pearson_log_correlation,
    target_distribution, PairedDistributions, Sampling, ScoreMoments,
};
use crate::hypergrid::HypergridSpec;
use crate::math::logsumexp;
use crate::nn::OptimizerKind;
use crate::objectives::{
    balance_batch_gradient, db_loss, f_divergence, BaselineKind, FKind, HubLayers, ObjectiveSpec,
    PbLoss, PfLoss,
};
use crate::policy::{
    trajectory_scores, BackwardKind, BehaviorConfig, Direction, PolicyCache, PolicyGrad, PolicySet,
};
use crate::trainer::{PolicyConfig, PolicyKind, TrainConfig, Trainer};

pub const TABULAR_TOLERANCE: f64 = 1e-8;
pub const MLP_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Suite {
    TbKl,
    Subnvi,
    Surrogate,
    Baseline,
    Dpi,
    FlowSolution,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::TbKl,
        Suite::Subnvi,
        Suite::Surrogate,
        Suite::Baseline,
        Suite::Dpi,
        Suite::FlowSolution,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::TbKl => "prop1",
            Suite::Subnvi => "subnvi",
            Suite::Surrogate => "surrogate",
            Suite::Baseline => "baseline",
            Suite::Dpi => "dpi",
            Suite::FlowSolution => "lemma-c1",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown suite {s:?}")))
    }
}

/// Policy parametrization used for oracle instances.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum OracleModel {
    Tabular,
    Mlp,
}

impl OracleModel {
    pub fn tolerance(self) -> f64 {
        match self {
            OracleModel::Tabular => TABULAR_TOLERANCE,
            OracleModel::Mlp => MLP_TOLERANCE,
        }
    }
}

impl FromStr for OracleModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tabular" => Ok(OracleModel::Tabular),
            "mlp" => Ok(OracleModel::Mlp),
            _ => Err(Error::InvalidSpec(format!("unknown policy model {s:?}"))),
        }
    }
}

/// One identity checked on one instance.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub suite: Suite,
    pub instance: usize,
    pub identity: String,
    pub discrepancy: f64,
    pub tolerance: f64,
}

impl Check {
    fn new(
        suite: Suite,
        instance: usize,
        identity: impl Into<String>,
        discrepancy: f64,
        tolerance: f64,
    ) -> Self {
        Self {
            suite,
            instance,
            identity: identity.into(),
            discrepancy,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.discrepancy <= self.tolerance
    }
}

/// Largest discrepancy per identity name, with its tolerance.
pub fn summarize(checks: &[Check]) -> Vec<(String, f64, f64, bool)> {
    let mut out: Vec<(String, f64, f64, bool)> = Vec::new();
    for c in checks {
        match out.iter_mut().find(|(name, ..)| *name == c.identity) {
            Some(entry) => {
                entry.1 = entry.1.max(c.discrepancy);
                entry.3 &= c.passed();
            }
            None => out.push((c.identity.clone(), c.discrepancy, c.tolerance, c.passed())),
        }
    }
    out
}

/// The RNG for instance `i` of a run seeded with `seed`.
pub fn instance_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64 + 1);
    rng
}

fn log_uniform_reward<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.gen_range(0.1f64.ln()..10f64.ln()).exp()
}

/// A graded DAG: the initial state followed by `layers` fully connected
/// layers of `widths` states; the last layer is terminating.
pub fn layered_env(widths: &[usize], rewards: &[f64]) -> Result<Env> {
    let mut prev = vec![0];
    let mut next_id = 1;
    let mut edges = Vec::new();
    let mut layer_index = vec![0];
    for (l, &w) in widths.iter().enumerate() {
        let layer: Vec<StateId> = (next_id..next_id + w).collect();
        next_id += w;
        for &a in &prev {
            for &b in &layer {
                edges.push((a, b));
            }
        }
        layer_index.extend(std::iter::repeat_n(l + 1, w));
        prev = layer;
    }
    let mut spec = DagSpec::new(next_id, &edges, 0, &prev);
    spec.layer_index = Some(layer_index);
    if rewards.len() != prev.len() {
        return Err(Error::DimensionMismatch {
            expected: prev.len(),
            got: rewards.len(),
        });
    }
    spec.rewards = Some(rewards.to_vec());
    Env::from_dag_spec(&spec)
}

/// Random graded instance with 2 to 4 layers after the initial one and 2 to
/// 4 states per layer.
pub fn random_layered_env<R: Rng + ?Sized>(rng: &mut R) -> Result<Env> {
    let depth = rng.gen_range(2..=4);
    let widths: Vec<usize> = (0..depth).map(|_| rng.gen_range(2..=4)).collect();
    let rewards: Vec<f64> = (0..*widths.last().unwrap())
        .map(|_| log_uniform_reward(rng))
        .collect();
    layered_env(&widths, &rewards)
}

/// Random pointed DAG on `n` states that need not be graded: each state
/// after the first gets at least one earlier parent plus random extra edges.
pub fn random_dag_env<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Result<Env> {
    let mut edges = Vec::new();
    for b in 1..n {
        let first = rng.gen_range(0..b);
        edges.push((first, b));
        for a in 0..b {
            if a != first && rng.gen_bool(0.3) {
                edges.push((a, b));
            }
        }
    }
    let mut has_child = vec![false; n];
    for &(a, _) in &edges {
        has_child[a] = true;
    }
    let terminating: Vec<StateId> = (0..n).filter(|&s| !has_child[s]).collect();
    let dag = PointedDag::new(n, &edges, 0, &terminating)?;
    let rewards: Vec<(StateId, f64)> = terminating
        .iter()
        .map(|&x| (x, log_uniform_reward(rng)))
        .collect();
    let table = RewardTable::new(&dag, &rewards)?;
    Ok(Env::from_parts(dag, table))
}

/// Random learned policies and `log Z`.
pub fn random_policy<R: Rng + ?Sized>(
    env: &Env,
    model: OracleModel,
    rng: &mut R,
) -> Result<PolicySet> {
    let mut p = match model {
        OracleModel::Tabular => PolicySet::random_tabular(env, BackwardKind::Learned, 1.5, rng),
        OracleModel::Mlp => PolicySet::mlp(env, &[8], BackwardKind::Learned, rng)?,
    };
    p.set_log_z(rng.gen_range(-2.0..2.0));
    Ok(p)
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn doubled(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| 2.0 * x).collect()
}

/// Identities of the TB gradient under `P_F` and `P_B` sampling, and the
/// invariance of the former to `log Z`.
pub fn check_tb_kl(env: &Env, policy: &PolicySet, tol: f64, instance: usize) -> Result<Vec<Check>> {
    let s = Suite::TbKl;
    let fwd = expected_gradient_oracle(policy, env, Sampling::Forward, None)?;
    let bwd = expected_gradient_oracle(policy, env, Sampling::Backward, None)?;
    let mut out = vec![
        Check::new(
            s,
            instance,
            "E_PF[grad_theta L_TB] = 2 grad_theta KL(PF||PB)",
            max_abs(
                &fwd.expected_loss_grad.forward,
                &doubled(&fwd.grad_kl_forward.forward),
            ),
            tol,
        ),
        Check::new(
            s,
            instance,
            "E_PB[grad_phi L_TB] = 2 grad_phi KL(PB||PF)",
            max_abs(
                &bwd.expected_loss_grad.backward,
                &doubled(&bwd.grad_kl_backward.backward),
            ),
            tol,
        ),
    ];
    let mut worst: f64 = 0.0;
    for delta in [-5.0, 5.0] {
        let mut shifted = policy.clone();
        shifted.set_log_z(policy.log_z() + delta);
        let g = expected_gradient_oracle(&shifted, env, Sampling::Forward, None)?;
        worst = worst.max(max_abs(
            &g.expected_loss_grad.forward,
            &fwd.expected_loss_grad.forward,
        ));
    }
    out.push(Check::new(
        s,
        instance,
        "E_PF[grad_theta L_TB] invariant to log Z +- 5",
        worst,
        tol,
    ));
    Ok(out)
}

/// `E_PF[grad_phi L_TB] = grad_phi[D_log2(PB||PF) + 2 (log Z - log Z_hat) KL(PF||PB)]`
/// at `log Z` shifted by each of `offsets`.
pub fn check_surrogate(
    env: &Env,
    policy: &PolicySet,
    offsets: &[f64],
    tol: f64,
    instance: usize,
) -> Result<Vec<Check>> {
    let log_z_hat = env.rewards().log_partition();
    let mut out = Vec::new();
    for &off in offsets {
        let mut p = policy.clone();
        p.set_log_z(policy.log_z() + off);
        let r = expected_gradient_oracle(&p, env, Sampling::Forward, None)?;
        let k = 2.0 * (p.log_z() - log_z_hat);
        let rhs: Vec<f64> = r
            .grad_log_squared
            .backward
            .iter()
            .zip(&r.grad_kl_forward_wrt_backward.backward)
            .map(|(a, b)| a + k * b)
            .collect();
        out.push(Check::new(
            Suite::Surrogate,
            instance,
            format!("E_PF[grad_phi L_TB] = surrogate gradient (log Z {off:+})"),
            max_abs(&r.expected_loss_grad.backward, &rhs),
            tol,
        ));
    }
    Ok(out)
}

/// Hub layers `{0, L/2, L}` with random log-flows on the middle layer.
pub fn random_mid_hubs<R: Rng + ?Sized>(
    env: &Env,
    policy: &mut PolicySet,
    rng: &mut R,
) -> Result<HubLayers> {
    let depth = env.dag().depth()?;
    let mid = depth / 2;
    let layers = env.dag().layers()?;
    for &s in &layers[mid] {
        policy.set_hub_flow(s, rng.gen_range(-2.0..2.0));
    }
    HubLayers::new(vec![0, mid, depth])
}

/// Subtrajectory identities per junction, and the two reductions.
pub fn check_subnvi<R: Rng + ?Sized>(
    env: &Env,
    policy: &PolicySet,
    tol: f64,
    instance: usize,
    rng: &mut R,
) -> Result<Vec<Check>> {
    let s = Suite::Subnvi;
    let mut out = Vec::new();
    let mut policy = policy.clone();
    let hubs = random_mid_hubs(env, &mut policy, rng)?;
    let mut cache = PolicyCache::new();
    for k in 0..hubs.num_segments() {
        let pair = PairedDistributions::subnvi(&policy, env, &mut cache, &hubs, k)?;
        let chk = oracle_on(&policy, env, &mut cache, &pair, Direction::Backward)?;
        out.push(Check::new(
            s,
            instance,
            format!("k={k}: E_pcheck[grad_phi L_SubTB] = 2 grad_phi KL(pcheck||phat)"),
            max_abs(
                &chk.expected_loss_grad.backward,
                &doubled(&chk.grad_kl_backward.backward),
            ),
            tol,
        ));
        let hat = oracle_on(&policy, env, &mut cache, &pair, Direction::Forward)?;
        out.push(Check::new(
            s,
            instance,
            format!("k={k}: E_phat[grad_theta L_SubTB] = 2 grad_theta KL(phat||pcheck)"),
            max_abs(
                &hat.expected_loss_grad.forward,
                &doubled(&hat.grad_kl_forward.forward),
            ),
            tol,
        ));
    }

    // Hubs {0, L}: the same numbers as the complete-trajectory identities.
    let ends = HubLayers::new(vec![0, env.dag().depth()?])?;
    let mut bits: f64 = 0.0;
    for side in [Direction::Forward, Direction::Backward] {
        let whole = expected_gradient_oracle(
            &policy,
            env,
            if side == Direction::Forward {
                Sampling::Forward
            } else {
                Sampling::Backward
            },
            None,
        )?;
        let sub =
            expected_gradient_oracle(&policy, env, Sampling::SubNvi { k: 0, side }, Some(&ends))?;
        bits = bits
            .max(
                whole
                    .expected_loss_grad
                    .max_abs_diff(&sub.expected_loss_grad),
            )
            .max(whole.grad_kl_forward.max_abs_diff(&sub.grad_kl_forward))
            .max(whole.grad_kl_backward.max_abs_diff(&sub.grad_kl_backward));
    }
    out.push(Check::new(
        s,
        instance,
        "hubs {0,L} reproduce the complete-trajectory oracle bitwise",
        bits,
        0.0,
    ));

    // Hubs at every layer: SubTB is the sum of DB losses over edges.
    let mut all = policy.clone();
    let dag = env.dag();
    for st in 0..env.num_states() {
        if st != dag.initial() && !dag.is_terminating(st) && !all.hub_flows().contains_key(&st) {
            all.set_hub_flow(st, rng.gen_range(-2.0..2.0));
        }
    }
    let spec = ObjectiveSpec {
        hub_layers: Some(HubLayers::all(dag.depth()?)),
        ..ObjectiveSpec::new(PfLoss::SubTb, PbLoss::SameAsPf)
    };
    let mut worst: f64 = 0.0;
    for t in crate::exact::enumerate_trajectories(&all, env, &mut cache)? {
        let (loss, grad) =
            balance_batch_gradient(&spec, &all, env, &mut cache, std::slice::from_ref(&t))?;
        let mut db_total = 0.0;
        let mut db_grad = PolicyGrad::zeros(&all);
        for w in t.states.windows(2) {
            let (l, g) = db_loss(&all, env, &mut cache, w[0], w[1])?;
            db_total += l;
            db_grad.add_scaled(&g, 1.0);
        }
        worst = worst
            .max((loss - db_total).abs())
            .max(grad.max_abs_diff(&db_grad));
    }
    out.push(Check::new(
        s,
        instance,
        "hubs at every layer give the summed DB losses",
        worst,
        1e-12,
    ));
    Ok(out)
}

/// Baseline variance ordering and the zero-mean score.
pub fn check_baselines(env: &Env, policy: &PolicySet, instance: usize) -> Result<Vec<Check>> {
    let s = Suite::Baseline;
    let m = ScoreMoments::new(policy, env)?;
    let b_star = m.optimal_baseline()?;
    let (t_star, t_mean, t_zero) = (
        m.covariance_trace(b_star),
        m.covariance_trace(m.mean_signal()),
        m.covariance_trace(0.0),
    );
    let rel = |a: f64, b: f64| ((a - b) / b.abs().max(1.0)).max(0.0);
    Ok(vec![
        Check::new(
            s,
            instance,
            "trace at b* <= trace at E[c]",
            rel(t_star, t_mean),
            1e-12,
        ),
        Check::new(
            s,
            instance,
            "trace at E[c] <= trace at 0",
            rel(t_mean, t_zero),
            1e-12,
        ),
        Check::new(
            s,
            instance,
            "E_PF[grad log P_F] = 0",
            m.mean_score().iter().fold(0.0, |a: f64, v| a.max(v.abs())),
            1e-12,
        ),
    ])
}

/// Data-processing inequality for both KL directions.
pub fn check_dpi(env: &Env, policy: &PolicySet, instance: usize) -> Result<Vec<Check>> {
    let mut cache = PolicyCache::new();
    let pair = PairedDistributions::complete(policy, env, &mut cache)?;
    let pf_top = flow_propagate(policy, env)?;
    let target = target_distribution(env);
    let mut out = Vec::new();
    for (f, name) in [
        (FKind::TLogT, "KL(R/Z||PF_top) <= KL(PB||PF)"),
        (FKind::NegLog, "KL(PF_top||R/Z) <= KL(PF||PB)"),
    ] {
        let lhs = f_divergence(&target, &pf_top, f)?;
        let rhs = f_divergence(&pair.bwd, &pair.fwd, f)?;
        out.push(Check::new(
            Suite::Dpi,
            instance,
            name,
            (lhs - rhs).max(0.0),
            1e-12,
        ));
    }
    Ok(out)
}

/// Sets `P_F`, `log Z`, and hub flows from backward flows
/// `F(s) = sum_children F(c) P_B(s | c)` with `F = R` on terminating states,
/// so that every `p_hat_k` equals `p_check_k`. Requires a tabular `P_F`.
pub fn construct_flow_solution(
    env: &Env,
    policy: &mut PolicySet,
    hubs: Option<&HubLayers>,
) -> Result<()> {
    let dag = env.dag();
    let n = env.num_states();
    let mut log_flow = vec![f64::NEG_INFINITY; n];
    let mut pb = vec![Vec::new(); n];
    for s in 0..n {
        if s != dag.initial() {
            pb[s] = policy.action_logprobs(env, s, Direction::Backward, 0.0)?;
        }
    }
    let offsets = env.forward_offsets().to_vec();
    let mut logits = vec![0.0; *offsets.last().unwrap()];
    for &s in dag.topological_order().iter().rev() {
        if dag.is_terminating(s) {
            log_flow[s] = env.rewards().log_reward(s);
            continue;
        }
        let terms: Vec<f64> = dag
            .children(s)
            .iter()
            .map(|&c| Ok(log_flow[c] + pb[c][dag.parent_position(c, s)?]))
            .collect::<Result<_>>()?;
        log_flow[s] = logsumexp(&terms);
        logits[offsets[s]..offsets[s + 1]].copy_from_slice(&terms);
    }
    let fwd = policy.params_mut(Direction::Forward);
    if fwd.len() != logits.len() {
        return Err(Error::InvalidSpec(
            "flow construction needs a tabular forward policy".into(),
        ));
    }
    fwd.copy_from_slice(&logits);
    policy.set_log_z(log_flow[dag.initial()]);
    policy.hub_flows_mut().clear();
    if let Some(h) = hubs {
        let layers = dag.layers()?;
        for &l in h.layers() {
            for &s in &layers[l] {
                if s != dag.initial() && !dag.is_terminating(s) {
                    policy.set_hub_flow(s, log_flow[s]);
                }
            }
        }
    }
    Ok(())
}

fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[piv][col] == 0.0 {
            return Err(Error::ZeroDenominator);
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Ok(x)
}

/// Drives every per-trajectory TB residual of a tabular policy towards zero
/// with damped Gauss-Newton steps on the enumerated residual vector.
/// Returns the largest per-trajectory TB loss reached.
pub fn solve_tb_exactly(env: &Env, policy: &mut PolicySet, max_iters: usize) -> Result<f64> {
    let mut cache = PolicyCache::new();
    let log_r = |x| env.rewards().log_reward(x);
    let mut worst = f64::INFINITY;
    for _ in 0..max_iters {
        let trajs = crate::exact::enumerate_trajectories(policy, env, &mut cache)?;
        let r: Vec<f64> = trajs
            .iter()
            .map(|t| policy.log_z() + t.log_pf - log_r(t.last()) - t.log_pb)
            .collect();
        worst = r.iter().map(|v| v * v).fold(0.0, f64::max);
        if worst < 1e-26 {
            break;
        }
        let mut rows = Vec::with_capacity(trajs.len());
        for t in &trajs {
            let (f, b) = trajectory_scores(policy, env, &mut cache, t)?;
            let mut row = f.forward;
            row.extend(b.backward.iter().map(|v| -v));
            row.push(1.0);
            rows.push(row);
        }
        let m = rows.len();
        let gram: Vec<Vec<f64>> = (0..m)
            .map(|i| {
                (0..m)
                    .map(|j| {
                        let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                        if i == j {
                            dot + 1e-12
                        } else {
                            dot
                        }
                    })
                    .collect()
            })
            .collect();
        let y = solve_linear(gram, r)?;
        let dim = rows[0].len();
        let mut delta = vec![0.0; dim];
        for (row, &yi) in rows.iter().zip(&y) {
            for (d, v) in delta.iter_mut().zip(row) {
                *d -= v * yi;
            }
        }
        let nf = policy.forward().num_params();
        let nb = policy.backward().num_params();
        for (p, d) in policy
            .params_mut(Direction::Forward)
            .iter_mut()
            .zip(&delta[..nf])
        {
            *p += d;
        }
        for (p, d) in policy
            .params_mut(Direction::Backward)
            .iter_mut()
            .zip(&delta[nf..nf + nb])
        {
            *p += d;
        }
        policy.set_log_z(policy.log_z() + delta[nf + nb]);
    }
    Ok(worst)
}

/// A random graded instance with at most `max_trajectories` complete trajectories.
pub fn small_layered_env<R: Rng + ?Sized>(rng: &mut R, max_trajectories: usize) -> Result<Env> {
    loop {
        let env = random_layered_env(rng)?;
        if env.dag().count_complete_trajectories() <= max_trajectories as f64 {
            return Ok(env);
        }
    }
}

/// Flow construction and zero-loss soundness on one instance.
pub fn check_flow_solution<R: Rng + ?Sized>(rng: &mut R, instance: usize) -> Result<Vec<Check>> {
    let s = Suite::FlowSolution;
    let mut out = Vec::new();

    let env = random_layered_env(rng)?;
    let mut policy = random_policy(&env, OracleModel::Tabular, rng)?;
    let depth = env.dag().depth()?;
    let hubs = HubLayers::new(vec![0, depth / 2, depth])?;
    construct_flow_solution(&env, &mut policy, Some(&hubs))?;
    let mut cache = PolicyCache::new();
    let mut gap: f64 = 0.0;
    for k in 0..hubs.num_segments() {
        let pair = PairedDistributions::subnvi(&policy, &env, &mut cache, &hubs, k)?;
        gap = gap.max(max_abs(&pair.fwd.probs, &pair.bwd.probs));
    }
    out.push(Check::new(
        s,
        instance,
        "constructed flows: max |phat_k - pcheck_k|",
        gap,
        1e-12,
    ));
    let d = jsd(&flow_propagate(&policy, &env)?, &target_distribution(&env))?;
    out.push(Check::new(
        s,
        instance,
        "constructed flows: JSD(PF_top, R/Z)",
        d,
        1e-6,
    ));

    let env = small_layered_env(rng, 20)?;
    let mut policy = random_policy(&env, OracleModel::Tabular, rng)?;
    let worst = solve_tb_exactly(&env, &mut policy, 200)?;
    out.push(Check::new(
        s,
        instance,
        "solved TB: max per-trajectory loss",
        worst,
        1e-16,
    ));
    let pf_top = flow_propagate(&policy, &env)?;
    let d = jsd(&pf_top, &target_distribution(&env))?;
    out.push(Check::new(
        s,
        instance,
        "solved TB: JSD(PF_top, R/Z)",
        d,
        1e-6,
    ));
    let rho = pearson_log_correlation(&pf_top, &env)?;
    out.push(Check::new(
        s,
        instance,
        "solved TB: |Pearson(log PF_top, log R) - 1|",
        (rho - 1.0).abs(),
        1e-9,
    ));
    Ok(out)
}

/// Outcome of running reverse KL with a global baseline next to TB.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LockstepReport {
    pub steps: usize,
    pub max_param_divergence: f64,
    pub max_baseline_gap: f64,
}

/// Runs on-policy TB (log Z by SGD at `eta / 2`) and on-policy reverse KL
/// with a global baseline (`eta`) side by side from the same initialization
/// and sampling stream, with `P_B` fixed uniform and plain SGD on `P_F`
/// (reverse KL at twice the TB learning rate).
pub fn baseline_lockstep(steps: usize, seed: u64, eta: f64, lr_tb: f64) -> Result<LockstepReport> {
    let env = EnvSpec::Hypergrid(HypergridSpec::new(8, 2, 0.1)?);
    let base = |objective| {
        let mut c = TrainConfig::new(env.clone(), objective);
        c.policy = PolicyConfig {
            kind: PolicyKind::Mlp,
            hidden: vec![64, 64],
            backward: BackwardKind::Uniform,
        };
        c.behavior = BehaviorConfig::on_policy();
        c.optimizer_pf = OptimizerKind::Sgd;
        c.optimizer_log_z = OptimizerKind::Sgd;
        c.total_trajectories = u64::MAX;
        c.eval_every = u64::MAX;
        c.seed = seed;
        c.jsd = false;
        c
    };
    let mut tb_cfg = base(ObjectiveSpec::tb());
    tb_cfg.lr_pf = lr_tb;
    tb_cfg.lr_log_z = eta / 2.0;
    let mut rkl_cfg = base(ObjectiveSpec {
        pb_loss: PbLoss::Fixed,
        ..ObjectiveSpec::reverse_kl(BaselineKind::Global, eta)
    });
    rkl_cfg.lr_pf = 2.0 * lr_tb;
    let mut tb = Trainer::new(tb_cfg)?;
    let mut rkl = Trainer::new(rkl_cfg)?;
    let mut report = LockstepReport {
        steps,
        max_param_divergence: max_abs(
            tb.policy().forward().params(),
            rkl.policy().forward().params(),
        ),
        max_baseline_gap: (rkl.baseline().b_global + tb.policy().log_z()).abs(),
    };
    for _ in 0..steps {
        tb.step_with(64)?;
        rkl.step_with(64)?;
        let d = max_abs(
            tb.policy().forward().params(),
            rkl.policy().forward().params(),
        );
        let g = (rkl.baseline().b_global + tb.policy().log_z()).abs();
        report.max_param_divergence = report.max_param_divergence.max(d);
        report.max_baseline_gap = report.max_baseline_gap.max(g);
    }
    Ok(report)
}

/// Runs `suite` on `instances` random instances.
pub fn run_suite(
    suite: Suite,
    seed: u64,
    instances: usize,
    model: OracleModel,
) -> Result<Vec<Check>> {
    let tol = model.tolerance();
    let mut out = Vec::new();
    for i in 0..instances {
        let mut rng = instance_rng(seed, i);
        match suite {
            Suite::TbKl | Suite::Surrogate | Suite::Subnvi | Suite::Baseline => {
                let env = random_layered_env(&mut rng)?;
                let policy = random_policy(&env, model, &mut rng)?;
                out.extend(match suite {
                    Suite::TbKl => check_tb_kl(&env, &policy, tol, i)?,
                    Suite::Surrogate => check_surrogate(&env, &policy, &[0.0, -2.5, 4.0], tol, i)?,
                    Suite::Subnvi => check_subnvi(&env, &policy, tol, i, &mut rng)?,
                    _ => check_baselines(&env, &policy, i)?,
                });
            }
            Suite::Dpi => {
                let env = if i % 2 == 0 {
                    random_layered_env(&mut rng)?
                } else {
                    let n = rng.gen_range(4..=9);
                    random_dag_env(&mut rng, n)?
                };
                let policy = random_policy(&env, model, &mut rng)?;
                out.extend(check_dpi(&env, &policy, i)?);
            }
            Suite::FlowSolution => out.extend(check_flow_solution(&mut rng, i)?),
        }
    }
    if suite == Suite::Baseline && instances > 0 {
        let r = baseline_lockstep(100, seed, 0.1, 0.01)?;
        out.push(Check::new(
            suite,
            instances,
            "lockstep: max |theta_TB - theta_RKL| over 100 steps",
            r.max_param_divergence,
            1e-10,
        ));
        out.push(Check::new(
            suite,
            instances,
            "lockstep: max |b_global + log Z| over 100 steps",
            r.max_baseline_gap,
            1e-10,
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn layered_env_shape() {
        let env = layered_env(&[2, 3], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(env.num_states(), 6);
        assert_eq!(env.dag().depth().unwrap(), 2);
        assert_eq!(env.dag().count_complete_trajectories(), 6.0);
    }

    #[test]
    fn random_dags_are_valid() {
        let mut rng = instance_rng(1, 0);
        for n in 2..12 {
            let env = random_dag_env(&mut rng, n).unwrap();
            assert_eq!(env.num_states(), n);
        }
    }

    #[test]
    fn linear_solver() {
        let x = solve_linear(vec![vec![2.0, 1.0], vec![1.0, 3.0]], vec![3.0, 5.0]).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-15 && (x[1] - 1.4).abs() < 1e-15);
    }
}
