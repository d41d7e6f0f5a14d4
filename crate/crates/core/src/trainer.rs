//! Experiment driver: configuration, the training loop, exact evaluation,
//! metrics logging, and checkpoints.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Env, EnvSpec};
use crate::error::{Error, Result};
use crate::exact::{expected_reward, expected_tb_loss, flow_propagate, jsd, target_distribution};
use crate::nn::{Optimizer, OptimizerKind};
use crate::objectives::{
    f_divergence, objective_gradient, BaselineKind, BaselineState, ObjectiveSpec, PbLoss, PfLoss,
};
use crate::policy::{
    sample_trajectory, BackwardKind, BehaviorConfig, Direction, PolicyCache, PolicyGrad,
    PolicyModel, PolicySet,
};

/// Environments above this many states skip exact JSD evaluation.
pub const JSD_STATE_CAP: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Tabular,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    #[serde(default = "PolicyConfig::default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "PolicyConfig::default_backward")]
    pub backward: BackwardKind,
}

impl PolicyConfig {
    fn default_hidden() -> Vec<usize> {
        vec![256, 256]
    }

    fn default_backward() -> BackwardKind {
        BackwardKind::Learned
    }
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            kind: PolicyKind::Mlp,
            hidden: Self::default_hidden(),
            backward: Self::default_backward(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub patience_evals: u32,
    pub factor: f64,
}

macro_rules! defaults {
    ($($name:ident: $ty:ty = $val:expr;)*) => {
        $(fn $name() -> $ty { $val })*
    };
}

defaults! {
    default_batch: usize = 64;
    default_total: u64 = 1_000_000;
    default_lr: f64 = 1e-3;
    default_lr_log_z: f64 = 0.1;
    default_adam: OptimizerKind = OptimizerKind::Adam;
    default_sgd: OptimizerKind = OptimizerKind::Sgd;
    default_eval_every: u64 = 500 * 64;
    default_true: bool = true;
    default_behavior: BehaviorConfig = BehaviorConfig::on_policy();
}

/// A full experiment description, read from a JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub env: EnvSpec,
    pub objective: ObjectiveSpec,
    #[serde(default = "default_behavior")]
    pub behavior: BehaviorConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_total")]
    pub total_trajectories: u64,
    #[serde(default = "default_lr")]
    pub lr_pf: f64,
    #[serde(default = "default_lr")]
    pub lr_pb: f64,
    #[serde(default = "default_lr_log_z")]
    pub lr_log_z: f64,
    #[serde(default = "default_lr")]
    pub lr_flows: f64,
    #[serde(default = "default_adam")]
    pub optimizer_pf: OptimizerKind,
    #[serde(default = "default_adam")]
    pub optimizer_pb: OptimizerKind,
    #[serde(default = "default_sgd")]
    pub optimizer_log_z: OptimizerKind,
    /// Momentum for every SGD optimizer.
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub log_z_init: f64,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub lr_plateau: Option<PlateauConfig>,
    #[serde(default)]
    pub clip_grad_norm: Option<f64>,
    /// Compute the exact JSD at evaluations.
    #[serde(default = "default_true")]
    pub jsd: bool,
}

impl TrainConfig {
    pub fn new(env: EnvSpec, objective: ObjectiveSpec) -> Self {
        Self {
            env,
            objective,
            behavior: default_behavior(),
            policy: PolicyConfig::default(),
            batch_size: default_batch(),
            total_trajectories: default_total(),
            lr_pf: default_lr(),
            lr_pb: default_lr(),
            lr_log_z: default_lr_log_z(),
            lr_flows: default_lr(),
            optimizer_pf: default_adam(),
            optimizer_pb: default_adam(),
            optimizer_log_z: default_sgd(),
            momentum: 0.0,
            log_z_init: 0.0,
            eval_every: default_eval_every(),
            seed: 0,
            lr_plateau: None,
            clip_grad_norm: None,
            jsd: true,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        for (name, lr) in [
            ("lr_pf", self.lr_pf),
            ("lr_pb", self.lr_pb),
            ("lr_log_z", self.lr_log_z),
            ("lr_flows", self.lr_flows),
        ] {
            if !(lr > 0.0) || !lr.is_finite() {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if self.eval_every < 1 {
            return bad("eval_every must be >= 1".into());
        }
        if let Some(p) = self.lr_plateau {
            if !(p.factor > 0.0 && p.factor < 1.0) {
                return bad(format!(
                    "lr_plateau.factor must lie in (0, 1), got {}",
                    p.factor
                ));
            }
            if p.patience_evals == 0 {
                return bad("lr_plateau.patience_evals must be >= 1".into());
            }
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return bad(format!("clip_grad_norm must be positive, got {c}"));
            }
        }
        if !self.log_z_init.is_finite() {
            return bad("log_z_init must be finite".into());
        }
        Ok(())
    }
}

/// One exact evaluation of the current sampler.
///
/// `NaN` fields are written as `null` in JSON and read back as `NaN`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub trajectories_seen: u64,
    /// `NaN` when exact evaluation is disabled.
    #[serde(deserialize_with = "null_as_nan")]
    pub jsd: f64,
    #[serde(rename = "log_Z_estimate", deserialize_with = "null_as_nan")]
    pub log_z_estimate: f64,
    /// Exact `E_{P_F}[L_TB]` at the current `log Z` estimate.
    #[serde(deserialize_with = "null_as_nan")]
    pub mean_loss: f64,
    /// Exact `E_{P_F^T}[R]`.
    #[serde(deserialize_with = "null_as_nan")]
    pub mean_reward: f64,
    /// Largest self-normalized weight since the previous row; `NaN` if no
    /// weighted estimator ran.
    #[serde(deserialize_with = "null_as_nan")]
    pub max_importance_weight: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub eps_current: f64,
    pub wall_ms: u64,
}

fn null_as_nan<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

pub const METRICS_HEADER: [&str; 8] = [
    "trajectories_seen",
    "jsd",
    "log_Z_estimate",
    "mean_loss",
    "mean_reward",
    "max_importance_weight",
    "eps_current",
    "wall_ms",
];

impl MetricsRow {
    fn record(&self) -> [String; 8] {
        [
            self.trajectories_seen.to_string(),
            self.jsd.to_string(),
            self.log_z_estimate.to_string(),
            self.mean_loss.to_string(),
            self.mean_reward.to_string(),
            self.max_importance_weight.to_string(),
            self.eps_current.to_string(),
            self.wall_ms.to_string(),
        ]
    }

    /// Equality ignoring wall time, treating `NaN` as equal to `NaN`.
    pub fn same_values(&self, other: &MetricsRow) -> bool {
        let eq = |a: f64, b: f64| a.to_bits() == b.to_bits();
        self.trajectories_seen == other.trajectories_seen
            && eq(self.jsd, other.jsd)
            && eq(self.log_z_estimate, other.log_z_estimate)
            && eq(self.mean_loss, other.mean_loss)
            && eq(self.mean_reward, other.mean_reward)
            && eq(self.max_importance_weight, other.max_importance_weight)
            && eq(self.eps_current, other.eps_current)
    }
}

pub fn write_metrics_csv<W: std::io::Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: std::io::Read>(input: R) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_HEADER {
        return Err(Error::InvalidSpec(format!(
            "unexpected metrics header {header:?}"
        )));
    }
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

/// Saved sampler state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub policy: PolicySet,
    #[serde(default)]
    pub b_global: Option<f64>,
    #[serde(default)]
    pub trajectories_seen: u64,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn log_z_estimate(&self) -> f64 {
        self.b_global.map_or(self.policy.log_z(), |b| -b)
    }
}

/// Exact metrics for a checkpoint, without touching any training state.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    env: &Env,
    with_jsd: bool,
) -> Result<MetricsRow> {
    checkpoint.policy.check_compatible(env)?;
    let mut row = exact_row(
        &checkpoint.policy,
        env,
        checkpoint.log_z_estimate(),
        with_jsd,
    )?;
    row.trajectories_seen = checkpoint.trajectories_seen;
    Ok(row)
}

fn exact_row(
    policy: &PolicySet,
    env: &Env,
    log_z_estimate: f64,
    with_jsd: bool,
) -> Result<MetricsRow> {
    let pf_top = flow_propagate(policy, env)?;
    let jsd = if with_jsd {
        if env.num_states() > JSD_STATE_CAP {
            return Err(Error::CapExceeded { cap: JSD_STATE_CAP });
        }
        jsd(&pf_top, &target_distribution(env))?
    } else {
        f64::NAN
    };
    Ok(MetricsRow {
        trajectories_seen: 0,
        jsd,
        log_z_estimate,
        mean_loss: expected_tb_loss(policy, env, log_z_estimate)?,
        mean_reward: expected_reward(&pf_top, env),
        max_importance_weight: f64::NAN,
        eps_current: 0.0,
        wall_ms: 0,
    })
}

#[cfg(not(target_arch = "wasm32"))]
struct Clock(std::time::Instant);

#[cfg(not(target_arch = "wasm32"))]
impl Clock {
    fn start() -> Self {
        Self(std::time::Instant::now())
    }
    fn ms(&self) -> u64 {
        self.0.elapsed().as_millis() as u64
    }
}

#[cfg(target_arch = "wasm32")]
struct Clock;

#[cfg(target_arch = "wasm32")]
impl Clock {
    fn start() -> Self {
        Self
    }
    fn ms(&self) -> u64 {
        0
    }
}

/// What happened in one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub batch: usize,
    pub loss: f64,
    pub skipped: bool,
    pub row: Option<MetricsRow>,
}

/// Stateful training loop over one configuration.
pub struct Trainer {
    config: TrainConfig,
    env: Env,
    policy: PolicySet,
    cache: PolicyCache,
    rng: ChaCha8Rng,
    opt_pf: Optimizer,
    opt_pb: Optimizer,
    opt_log_z: Optimizer,
    opt_flows: Optimizer,
    baseline: BaselineState,
    last_signal_mean: f64,
    batches: u64,
    seen: u64,
    nonfinite_skips: u64,
    degenerate_batches: u64,
    max_weight: f64,
    rows: Vec<MetricsRow>,
    jsd_enabled: bool,
    best_jsd: f64,
    stale_evals: u32,
    clock: Clock,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let env = Env::from_spec(&config.env)?;
        Self::with_env(config, env)
    }

    /// Builds a trainer on an already constructed environment (the config's
    /// `env` field is then informational only).
    pub fn with_env(config: TrainConfig, env: Env) -> Result<Self> {
        config.validate()?;
        config.objective.validate(&env)?;
        config.behavior.validate(&env)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut policy = match config.policy.kind {
            PolicyKind::Tabular => PolicySet::tabular(&env, config.policy.backward),
            PolicyKind::Mlp => PolicySet::mlp(
                &env,
                &config.policy.hidden,
                config.policy.backward,
                &mut rng,
            )?,
        };
        policy.set_log_z(config.log_z_init);
        init_hub_flows(&mut policy, &env, &config.objective)?;
        Self::from_parts(config, env, policy, rng)
    }

    /// Resumes from an explicit policy; the sampling stream starts at `seed`.
    pub fn with_policy(config: TrainConfig, env: Env, policy: PolicySet) -> Result<Self> {
        config.validate()?;
        config.objective.validate(&env)?;
        config.behavior.validate(&env)?;
        policy.check_compatible(&env)?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::from_parts(config, env, policy, rng)
    }

    fn from_parts(
        config: TrainConfig,
        env: Env,
        policy: PolicySet,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        let m = config.momentum;
        let opt_pf = Optimizer::new(
            config.optimizer_pf,
            policy.forward().num_params(),
            config.lr_pf,
            m,
        );
        let opt_pb = Optimizer::new(
            config.optimizer_pb,
            policy.backward().num_params(),
            config.lr_pb,
            m,
        );
        let opt_log_z = Optimizer::new(config.optimizer_log_z, 1, config.lr_log_z, m);
        let opt_flows = Optimizer::new(
            config.optimizer_pf,
            policy.hub_flows().len(),
            config.lr_flows,
            m,
        );
        let jsd_enabled = config.jsd && env.num_states() <= JSD_STATE_CAP;
        if config.jsd && !jsd_enabled {
            log::warn!(
                "environment has {} states; exact JSD evaluation disabled",
                env.num_states()
            );
        }
        Ok(Self {
            baseline: BaselineState::new(config.objective.eta)?,
            config,
            env,
            policy,
            cache: PolicyCache::new(),
            rng,
            opt_pf,
            opt_pb,
            opt_log_z,
            opt_flows,
            last_signal_mean: f64::NAN,
            batches: 0,
            seen: 0,
            nonfinite_skips: 0,
            degenerate_batches: 0,
            max_weight: f64::NAN,
            rows: Vec::new(),
            jsd_enabled,
            best_jsd: f64::INFINITY,
            stale_evals: 0,
            clock: Clock::start(),
        })
    }

    pub fn env(&self) -> &Env {
        &self.env
    }

    pub fn policy(&self) -> &PolicySet {
        &self.policy
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn baseline(&self) -> &BaselineState {
        &self.baseline
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn trajectories_seen(&self) -> u64 {
        self.seen
    }

    pub fn batches(&self) -> u64 {
        self.batches
    }

    pub fn nonfinite_skips(&self) -> u64 {
        self.nonfinite_skips
    }

    pub fn is_done(&self) -> bool {
        self.seen >= self.config.total_trajectories
    }

    fn uses_global_baseline(&self) -> bool {
        !self.config.objective.pf_loss.is_balance()
            && self.config.objective.baseline == BaselineKind::Global
    }

    /// Current estimate of `log Z_hat`.
    pub fn log_z_estimate(&self) -> f64 {
        if self.config.objective.pf_loss.is_balance() {
            self.policy.log_z()
        } else if self.config.objective.baseline == BaselineKind::Global {
            -self.baseline.b_global
        } else {
            -self.last_signal_mean
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            policy: self.policy.clone(),
            b_global: self
                .uses_global_baseline()
                .then_some(self.baseline.b_global),
            trajectories_seen: self.seen,
        }
    }

    /// Trains on the next batch (truncated to the remaining budget).
    pub fn step(&mut self) -> Result<StepOutcome> {
        let remaining = self.config.total_trajectories.saturating_sub(self.seen);
        let b = (self.config.batch_size as u64).min(remaining) as usize;
        if b == 0 {
            return Ok(StepOutcome {
                batch: 0,
                loss: f64::NAN,
                skipped: true,
                row: None,
            });
        }
        self.step_with(b)
    }

    /// Samples `b` trajectories and applies one update.
    pub fn step_with(&mut self, b: usize) -> Result<StepOutcome> {
        let t = self.batches;
        let mut batch = Vec::with_capacity(b);
        for _ in 0..b {
            batch.push(sample_trajectory(
                &self.policy,
                &self.env,
                &self.config.behavior,
                t,
                &mut self.rng,
                &mut self.cache,
            )?);
        }
        let weighted = self.config.behavior.is_off_policy(t);
        let g = objective_gradient(
            &self.config.objective,
            &self.policy,
            &self.env,
            &mut self.cache,
            &batch,
            &self.baseline,
            weighted,
        )?;
        let skipped = !(g.loss.is_finite() && g.grad.is_finite() && g.signal_mean.is_finite());
        if skipped {
            self.nonfinite_skips += 1;
            log::warn!("non-finite loss or gradient at batch {t}; step skipped");
        } else {
            if let Some(w) = g.max_weight {
                self.max_weight = if self.max_weight.is_nan() {
                    w
                } else {
                    self.max_weight.max(w)
                };
            }
            if g.degenerate {
                self.degenerate_batches += 1;
            }
            let mut grad = g.grad;
            if let Some(c) = self.config.clip_grad_norm {
                let n = grad.norm();
                if n > c {
                    grad.scale(c / n);
                }
            }
            self.apply(&grad)?;
            self.last_signal_mean = g.signal_mean;
            if self.uses_global_baseline() {
                self.baseline.update(g.signal_mean);
            }
        }
        self.batches += 1;
        let before = self.seen;
        self.seen += b as u64;
        let every = self.config.eval_every;
        let crossed = self.seen / every > before / every;
        let row = if crossed || self.is_done() {
            Some(self.evaluate_now()?)
        } else {
            None
        };
        Ok(StepOutcome {
            batch: b,
            loss: g.loss,
            skipped,
            row,
        })
    }

    fn apply(&mut self, g: &PolicyGrad) -> Result<()> {
        let obj = &self.config.objective;
        if !g.forward.is_empty() {
            self.opt_pf
                .step(self.policy.params_mut(Direction::Forward), &g.forward)?;
        }
        let pb_trained = obj.effective_pb_loss() != PbLoss::Fixed
            && !matches!(self.policy.backward(), PolicyModel::Uniform)
            && !g.backward.is_empty();
        if pb_trained {
            self.opt_pb
                .step(self.policy.params_mut(Direction::Backward), &g.backward)?;
        }
        if obj.pf_loss.is_balance() {
            let mut z = [self.policy.log_z()];
            self.opt_log_z.step(&mut z, &[g.log_z])?;
            self.policy.set_log_z(z[0]);
            if !self.policy.hub_flows().is_empty() {
                let keys: Vec<_> = self.policy.hub_flows().keys().copied().collect();
                let grads: Vec<f64> = keys
                    .iter()
                    .map(|k| g.log_flows.get(k).copied().unwrap_or(0.0))
                    .collect();
                let mut vals: Vec<f64> = self.policy.hub_flows().values().copied().collect();
                self.opt_flows.step(&mut vals, &grads)?;
                for (k, v) in keys.into_iter().zip(vals) {
                    self.policy.set_hub_flow(k, v);
                }
            }
        }
        Ok(())
    }

    fn evaluate_now(&mut self) -> Result<MetricsRow> {
        let mut row = exact_row(
            &self.policy,
            &self.env,
            self.log_z_estimate(),
            self.jsd_enabled,
        )?;
        row.trajectories_seen = self.seen;
        row.max_importance_weight = self.max_weight;
        row.eps_current = self.config.behavior.epsilon(self.batches.saturating_sub(1));
        row.wall_ms = self.clock.ms();
        self.max_weight = f64::NAN;
        if let Some(p) = self.config.lr_plateau {
            if row.jsd < self.best_jsd {
                self.best_jsd = row.jsd;
                self.stale_evals = 0;
            } else {
                self.stale_evals += 1;
                if self.stale_evals >= p.patience_evals {
                    for opt in [
                        &mut self.opt_pf,
                        &mut self.opt_pb,
                        &mut self.opt_log_z,
                        &mut self.opt_flows,
                    ] {
                        opt.scale_lr(p.factor);
                    }
                    self.stale_evals = 0;
                }
            }
        }
        self.rows.push(row.clone());
        Ok(row)
    }

    /// Runs until the trajectory budget is spent.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(())
    }

    pub fn summary(&self) -> Result<RunSummary> {
        let pf_top = flow_propagate(&self.policy, &self.env)?;
        let divergence = if self.jsd_enabled {
            f_divergence(
                &target_distribution(&self.env),
                &pf_top,
                self.config.objective.fkind,
            )
            .ok()
        } else {
            None
        };
        Ok(RunSummary {
            seed: self.config.seed,
            trajectories_seen: self.seen,
            batches: self.batches,
            nonfinite_skips: self.nonfinite_skips,
            degenerate_weight_batches: self.degenerate_batches,
            log_z_estimate: self.log_z_estimate(),
            log_z_true: self.env.rewards().log_partition(),
            divergence,
            final_metrics: self.rows.last().cloned(),
        })
    }
}

/// Adds zero-initialized log-flows at every state a balance loss needs.
fn init_hub_flows(policy: &mut PolicySet, env: &Env, objective: &ObjectiveSpec) -> Result<()> {
    let dag = env.dag();
    let interior = |s: usize| s != dag.initial() && !dag.is_terminating(s);
    match objective.pf_loss {
        PfLoss::Db => {
            for s in (0..env.num_states()).filter(|&s| interior(s)) {
                policy.set_hub_flow(s, 0.0);
            }
        }
        PfLoss::SubTb => {
            let layers = dag.layers()?;
            for &l in objective.hubs(env)?.layers() {
                for &s in layers[l].iter().filter(|&&s| interior(s)) {
                    policy.set_hub_flow(s, 0.0);
                }
            }
        }
        _ => {}
    }
    Ok(())
}

/// Final JSON summary of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub trajectories_seen: u64,
    pub batches: u64,
    pub nonfinite_skips: u64,
    pub degenerate_weight_batches: u64,
    #[serde(rename = "log_Z_estimate")]
    pub log_z_estimate: f64,
    #[serde(rename = "log_Z_true")]
    pub log_z_true: f64,
    /// Exact `D_f(R / Z_hat || P_F^T)` for the configured `fkind`.
    pub divergence: Option<f64>,
    pub final_metrics: Option<MetricsRow>,
}

/// Everything a finished run produces.
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    pub checkpoint: Checkpoint,
    pub summary: RunSummary,
}

pub fn train_run(config: TrainConfig) -> Result<RunOutput> {
    let mut trainer = Trainer::new(config)?;
    trainer.run()?;
    Ok(RunOutput {
        rows: trainer.rows().to_vec(),
        checkpoint: trainer.checkpoint(),
        summary: trainer.summary()?,
    })
}

/// Writes `metrics.csv`, `summary.json`, and `checkpoint.json` into `dir`.
pub fn write_run(output: &RunOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_metrics_csv(
        &output.rows,
        std::fs::File::create(dir.join("metrics.csv"))?,
    )?;
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&output.summary)?,
    )?;
    output.checkpoint.save(&dir.join("checkpoint.json"))?;
    Ok(())
}
