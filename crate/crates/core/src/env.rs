//! An environment bundles a validated DAG, its reward table, and the action
//! slot layout used by neural policies.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::dag::{DagSpec, PointedDag, StateId};
use crate::error::{Error, Result};
use crate::hypergrid::{build_hypergrid, HypergridSpec};
use crate::math::logsumexp;

/// Strictly positive rewards on the terminating states, stored as `log R`.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardTable {
    log_values: Vec<f64>,
    terminating: Vec<StateId>,
    log_partition: f64,
}

impl RewardTable {
    pub fn new(dag: &PointedDag, values: &[(StateId, f64)]) -> Result<Self> {
        let mut log_values = vec![f64::NAN; dag.num_states()];
        let mut assigned = vec![false; dag.num_states()];
        for &(x, r) in values {
            if x >= dag.num_states() || !dag.is_terminating(x) {
                return Err(Error::InvalidSpec(format!(
                    "reward given for non-terminating state {x}"
                )));
            }
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::NonPositiveReward { state: x, value: r });
            }
            if assigned[x] {
                return Err(Error::InvalidSpec(format!(
                    "duplicate reward for state {x}"
                )));
            }
            assigned[x] = true;
            log_values[x] = r.ln();
        }
        let terminating = dag.terminating_sorted();
        if let Some(&x) = terminating.iter().find(|&&x| !assigned[x]) {
            return Err(Error::InvalidSpec(format!(
                "missing reward for terminating state {x}"
            )));
        }
        let logs: Vec<f64> = terminating.iter().map(|&x| log_values[x]).collect();
        Ok(Self {
            log_partition: logsumexp(&logs),
            log_values,
            terminating,
        })
    }

    pub fn log_reward(&self, x: StateId) -> f64 {
        self.log_values[x]
    }

    pub fn reward(&self, x: StateId) -> f64 {
        self.log_values[x].exp()
    }

    /// `log Z_hat = log sum_x R(x)`, summed over terminating states in ascending id order.
    pub fn log_partition(&self) -> f64 {
        self.log_partition
    }

    pub fn terminating(&self) -> &[StateId] {
        &self.terminating
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EnvKind {
    Generic,
    Hypergrid(HypergridSpec),
}

/// Where an environment comes from, as written in config files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvSpec {
    Hypergrid(HypergridSpec),
    DagFile(PathBuf),
    Dag(DagSpec),
}

#[derive(Clone, Debug)]
pub struct Env {
    dag: PointedDag,
    rewards: RewardTable,
    kind: EnvKind,
    fwd_slots: Vec<Vec<usize>>,
    bwd_slots: Vec<Vec<usize>>,
    exit_pos: Vec<Option<usize>>,
    n_fwd_slots: usize,
    n_bwd_slots: usize,
    fwd_offsets: Vec<usize>,
    bwd_offsets: Vec<usize>,
}

impl Env {
    pub fn from_spec(spec: &EnvSpec) -> Result<Self> {
        match spec {
            EnvSpec::Hypergrid(h) => Self::hypergrid(h),
            EnvSpec::DagFile(path) => {
                let text = std::fs::read_to_string(path)?;
                let dag: DagSpec = serde_json::from_str(&text)?;
                Self::from_dag_spec(&dag)
            }
            EnvSpec::Dag(dag) => Self::from_dag_spec(dag),
        }
    }

    pub fn hypergrid(spec: &HypergridSpec) -> Result<Self> {
        let (dag, rewards) = build_hypergrid(spec)?;
        Ok(Self::assemble(dag, rewards, EnvKind::Hypergrid(*spec)))
    }

    /// A generic environment; requires `rewards` aligned with `terminating`.
    pub fn from_dag_spec(spec: &DagSpec) -> Result<Self> {
        let dag = PointedDag::from_spec(spec)?;
        let rewards = spec
            .rewards
            .as_ref()
            .ok_or_else(|| Error::InvalidSpec("dag document has no rewards".into()))?;
        if rewards.len() != spec.terminating.len() {
            return Err(Error::DimensionMismatch {
                expected: spec.terminating.len(),
                got: rewards.len(),
            });
        }
        let pairs: Vec<_> = spec
            .terminating
            .iter()
            .copied()
            .zip(rewards.iter().copied())
            .collect();
        let table = RewardTable::new(&dag, &pairs)?;
        Ok(Self::from_parts(dag, table))
    }

    pub fn from_parts(dag: PointedDag, rewards: RewardTable) -> Self {
        Self::assemble(dag, rewards, EnvKind::Generic)
    }

    fn assemble(dag: PointedDag, rewards: RewardTable, kind: EnvKind) -> Self {
        let n = dag.num_states();
        let (fwd_slots, bwd_slots, exit_pos, n_fwd_slots, n_bwd_slots) = match &kind {
            EnvKind::Generic => (
                (0..n).map(|s| dag.children(s).to_vec()).collect(),
                (0..n).map(|s| dag.parents(s).to_vec()).collect(),
                vec![None; n],
                n,
                n,
            ),
            EnvKind::Hypergrid(spec) => {
                let cells = spec.num_cells();
                let dim_of = |diff: usize| (0..spec.d).find(|&k| spec.stride(k) == diff);
                let fwd = (0..n)
                    .map(|s| {
                        dag.children(s)
                            .iter()
                            .map(|&c| {
                                if c >= cells {
                                    spec.d
                                } else {
                                    dim_of(c - s).unwrap()
                                }
                            })
                            .collect()
                    })
                    .collect();
                let bwd = (0..n)
                    .map(|s| {
                        if s >= cells {
                            vec![0]
                        } else {
                            dag.parents(s)
                                .iter()
                                .map(|&p| dim_of(s - p).unwrap())
                                .collect()
                        }
                    })
                    .collect();
                let exit = (0..n)
                    .map(|s| dag.children(s).iter().position(|&c| c >= cells))
                    .collect();
                (fwd, bwd, exit, spec.d + 1, spec.d)
            }
        };
        let prefix = |counts: &mut dyn Iterator<Item = usize>| {
            let mut acc = vec![0];
            for c in counts {
                acc.push(acc.last().unwrap() + c);
            }
            acc
        };
        let fwd_offsets = prefix(&mut (0..n).map(|s| dag.children(s).len()));
        let bwd_offsets = prefix(&mut (0..n).map(|s| dag.parents(s).len()));
        Self {
            dag,
            rewards,
            kind,
            fwd_offsets,
            bwd_offsets,
            fwd_slots,
            bwd_slots,
            exit_pos,
            n_fwd_slots,
            n_bwd_slots,
        }
    }

    pub fn dag(&self) -> &PointedDag {
        &self.dag
    }

    pub fn rewards(&self) -> &RewardTable {
        &self.rewards
    }

    pub fn kind(&self) -> &EnvKind {
        &self.kind
    }

    pub fn num_states(&self) -> usize {
        self.dag.num_states()
    }

    pub fn input_dim(&self) -> usize {
        match &self.kind {
            EnvKind::Generic => self.dag.num_states(),
            EnvKind::Hypergrid(spec) => spec.h * spec.d,
        }
    }

    /// One-hot state encoding for generic DAGs; K-hot coordinates on the hypergrid.
    pub fn features(&self, s: StateId) -> Vec<f64> {
        let mut x = vec![0.0; self.input_dim()];
        match &self.kind {
            EnvKind::Generic => x[s] = 1.0,
            EnvKind::Hypergrid(spec) => {
                let cell = if s >= spec.num_cells() {
                    s - spec.num_cells()
                } else {
                    s
                };
                for (dim, c) in spec.coords(cell).into_iter().enumerate() {
                    x[dim * spec.h + c] = 1.0;
                }
            }
        }
        x
    }

    pub fn num_forward_slots(&self) -> usize {
        self.n_fwd_slots
    }

    pub fn num_backward_slots(&self) -> usize {
        self.n_bwd_slots
    }

    /// Output slot of each child of `s`, aligned with `dag.children(s)`.
    pub fn forward_slots(&self, s: StateId) -> &[usize] {
        &self.fwd_slots[s]
    }

    /// Output slot of each parent of `s`, aligned with `dag.parents(s)`.
    pub fn backward_slots(&self, s: StateId) -> &[usize] {
        &self.bwd_slots[s]
    }

    /// Start of each state's block in a flat per-edge (tabular) parameter
    /// vector; the last entry is the total edge count.
    pub fn forward_offsets(&self) -> &[usize] {
        &self.fwd_offsets
    }

    pub fn backward_offsets(&self) -> &[usize] {
        &self.bwd_offsets
    }

    /// Position of the exit action among the children of `s`, if the
    /// environment distinguishes one.
    pub fn exit_position(&self, s: StateId) -> Option<usize> {
        self.exit_pos[s]
    }

    pub fn has_exit_actions(&self) -> bool {
        matches!(self.kind, EnvKind::Hypergrid(_))
    }

    /// Maps a terminating state to the id exported for plotting: the grid
    /// cell on the hypergrid, the state id otherwise.
    pub fn export_id(&self, x: StateId) -> usize {
        match &self.kind {
            EnvKind::Hypergrid(spec) => x - spec.num_cells(),
            EnvKind::Generic => x,
        }
    }
}
