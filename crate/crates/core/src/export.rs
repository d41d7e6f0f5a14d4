//! JSON documents consumed by plotting and the browser demo.

use serde::{Deserialize, Serialize};

use crate::env::{Env, EnvKind};
use crate::error::Result;
use crate::exact::{flow_propagate, target_distribution};
use crate::hypergrid::{mode_regions, HypergridSpec};
use crate::policy::PolicySet;

/// Learned terminal marginal next to the normalized reward.
///
/// `states[i]` is the exported id of entry `i`: the grid cell on the
/// hypergrid (so `learned` and `target` are row-major heatmaps), the
/// terminating state id on generic DAGs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionExport {
    #[serde(rename = "H", skip_serializing_if = "Option::is_none", default)]
    pub h: Option<usize>,
    #[serde(rename = "D", skip_serializing_if = "Option::is_none", default)]
    pub d: Option<usize>,
    #[serde(rename = "R0", skip_serializing_if = "Option::is_none", default)]
    pub r0: Option<f64>,
    pub states: Vec<usize>,
    pub learned: Vec<f64>,
    pub target: Vec<f64>,
}

impl DistributionExport {
    pub fn from_policy(policy: &PolicySet, env: &Env) -> Result<Self> {
        policy.check_compatible(env)?;
        let learned = flow_propagate(policy, env)?;
        let target = target_distribution(env);
        let mut rows: Vec<(usize, f64, f64)> = target
            .support
            .iter()
            .zip(&target.probs)
            .zip(&learned.probs)
            .map(|((&x, &t), &l)| (env.export_id(x), l, t))
            .collect();
        rows.sort_by_key(|r| r.0);
        let grid = match env.kind() {
            EnvKind::Hypergrid(spec) => Some(*spec),
            EnvKind::Generic => None,
        };
        Ok(Self {
            h: grid.map(|g| g.h),
            d: grid.map(|g| g.d),
            r0: grid.map(|g| g.r0),
            states: rows.iter().map(|r| r.0).collect(),
            learned: rows.iter().map(|r| r.1).collect(),
            target: rows.iter().map(|r| r.2).collect(),
        })
    }
}

/// Summary of a hypergrid instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridInfo {
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "R0")]
    pub r0: f64,
    pub num_cells: usize,
    pub num_states: usize,
    pub num_edges: usize,
    pub complete_trajectories: f64,
    #[serde(rename = "log_Z")]
    pub log_z: f64,
    #[serde(rename = "Z")]
    pub z: f64,
    pub max_reward: f64,
    pub mode_regions: Vec<Vec<usize>>,
    /// Reward per cell, row-major.
    pub rewards: Vec<f64>,
}

impl GridInfo {
    pub fn new(spec: &HypergridSpec) -> Result<Self> {
        let env = Env::hypergrid(spec)?;
        let r = env.rewards();
        let rewards: Vec<f64> = (0..spec.num_cells())
            .map(|c| r.reward(spec.terminal_of(c)))
            .collect();
        Ok(Self {
            h: spec.h,
            d: spec.d,
            r0: spec.r0,
            num_cells: spec.num_cells(),
            num_states: env.num_states(),
            num_edges: env.dag().edges().len(),
            complete_trajectories: env.dag().count_complete_trajectories(),
            log_z: r.log_partition(),
            z: r.log_partition().exp(),
            max_reward: rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mode_regions: mode_regions(spec)?,
            rewards,
        })
    }
}

/// Mass the distribution puts on each mode region, in `mode_regions` order.
pub fn mode_masses(export: &DistributionExport, regions: &[Vec<usize>]) -> Vec<f64> {
    regions
        .iter()
        .map(|cells| {
            cells
                .iter()
                .filter_map(|c| export.states.binary_search(c).ok())
                .map(|i| export.learned[i])
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::BackwardKind;

    #[test]
    fn uniform_policy_export_on_2x2() {
        let spec = HypergridSpec::new(2, 2, 0.1).unwrap();
        let env = Env::hypergrid(&spec).unwrap();
        let policy = PolicySet::tabular(&env, BackwardKind::Uniform);
        let e = DistributionExport::from_policy(&policy, &env).unwrap();
        assert_eq!(e.states, vec![0, 1, 2, 3]);
        assert_eq!((e.h, e.d), (Some(2), Some(2)));
        // Exit with 1/3 at the origin, 1/2 on the edges, certainly at the far corner.
        let want = [1.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 3.0];
        for (a, b) in e.learned.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((e.target.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let json = serde_json::to_string(&e).unwrap();
        assert!(json.starts_with(r#"{"H":2,"D":2,"R0":0.1,"states""#));
    }

    #[test]
    fn grid_info_8x8() {
        let info = GridInfo::new(&HypergridSpec::new(8, 2, 0.1).unwrap()).unwrap();
        assert_eq!(info.num_cells, 64);
        assert_eq!(info.num_states, 128);
        assert!((info.z - 22.4).abs() < 1e-12);
        assert_eq!(info.mode_regions.len(), 4);
        assert!((info.max_reward - 2.6).abs() < 1e-12);
    }
}
