//! Browser bindings for the demo page in `www/`.
//!
//! Every export exchanges JSON strings so the page needs no generated
//! type definitions. Errors surface as thrown strings.

use gfnvi::exact::{flow_propagate, jsd, target_distribution};
use gfnvi::export::{DistributionExport, GridInfo};
use gfnvi::trainer::{TrainConfig, Trainer};
use gfnvi::verify::{run_suite, summarize, OracleModel, Suite};
use gfnvi::HypergridSpec;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn text<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Reward table, mode regions and partition function of a hypergrid.
#[wasm_bindgen]
pub fn grid_info(h: usize, d: usize, r0: f64) -> Result<String, String> {
    let spec = HypergridSpec::new(h, d, r0).map_err(text)?;
    let info = GridInfo::new(&spec).map_err(text)?;
    serde_json::to_string(&info).map_err(text)
}

/// A training run advanced a few batches at a time from the page.
#[wasm_bindgen]
pub struct DemoTrainer {
    inner: Trainer,
}

#[wasm_bindgen]
impl DemoTrainer {
    /// Builds a trainer from a training config document.
    #[wasm_bindgen(constructor)]
    pub fn new(config: &str) -> Result<DemoTrainer, String> {
        let config = TrainConfig::from_json(config).map_err(text)?;
        Ok(Self {
            inner: Trainer::new(config).map_err(text)?,
        })
    }

    /// Trains `batches` more batches, ignoring the configured budget.
    pub fn step(&mut self, batches: usize) -> Result<String, String> {
        let b = self.inner.config().batch_size;
        let mut losses = Vec::with_capacity(batches);
        for _ in 0..batches {
            losses.push(self.inner.step_with(b).map_err(text)?.loss);
        }
        let env = self.inner.env();
        let learned = flow_propagate(self.inner.policy(), env).map_err(text)?;
        let divergence = jsd(&learned, &target_distribution(env)).map_err(text)?;
        let mean_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        let report = json!({
            "batches": self.inner.batches(),
            "trajectories_seen": self.inner.trajectories_seen(),
            "mean_loss": mean_loss,
            "jsd": divergence,
            "log_Z_estimate": self.inner.log_z_estimate(),
        });
        Ok(report.to_string())
    }

    /// Learned terminal distribution next to the target.
    pub fn distribution(&self) -> Result<String, String> {
        let export =
            DistributionExport::from_policy(self.inner.policy(), self.inner.env()).map_err(text)?;
        serde_json::to_string(&export).map_err(text)
    }
}

/// Worst discrepancy per identity for one verification suite.
#[wasm_bindgen]
pub fn verify_identities(suite: &str, seed: u64, instances: usize) -> Result<String, String> {
    let suite: Suite = suite.parse().map_err(text)?;
    let checks = run_suite(suite, seed, instances, OracleModel::Tabular).map_err(text)?;
    let rows: Vec<_> = summarize(&checks)
        .into_iter()
        .map(|(identity, worst, tolerance, passed)| {
            json!({"identity": identity, "worst": worst, "tolerance": tolerance, "passed": passed})
        })
        .collect();
    serde_json::to_string(&rows).map_err(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    const CONFIG: &str = r#"{"env": {"hypergrid": {"H": 4, "D": 2, "R0": 0.1}},
        "objective": {"pf_loss": "ReverseKL", "baseline": "global", "eta": 0.1},
        "policy": {"kind": "tabular"}, "batch_size": 16, "lr_pf": 0.05}"#;

    #[test]
    fn grid_info_is_json() {
        let v: Value = serde_json::from_str(&grid_info(8, 2, 0.1).unwrap()).unwrap();
        assert_eq!(v["rewards"].as_array().unwrap().len(), 64);
        assert!(grid_info(1, 2, 0.1).is_err());
    }

    #[test]
    fn trainer_steps_and_exports() {
        let mut t = DemoTrainer::new(CONFIG).unwrap();
        let first: Value = serde_json::from_str(&t.step(1).unwrap()).unwrap();
        let later: Value = serde_json::from_str(&t.step(200).unwrap()).unwrap();
        assert_eq!(later["trajectories_seen"], 16 * 201);
        assert!(later["jsd"].as_f64().unwrap() < first["jsd"].as_f64().unwrap());
        let dist: DistributionExport = serde_json::from_str(&t.distribution().unwrap()).unwrap();
        assert_eq!(dist.learned.len(), 16);
        assert!((dist.learned.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(DemoTrainer::new("{}").is_err());
    }

    #[test]
    fn identities_hold() {
        let rows: Vec<Value> =
            serde_json::from_str(&verify_identities("prop1", 0, 5).unwrap()).unwrap();
        assert!(!rows.is_empty());
        assert!(rows.iter().all(|r| r["passed"] == true));
        assert!(verify_identities("nope", 0, 1).is_err());
    }
}
