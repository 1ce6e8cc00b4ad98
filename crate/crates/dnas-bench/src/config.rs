//! Run configuration: a flat TOML file covering search, selection and oracle
//! settings, plus a canonical hash so runs can be tied to the exact
//! configuration that produced them.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dnas_core::error::{Error, Result};
use dnas_core::search::SearchSettings;

use crate::oracle::OracleConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // Architecture search.
    pub steps: u64,
    pub delta: f64,
    pub beta: f64,
    pub gamma: f64,
    pub m_samples: usize,
    pub second_order: bool,
    pub xi: f64,
    pub lr_w: f64,
    pub momentum_w: f64,
    pub train_minibatch: usize,
    pub val_minibatch: usize,
    pub sample_weight_arch: bool,
    /// Curvature diagnostics cadence in steps; 0 disables them.
    pub diag_every: u64,
    pub diag_probes: usize,
    pub eig_iters: usize,
    pub rms_damping: f64,
    pub divergence_factor: f64,
    pub divergence_patience: u64,
    pub hidden_dim: usize,
    // Training-free selection.
    pub select_metric: String,
    pub select_k: usize,
    // Tabular benchmark construction.
    pub oracle_budget: u64,
    pub oracle_lr: f64,
    pub oracle_momentum: f64,
    pub oracle_minibatch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SearchSettings::default();
        let o = OracleConfig::default();
        RunConfig {
            steps: s.steps,
            delta: s.delta,
            beta: s.beta,
            gamma: s.gamma,
            m_samples: s.m_samples,
            second_order: s.second_order,
            xi: s.xi,
            lr_w: s.lr_w,
            momentum_w: s.momentum_w,
            train_minibatch: s.train_minibatch,
            val_minibatch: s.val_minibatch,
            sample_weight_arch: s.sample_weight_arch,
            diag_every: 0,
            diag_probes: s.diag_probes,
            eig_iters: s.eig_iters,
            rms_damping: s.rms_damping,
            divergence_factor: s.divergence_factor,
            divergence_patience: s.divergence_patience,
            hidden_dim: 16,
            select_metric: "synflow".into(),
            select_k: 100,
            oracle_budget: o.budget,
            oracle_lr: o.lr,
            oracle_momentum: o.momentum,
            oracle_minibatch: o.minibatch,
        }
    }
}

impl RunConfig {
    pub fn load_toml(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            ctx: format!("{}: {e}", path.display()),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn to_settings(&self) -> SearchSettings {
        SearchSettings {
            steps: self.steps,
            delta: self.delta,
            beta: self.beta,
            gamma: self.gamma,
            m_samples: self.m_samples,
            second_order: self.second_order,
            xi: self.xi,
            lr_w: self.lr_w,
            momentum_w: self.momentum_w,
            train_minibatch: self.train_minibatch,
            val_minibatch: self.val_minibatch,
            sample_weight_arch: self.sample_weight_arch,
            diag_every: if self.diag_every == 0 {
                None
            } else {
                Some(self.diag_every)
            },
            diag_probes: self.diag_probes,
            eig_iters: self.eig_iters,
            rms_damping: self.rms_damping,
            divergence_factor: self.divergence_factor,
            divergence_patience: self.divergence_patience,
        }
    }

    pub fn oracle_config(&self) -> OracleConfig {
        OracleConfig {
            budget: self.oracle_budget,
            lr: self.oracle_lr,
            momentum: self.oracle_momentum,
            minibatch: self.oracle_minibatch,
            hidden_dim: self.hidden_dim,
            ..OracleConfig::default()
        }
    }

    /// Canonical hash of the configuration. The config is re-serialized as
    /// JSON with sorted object keys, so the hash is independent of the key
    /// order in the source TOML.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let map: std::collections::BTreeMap<String, serde_json::Value> =
            serde_json::from_value(value).expect("config is a flat object");
        let canonical = serde_json::to_string(&map).expect("map serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_library_defaults() {
        let cfg = RunConfig::default();
        let s = cfg.to_settings();
        let d = SearchSettings::default();
        assert_eq!(s.steps, d.steps);
        assert_eq!(s.beta, d.beta);
        assert_eq!(s.diag_every, None);
        assert_eq!(cfg.oracle_config().budget, OracleConfig::default().budget);
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.hash(), cfg.hash());

        // Partial files fill unset fields from the defaults.
        let partial: RunConfig = toml::from_str("steps = 7\nbeta = 0.25\n").unwrap();
        assert_eq!(partial.steps, 7);
        assert_eq!(partial.beta, 0.25);
        assert_eq!(partial.select_k, RunConfig::default().select_k);

        // Unknown keys are an error, not a silent no-op.
        assert!(toml::from_str::<RunConfig>("stepz = 7\n").is_err());
    }

    #[test]
    fn hash_ignores_key_order_but_not_values() {
        let a: RunConfig = toml::from_str("steps = 7\nbeta = 0.25\n").unwrap();
        let b: RunConfig = toml::from_str("beta = 0.25\nsteps = 7\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c: RunConfig = toml::from_str("steps = 8\nbeta = 0.25\n").unwrap();
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn diag_every_zero_means_disabled() {
        let cfg: RunConfig = toml::from_str("diag_every = 5\n").unwrap();
        assert_eq!(cfg.to_settings().diag_every, Some(5));
        let off: RunConfig = toml::from_str("diag_every = 0\n").unwrap();
        assert_eq!(off.to_settings().diag_every, None);
    }
}
