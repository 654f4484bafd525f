use serde::{Deserialize, Serialize};

use super::loss::Objective;
use crate::error::{HvcmError, Result};

/// Hyperparameters of the joint trainer. The JSON form uses these field
/// names; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the attribute-to-center divergence.
    pub alpha: f64,
    /// Weight of the sample-weighted center-to-attribute divergence.
    pub beta: f64,
    /// Adam step size for the encoder and the weight head.
    pub gamma1: f64,
    /// Adam step size for the class centers.
    pub gamma2: f64,
    /// EMA rate of the stored group weights.
    pub gamma3: f64,
    pub teacher_momentum: f64,
    pub tau_s: f64,
    pub tau_t: f64,
    pub objective: Objective,
    pub views: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub groups: usize,
    pub attr_dim: usize,
    pub hidden: Vec<usize>,
    pub aug_noise: f64,
    pub mask_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 0.1,
            gamma1: 1e-2,
            gamma2: 1e-2,
            gamma3: 1e-2,
            teacher_momentum: 0.996,
            tau_s: 0.1,
            tau_t: 0.04,
            objective: Objective::Kl,
            views: 2,
            epochs: 20,
            batch_size: 64,
            seed: 0,
            groups: 4,
            attr_dim: 16,
            hidden: vec![32],
            aug_noise: 0.1,
            mask_rate: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Full-scale settings: `d = 8192`, `G = 32`, `α = 1`, `β = 0.1`,
    /// `γ1 = γ2 = 1`, `γ3 = 1e-4`.
    pub fn full_scale() -> Self {
        TrainConfig {
            gamma1: 1.0,
            gamma2: 1.0,
            gamma3: 1e-4,
            groups: 32,
            attr_dim: 8192,
            hidden: vec![2048],
            ..Default::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)
            .map_err(|e| HvcmError::invalid("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("tau_s", self.tau_s), ("tau_t", self.tau_t), ("adam_eps", self.adam_eps)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(HvcmError::invalid(name, format!("{v} must be > 0")));
            }
        }
        let nonneg = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("aug_noise", self.aug_noise),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(HvcmError::invalid(name, format!("{v} must be finite and ≥ 0")));
            }
        }
        let unit = [
            ("gamma3", self.gamma3),
            ("teacher_momentum", self.teacher_momentum),
            ("mask_rate", self.mask_rate),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(HvcmError::invalid(name, format!("{v} must lie in [0, 1]")));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(HvcmError::invalid(name, format!("{v} must lie in [0, 1)")));
            }
        }
        if self.views == 0 {
            return Err(HvcmError::invalid("views", "need at least one view"));
        }
        if self.batch_size == 0 {
            return Err(HvcmError::invalid("batch_size", "must be ≥ 1"));
        }
        if self.hidden.contains(&0) {
            return Err(HvcmError::invalid("hidden", "layer widths must be ≥ 1"));
        }
        crate::attributes::check_group_count(self.attr_dim, self.groups)
    }

    pub fn group_width(&self) -> usize {
        self.attr_dim / self.groups
    }
}
