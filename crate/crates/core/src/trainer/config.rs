use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Masf,
    Baseline,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Masf => "masf",
            Regime::Baseline => "baseline",
        }
    }
}

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Inner-step rate (plain descent).
    pub alpha_inner: f32,
    /// Meta-step rate (Adam).
    pub eta: f32,
    /// Metric-step rate (Adam).
    pub gamma: f32,
    pub beta1: f32,
    pub beta2: f32,
    /// Soft-confusion temperature.
    pub tau: f32,
    pub margin: f32,
    /// Global-norm clip threshold for the inner step.
    pub clip_threshold: f32,
    /// Patches per class per hospital in an episode batch.
    pub batch_per_class: usize,
    /// Triplets drawn per episode from the episode's patches.
    pub triplet_batch: usize,
    pub max_iterations: usize,
    /// Internal-validation interval for checkpoint selection.
    pub eval_every: usize,
    pub seed: u64,
    pub regime: Regime,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha_inner: 1e-5,
            eta: 1e-5,
            gamma: 1e-5,
            beta1: 1.0,
            beta2: 0.005,
            tau: 2.0,
            margin: 10.0,
            clip_threshold: 2.0,
            batch_per_class: 8,
            triplet_batch: 24,
            max_iterations: 1000,
            eval_every: 50,
            seed: 0,
            regime: Regime::Masf,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha_inner", self.alpha_inner),
            ("eta", self.eta),
            ("gamma", self.gamma),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("clip_threshold", self.clip_threshold),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.tau > 1.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 1, got {}", self.tau)));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be >= 0, got {}", self.margin)));
        }
        if self.batch_per_class == 0 || self.triplet_batch == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "batch_per_class, triplet_batch and eval_every must be >= 1".into(),
            ));
        }
        Ok(())
    }
}
