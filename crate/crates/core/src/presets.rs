//! Named operating points.
//!
//! `paper-unsafe` is the nudity/violence removal configuration (k = 32,
//! expansion 4, i.e. n = 3072 for 768-wide embeddings); `paper-style` is the
//! style-manipulation configuration (k = 64, expansion 64).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ksae::KSaeConfig;
use crate::trainer::TrainConfig;

/// Steering strength used for the I2P prompt set.
pub const LAMBDA_I2P: f32 = -0.5;
/// Steering strength used for adversarial prompt sets, including violence.
pub const LAMBDA_ADVERSARIAL: f32 = -0.7;
/// Strength grid for sweeps in both directions.
pub const LAMBDA_SWEEP: [f32; 5] = [-1.0, -0.7, -0.5, 0.5, 1.0];

/// Expansion factors of the capacity ablation.
pub const EXPANSION_SWEEP: [usize; 5] = [4, 8, 16, 32, 64];

/// Width of the text-encoder embeddings the presets were tuned for.
pub const CLIP_WIDTH: usize = 768;

/// Every knob a preset, config file or flag may set. `None` means "not set
/// at this layer".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Overrides {
    pub k: Option<usize>,
    pub expansion: Option<usize>,
    pub k_aux: Option<usize>,
    pub alpha: Option<f64>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub steps: Option<u64>,
    pub seed: Option<u64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub dead_token_threshold: Option<u64>,
    pub grad_project: Option<bool>,
    pub lambda: Option<f32>,
}

impl Overrides {
    /// Fields set in `over` win over fields set in `self`.
    pub fn layer(self, over: &Overrides) -> Overrides {
        Overrides {
            k: over.k.or(self.k),
            expansion: over.expansion.or(self.expansion),
            k_aux: over.k_aux.or(self.k_aux),
            alpha: over.alpha.or(self.alpha),
            lr: over.lr.or(self.lr),
            batch: over.batch.or(self.batch),
            steps: over.steps.or(self.steps),
            seed: over.seed.or(self.seed),
            beta1: over.beta1.or(self.beta1),
            beta2: over.beta2.or(self.beta2),
            eps: over.eps.or(self.eps),
            dead_token_threshold: over.dead_token_threshold.or(self.dead_token_threshold),
            grad_project: over.grad_project.or(self.grad_project),
            lambda: over.lambda.or(self.lambda),
        }
    }

    /// Resolves against the built-in defaults for an input width `d`.
    pub fn resolve(&self, d: usize) -> (KSaeConfig, TrainConfig) {
        let defaults = TrainConfig::default();
        let ksae = KSaeConfig::new(
            d,
            self.expansion.unwrap_or(4),
            self.k.unwrap_or(32),
            self.k_aux.unwrap_or(256),
            self.alpha.unwrap_or(1.0 / 32.0),
        );
        let train = TrainConfig {
            lr: self.lr.unwrap_or(defaults.lr),
            beta1: self.beta1.unwrap_or(defaults.beta1),
            beta2: self.beta2.unwrap_or(defaults.beta2),
            eps: self.eps.unwrap_or(defaults.eps),
            batch_size: self.batch.unwrap_or(defaults.batch_size),
            total_steps: self.steps.unwrap_or(defaults.total_steps),
            dead_token_threshold: self.dead_token_threshold,
            grad_project: self.grad_project.unwrap_or(false),
            seed: self.seed.unwrap_or(0),
            ..defaults
        };
        (ksae, train)
    }
}

fn paper_common() -> Overrides {
    Overrides {
        k_aux: Some(256),
        alpha: Some(1.0 / 32.0),
        lr: Some(4e-4),
        batch: Some(4096),
        steps: Some(10_000),
        ..Default::default()
    }
}

pub fn preset(name: &str) -> Result<Overrides> {
    match name {
        "paper-unsafe" => Ok(Overrides {
            k: Some(32),
            expansion: Some(4),
            lambda: Some(LAMBDA_I2P),
            ..paper_common()
        }),
        "paper-style" => Ok(Overrides {
            k: Some(64),
            expansion: Some(64),
            ..paper_common()
        }),
        other => Err(Error::Config(format!(
            "unknown preset {other:?} (known: paper-unsafe, paper-style)"
        ))),
    }
}
