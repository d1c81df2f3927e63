use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::objectives::LossWeights;

/// Hyperparameters of both training stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub source_epochs: usize,
    pub adapt_steps: usize,
    /// Generator learning rate.
    pub lr: f64,
    /// Learning rate of source training.
    pub source_lr: f64,
    /// Upper bound of the SpecMix ratio; 0 disables augmentation.
    pub eta: f64,
    pub lambda_ent: f64,
    pub lambda_ph: f64,
    /// BN running-statistics momentum.
    pub bn_alpha: f64,
    /// Perceptual and phase terms; off for the statistics-only variant.
    pub use_dsc: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            source_epochs: 20,
            adapt_steps: 2000,
            lr: 1e-4,
            source_lr: 1e-3,
            eta: 0.1,
            lambda_ent: 0.01,
            lambda_ph: 0.01,
            bn_alpha: 0.1,
            use_dsc: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_ent: self.lambda_ent,
            lambda_ph: self.lambda_ph,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.source_epochs == 0 || self.adapt_steps == 0 {
            return bad("source_epochs and adapt_steps must be positive".into());
        }
        for (name, v) in [("lr", self.lr), ("source_lr", self.source_lr)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad(format!("eta must lie in [0, 1], got {}", self.eta));
        }
        if !(self.lambda_ent >= 0.0 && self.lambda_ph >= 0.0) {
            return bad("loss weights must be nonnegative".into());
        }
        if !(self.bn_alpha > 0.0 && self.bn_alpha <= 1.0) {
            return bad(format!("bn_alpha must lie in (0, 1], got {}", self.bn_alpha));
        }
        Ok(())
    }
}

/// Ablation rows: baseline, statistics only, plus semantic consistency,
/// plus spectrum mixup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Baseline,
    Nsc,
    NscDsc,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Nsc, Variant::NscDsc, Variant::Full];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Nsc => "nsc",
            Variant::NscDsc => "nsc+dsc",
            Variant::Full => "full",
        }
    }

    /// The adaptation config of this row; `None` for the baseline.
    pub fn configure(self, base: &TrainConfig) -> Option<TrainConfig> {
        let mut c = base.clone();
        match self {
            Variant::Baseline => return None,
            Variant::Nsc => {
                c.use_dsc = false;
                c.eta = 0.0;
            }
            Variant::NscDsc => {
                c.use_dsc = true;
                c.eta = 0.0;
            }
            Variant::Full => c.use_dsc = true,
        }
        Some(c)
    }
}
