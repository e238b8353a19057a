use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interaction::AttentionKind;
use crate::objective::LossWeights;
use crate::reconstruction::MaskStrategy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Cosine annealing from the base rate to 0 over all steps.
    Cosine,
    Constant,
}

/// Training hyperparameters and ablation toggles. Missing keys take their
/// defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub epochs: usize,
    pub alpha_v: f64,
    pub alpha_t: f64,
    pub tau: f64,
    pub lambda: LossWeights,
    pub recon_layers: usize,
    pub use_ccl_condition: bool,
    pub use_cvr: bool,
    pub use_clr: bool,
    pub use_cvr_condition: bool,
    pub use_clr_condition: bool,
    pub mask_strategy: MaskStrategy,
    pub attention: AttentionKind,
    pub master_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            schedule: Schedule::Cosine,
            batch_size: 16,
            epochs: 30,
            alpha_v: 0.5,
            alpha_t: 0.3,
            tau: 0.07,
            lambda: LossWeights::default(),
            recon_layers: 3,
            use_ccl_condition: true,
            use_cvr: true,
            use_clr: true,
            use_cvr_condition: true,
            use_clr_condition: true,
            mask_strategy: MaskStrategy::Weighted,
            attention: AttentionKind::Cross,
            master_seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be at least 1");
        }
        for (name, a) in [("alpha_v", self.alpha_v), ("alpha_t", self.alpha_t)] {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {a}")));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if self.recon_layers == 0 {
            return bad("recon_layers must be at least 1");
        }
        self.lambda.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Learning rate at `step` of `total` optimizer steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine if total <= 1 => self.learning_rate,
            Schedule::Cosine => {
                let t = step.min(total - 1) as f64 / (total - 1) as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}
