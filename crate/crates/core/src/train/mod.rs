//! Composite objective, Adam, case-level dataset split, the training loop
//! and the loss-weight grid search.

mod adam;
mod grid;
mod history;
mod losses;
mod runner;
mod split;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use grid::{gamma_grid_search, grid_points, GridPoint, GridReport};
pub use history::{History, LossRecord};
pub use losses::{classification_loss, reconstruction_loss, total_loss, PROBABILITY_CLAMP};
pub use runner::{evaluate_losses, objective, train, train_with_progress, EpochProgress};
pub use split::{split_dataset, Split};

use crate::config::KvConfig;
use crate::error::{Error, Result};

/// Weights of the reconstruction and classification terms; they sum to 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    recon: f64,
    class: f64,
}

impl LossWeights {
    pub fn new(recon: f64, class: f64) -> Result<Self> {
        let in_unit = |g: f64| (0.0..=1.0).contains(&g);
        if !in_unit(recon) || !in_unit(class) || (recon + class - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "loss weights ({recon}, {class}) must lie in [0, 1] and sum to 1"
            )));
        }
        Ok(LossWeights { recon, class })
    }

    /// Weights `(g, 1 − g)`.
    pub fn from_recon(g: f64) -> Result<Self> {
        Self::new(g, 1.0 - g)
    }

    pub fn recon(&self) -> f64 {
        self.recon
    }

    pub fn class(&self) -> f64 {
        self.class
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            recon: 0.2,
            class: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Share of cases held out for validation / testing.
    pub split_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            batch_size: 32,
            epochs: 20,
            seed: 0,
            split_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config("train.split_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self, kv: &mut KvConfig) {
        kv.set("train.gamma1", self.weights.recon);
        kv.set("train.gamma2", self.weights.class);
        kv.set("train.learning_rate", self.adam.learning_rate);
        kv.set("train.beta1", self.adam.beta1);
        kv.set("train.beta2", self.adam.beta2);
        kv.set("train.adam_eps", self.adam.eps);
        kv.set("train.batch_size", self.batch_size);
        kv.set("train.epochs", self.epochs);
        kv.set("train.seed", self.seed);
        kv.set("train.split_fraction", self.split_fraction);
    }

    /// Reads `train.*` keys. Giving only `train.gamma1` implies
    /// `train.gamma2 = 1 − gamma1`.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let g1: Option<f64> = kv.get("train.gamma1")?;
        let g2: Option<f64> = kv.get("train.gamma2")?;
        let weights = match (g1, g2) {
            (None, None) => d.weights,
            (Some(a), None) => LossWeights::from_recon(a)?,
            (None, Some(b)) => LossWeights::new(1.0 - b, b)?,
            (Some(a), Some(b)) => LossWeights::new(a, b)?,
        };
        let cfg = TrainConfig {
            weights,
            adam: AdamConfig {
                learning_rate: kv.get_or("train.learning_rate", d.adam.learning_rate)?,
                beta1: kv.get_or("train.beta1", d.adam.beta1)?,
                beta2: kv.get_or("train.beta2", d.adam.beta2)?,
                eps: kv.get_or("train.adam_eps", d.adam.eps)?,
            },
            batch_size: kv.get_or("train.batch_size", d.batch_size)?,
            epochs: kv.get_or("train.epochs", d.epochs)?,
            seed: kv.get_or("train.seed", d.seed)?,
            split_fraction: kv.get_or("train.split_fraction", d.split_fraction)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
