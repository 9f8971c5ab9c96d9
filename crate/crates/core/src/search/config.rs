use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::micro::Candidates;
use crate::router::TempSchedule;
use crate::tensor::AdamConfig;

/// Hyperparameters of one architecture search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub num_layers: usize,
    pub hidden_grid: Vec<usize>,
    pub max_iter: usize,
    /// Weight updates per epoch before each architecture update.
    pub train_step: usize,
    pub w_optim: AdamConfig,
    pub a_optim: AdamConfig,
    pub schedule: TempSchedule,
    pub seed: u64,
    pub router: bool,
    pub candidates: Candidates,
    /// Blocks whose weights stay at their initial values.
    pub frozen_blocks: Vec<usize>,
    pub controller_dim: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            hidden_grid: vec![64, 128, 256, 512],
            max_iter: 400,
            train_step: 10,
            w_optim: AdamConfig::new(0.005, 5e-4),
            a_optim: AdamConfig::new(0.002, 1e-8),
            schedule: TempSchedule::default(),
            seed: 0,
            router: true,
            candidates: Candidates::default(),
            frozen_blocks: Vec::new(),
            controller_dim: crate::controller::PRIOR_DIM,
        }
    }
}

fn check_optim(name: &str, c: &AdamConfig) -> Result<()> {
    let ok = c.lr > 0.0
        && c.weight_decay >= 0.0
        && (0.0..1.0).contains(&c.beta1)
        && (0.0..1.0).contains(&c.beta2)
        && c.eps > 0.0;
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{name}: invalid optimizer settings {c:?}"
        )))
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=7).contains(&self.num_layers) {
            return Err(Error::Config(format!(
                "num_layers {} outside 2..=7",
                self.num_layers
            )));
        }
        if self.hidden_grid.is_empty() {
            return Err(Error::Config("hidden_grid is empty".into()));
        }
        if let Some(h) = self.hidden_grid.iter().find(|&&h| h == 0 || h % 16 != 0) {
            return Err(Error::Config(format!(
                "hidden size {h} is not a positive multiple of 16"
            )));
        }
        if self.max_iter == 0 || self.train_step == 0 {
            return Err(Error::Config(
                "max_iter and train_step must be at least 1".into(),
            ));
        }
        if let Some(b) = self.frozen_blocks.iter().find(|&&b| b >= self.num_layers) {
            return Err(Error::Config(format!(
                "frozen block {b} >= {} layers",
                self.num_layers
            )));
        }
        if self.controller_dim == 0 {
            return Err(Error::Config("controller_dim must be positive".into()));
        }
        check_optim("w_optim", &self.w_optim)?;
        check_optim("a_optim", &self.a_optim)?;
        self.schedule.validate()?;
        self.candidates.validate()
    }

    /// Seed of the grid run at `position`.
    pub fn seed_for(&self, position: usize) -> u64 {
        self.seed.wrapping_add(position as u64 * 1_000_003)
    }
}

/// Derive-then-retrain settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub optim: AdamConfig,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            patience: 50,
            optim: AdamConfig::new(0.005, 5e-4),
        }
    }
}

impl RetrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.patience == 0 {
            return Err(Error::Config(
                "retrain epochs and patience must be positive".into(),
            ));
        }
        check_optim("retrain optim", &self.optim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = SearchConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string(&c).unwrap();
        let back: SearchConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        let partial: SearchConfig =
            serde_json::from_str(r#"{"num_layers": 3, "seed": 7}"#).unwrap();
        assert_eq!(partial.max_iter, 400);
        assert_eq!(partial.w_optim.lr, 0.005);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(serde_json::from_str::<SearchConfig>(r#"{"layers": 3}"#).is_err());
        let bad = |f: fn(&mut SearchConfig)| {
            let mut c = SearchConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.num_layers = 1));
        assert!(bad(|c| c.num_layers = 8));
        assert!(bad(|c| c.hidden_grid = vec![60]));
        assert!(bad(|c| c.hidden_grid.clear()));
        assert!(bad(|c| c.max_iter = 0));
        assert!(bad(|c| c.train_step = 0));
        assert!(bad(|c| c.frozen_blocks = vec![2]));
    }
}
