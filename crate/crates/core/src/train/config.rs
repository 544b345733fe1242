use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::LossConfig;
use crate::error::{Error, Result};
use crate::query::{Scheme, DEFAULT_DEPTH_CAP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Vanilla,
    Maml,
    Mamo,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Vanilla => "vanilla",
            Algorithm::Maml => "maml",
            Algorithm::Mamo => "mamo",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vanilla" => Ok(Algorithm::Vanilla),
            "maml" => Ok(Algorithm::Maml),
            "mamo" => Ok(Algorithm::Mamo),
            _ => Err(Error::Config(format!("unknown algorithm `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub scheme: Option<Scheme>,
    pub support_batch: usize,
    pub target_batch: usize,
    pub adaptation_lr: f64,
    pub outer_lr: f64,
    pub second_order: bool,
    pub steps: usize,
    pub seed: u64,
    pub inference_support: usize,
    pub inference_steps: usize,
    /// Defaults to a quarter of `adaptation_lr`.
    pub inference_lr: Option<f64>,
    pub dim: usize,
    pub depth_cap: u32,
    pub loss: LossConfig,
    /// Check the gradient split at every meta step and report the residual.
    pub verify_partition: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Vanilla,
            scheme: None,
            support_batch: 32,
            target_batch: 32,
            adaptation_lr: 0.016,
            outer_lr: 0.01,
            second_order: false,
            steps: 2000,
            seed: 0,
            inference_support: 10,
            inference_steps: 5,
            inference_lr: None,
            dim: 32,
            depth_cap: DEFAULT_DEPTH_CAP,
            loss: LossConfig::default(),
            verify_partition: false,
        }
    }
}

impl TrainConfig {
    pub fn inference_lr(&self) -> f64 {
        self.inference_lr.unwrap_or(self.adaptation_lr / 4.0)
    }

    /// Scheme used to route sites: only meta-operator training routes by type.
    pub fn routing_scheme(&self) -> Option<Scheme> {
        match self.algorithm {
            Algorithm::Mamo => self.scheme,
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.algorithm == Algorithm::Mamo && self.scheme.is_none() {
            return Err(Error::Config(
                "meta-operator training needs a categorization scheme".into(),
            ));
        }
        if self.algorithm != Algorithm::Mamo && self.scheme.is_some() {
            return Err(Error::Config(format!(
                "a scheme only applies to mamo, not {}",
                self.algorithm
            )));
        }
        if self.algorithm != Algorithm::Vanilla && (self.adaptation_lr.is_nan() || self.adaptation_lr < 0.0) {
            return Err(Error::Config(format!(
                "adaptation_lr {} must be non-negative",
                self.adaptation_lr
            )));
        }
        if self.outer_lr.is_nan()
            || self.outer_lr < 0.0
            || !self.inference_lr().is_finite()
            || self.inference_lr() < 0.0
        {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        if self.support_batch == 0 || self.target_batch == 0 || self.dim == 0 || self.depth_cap == 0 {
            return Err(Error::Config("batch sizes, dim and depth_cap must be positive".into()));
        }
        Ok(())
    }
}
