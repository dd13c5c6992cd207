use std::fmt;
use std::str::FromStr;

use super::optim::AdamConfig;
use crate::dataio::AugmentConfig;
use crate::error::{Error, Result};
use crate::losses::{NormalMode, TargetScope};
use crate::masking::MaskStrategy;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub weight_decay: f64,
    pub alpha_final: f64,
    pub mask_ratio: f64,
    pub mask_strategy: MaskStrategy,
    pub normal_mode: NormalMode,
    pub target_scope: TargetScope,
    pub seed: u64,
    pub adam: AdamConfig,
    /// `None` disables augmentation.
    pub augment: Option<AugmentConfig>,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Fill the metrics `wall_time` column; off by default so that
    /// identical runs produce identical files.
    pub record_wall_time: bool,
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 128,
            ..Self::desk()
        }
    }

    pub fn desk() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 32,
            lr_init: 0.001,
            weight_decay: 0.05,
            alpha_final: 0.01,
            mask_ratio: 0.6,
            mask_strategy: MaskStrategy::Random,
            normal_mode: NormalMode::Unoriented,
            target_scope: TargetScope::MaskedOnly,
            seed: 0,
            adam: AdamConfig::default(),
            augment: Some(AugmentConfig::default()),
            checkpoint_every: 0,
            record_wall_time: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("train.epochs and train.batch_size must be positive"));
        }
        let nonneg = [
            ("lr_init", self.lr_init),
            ("weight_decay", self.weight_decay),
            ("alpha_final", self.alpha_final),
            ("adam_eps", self.adam.eps),
        ];
        for (k, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("train.{k} must be a non-negative number, got {v}")));
            }
        }
        for (k, v) in [("beta1", self.adam.beta1), ("beta2", self.adam.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::invalid(format!("train.{k} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::invalid(format!("train.mask_ratio {} outside (0, 1)", self.mask_ratio)));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "epochs" => self.epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "lr_init" => self.lr_init = num(key, v)?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "alpha_final" => self.alpha_final = num(key, v)?,
            "mask_ratio" => self.mask_ratio = num(key, v)?,
            "mask_strategy" => self.mask_strategy = v.parse()?,
            "normal_mode" => self.normal_mode = v.parse()?,
            "target_scope" => self.target_scope = v.parse()?,
            "seed" => self.seed = num(key, v)?,
            "beta1" => self.adam.beta1 = num(key, v)?,
            "beta2" => self.adam.beta2 = num(key, v)?,
            "adam_eps" => self.adam.eps = num(key, v)?,
            "augment" => {
                let on: bool = num(key, v)?;
                self.augment = match (on, self.augment) {
                    (false, _) => None,
                    (true, Some(a)) => Some(a),
                    (true, None) => Some(AugmentConfig::default()),
                };
            }
            "scale_range" => {
                let parts: Vec<&str> = v.split(',').collect();
                if parts.len() != 2 {
                    return Err(Error::invalid(format!("train.scale_range expects `lo,hi`, got `{v}`")));
                }
                let range = [num(key, parts[0])?, num(key, parts[1])?];
                self.augment.get_or_insert_with(AugmentConfig::default).scale_range = range;
            }
            "translate_range" => {
                let t = num(key, v)?;
                self.augment.get_or_insert_with(AugmentConfig::default).translate_range = t;
            }
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "record_wall_time" => self.record_wall_time = num(key, v)?,
            _ => return Err(Error::invalid(format!("unknown key `train.{key}`"))),
        }
        Ok(())
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let aug = self.augment.unwrap_or_default();
        vec![
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr_init", format!("{:?}", self.lr_init)),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            ("alpha_final", format!("{:?}", self.alpha_final)),
            ("mask_ratio", format!("{:?}", self.mask_ratio)),
            ("mask_strategy", self.mask_strategy.to_string()),
            ("normal_mode", self.normal_mode.to_string()),
            ("target_scope", self.target_scope.to_string()),
            ("seed", self.seed.to_string()),
            ("beta1", format!("{:?}", self.adam.beta1)),
            ("beta2", format!("{:?}", self.adam.beta2)),
            ("adam_eps", format!("{:?}", self.adam.eps)),
            ("augment", self.augment.is_some().to_string()),
            ("scale_range", format!("{:?},{:?}", aug.scale_range[0], aug.scale_range[1])),
            ("translate_range", format!("{:?}", aug.translate_range)),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("record_wall_time", self.record_wall_time.to_string()),
        ]
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

pub(crate) fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("cannot parse `{value}` for `{key}`")))
}

/// Fine-tuning protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// Encoder and nonlinear head both train.
    TransferAll,
    LinearFrozen,
    NonlinearFrozen,
}

impl Protocol {
    pub fn frozen_encoder(self) -> bool {
        !matches!(self, Protocol::TransferAll)
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transfer_all" => Ok(Protocol::TransferAll),
            "linear_frozen" => Ok(Protocol::LinearFrozen),
            "nonlinear_frozen" => Ok(Protocol::NonlinearFrozen),
            _ => Err(Error::invalid(format!(
                "unknown protocol `{s}` (expected transfer_all, linear_frozen or nonlinear_frozen)"
            ))),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::TransferAll => "transfer_all",
            Protocol::LinearFrozen => "linear_frozen",
            Protocol::NonlinearFrozen => "nonlinear_frozen",
        })
    }
}
