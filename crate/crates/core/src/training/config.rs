use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::synth::AugmentConfig;
use crate::tensor::{AdamConfig, SgdConfig};

/// Evaluation protocol; selects the L1 weight and the baseline budget.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Train and test on the same domain.
    #[default]
    Intra,
    /// Test on a domain never seen in training.
    Inter,
}

impl Protocol {
    pub fn lambda_l(self) -> f64 {
        match self {
            Protocol::Intra => 100.0,
            Protocol::Inter => 50.0,
        }
    }

    pub fn baseline_epochs(self) -> usize {
        match self {
            Protocol::Intra => 50,
            Protocol::Inter => 20,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Intra => "intra",
            Protocol::Inter => "inter",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "intra" => Ok(Protocol::Intra),
            "inter" => Ok(Protocol::Inter),
            _ => Err(TrainError::Config(format!("unknown protocol {s:?} (expected intra or inter)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_l: f64,
    pub lambda_g: f64,
    pub lambda_cg: f64,
    pub lambda_d: f64,
    pub lambda_cd: f64,
    pub warmup_epochs: usize,
    pub total_pdgan_epochs: usize,
    /// One critic step per this many adversarial generator steps.
    pub critic_interval: u64,
    pub gen_adam: AdamConfig,
    pub critic_sgd: SgdConfig,
    pub clf_adam: AdamConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub baseline_classifier_epochs: usize,
    /// Share of the training set held out for validation logging.
    pub val_fraction: f64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_protocol(Protocol::Intra)
    }
}

impl TrainConfig {
    pub fn for_protocol(protocol: Protocol) -> Self {
        Self {
            lambda_l: protocol.lambda_l(),
            lambda_g: 0.2,
            lambda_cg: 0.1,
            lambda_d: 1.0,
            lambda_cd: 1.0,
            warmup_epochs: 5,
            total_pdgan_epochs: 12,
            critic_interval: 25,
            gen_adam: AdamConfig::new(1e-4, 0.5, 0.999),
            critic_sgd: SgdConfig {
                lr: 1e-5,
                momentum: 0.0,
            },
            clf_adam: AdamConfig::new(1e-3, 0.9, 0.999),
            batch_size: 16,
            seed: 0,
            baseline_classifier_epochs: protocol.baseline_epochs(),
            val_fraction: 0.1,
            augment: AugmentConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let lambdas = [self.lambda_l, self.lambda_g, self.lambda_cg, self.lambda_d, self.lambda_cd];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(TrainError::Config("loss weights must be finite and non-negative".into()));
        }
        if self.warmup_epochs > self.total_pdgan_epochs {
            return Err(TrainError::Config(format!(
                "warmup epochs ({}) exceed total epochs ({})",
                self.warmup_epochs, self.total_pdgan_epochs
            )));
        }
        if self.critic_interval == 0 {
            return Err(TrainError::Config("critic interval must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(TrainError::Config(format!("validation fraction {} outside [0, 1)", self.val_fraction)));
        }
        for (name, lr) in [
            ("generator", self.gen_adam.lr),
            ("critic", self.critic_sgd.lr),
            ("classifier", self.clf_adam.lr),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(TrainError::Config(format!("{name} learning rate must be positive")));
            }
        }
        self.augment.validate().map_err(TrainError::Config)
    }

    pub fn adversarial_epochs(&self) -> usize {
        self.total_pdgan_epochs - self.warmup_epochs
    }
}

/// Classifier epochs left after a backbone has already consumed
/// `backbone_epochs` of a `baseline_epochs` budget.
pub fn epoch_budget(baseline_epochs: usize, backbone_epochs: usize) -> Result<usize, TrainError> {
    baseline_epochs.checked_sub(backbone_epochs).ok_or_else(|| {
        TrainError::Config(format!(
            "baseline budget {baseline_epochs} is smaller than the backbone's {backbone_epochs} epochs"
        ))
    })
}
