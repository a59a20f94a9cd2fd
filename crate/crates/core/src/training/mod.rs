//! Two-phase pseudo-depth training (L1 warmup, then adversarial with an
//! auxiliary-classifier critic) and liveness classifier fine-tuning.

mod classifier;
mod config;
mod log;
mod losses;
mod pdgan;

pub use classifier::{build_classifier, embed_dataset, finetune_classifier, score_dataset, BackboneSource};
pub use config::{epoch_budget, Protocol, TrainConfig};
pub use log::{read_csv, write_csv, ClassifierRecord, EpochRecord, Phase, StepRecord, TrainLog};
pub use losses::{critic_loss, generator_loss, CriticLoss, GeneratorLoss};
pub use pdgan::{depth_report, predict_depths, DepthReport, PdganTrainer, TrainerState};

use thiserror::Error;

use crate::eval::EvalError;
use crate::models::ModelError;
use crate::synth::SynthError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("the dataset is empty")]
    EmptyDataset,
    #[error("the dataset contains a single class; live and spoof samples are both required")]
    SingleClass,
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error(transparent)]
    Tensor(TensorError),
    #[error(transparent)]
    Model(ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { op } => TrainError::NonFinite { op },
            e => TrainError::Tensor(e),
        }
    }
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(t) => t.into(),
            e => TrainError::Model(e),
        }
    }
}
