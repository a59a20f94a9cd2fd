//! Maps library errors onto process exit codes.
//!
//! 0 success, 2 usage, 3 I/O or malformed files, 4 numeric failure,
//! 5 degenerate data, 6 algorithmic non-convergence, 1 anything else.

use pdgan::eval::EvalError;
use pdgan::models::ModelError;
use pdgan::synth::SynthError;
use pdgan::training::TrainError;
use pdgan::TensorError;

use crate::Usage;

pub const USAGE: u8 = 2;
pub const IO: u8 = 3;
pub const NUMERIC: u8 = 4;
pub const DEGENERATE: u8 = 5;
pub const NON_CONVERGENCE: u8 = 6;
const OTHER: u8 = 1;

pub fn code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        USAGE
    } else if let Some(e) = e.downcast_ref::<TrainError>() {
        train(e)
    } else if let Some(e) = e.downcast_ref::<EvalError>() {
        eval(e)
    } else if let Some(e) = e.downcast_ref::<ModelError>() {
        model(e)
    } else if let Some(e) = e.downcast_ref::<SynthError>() {
        synth(e)
    } else if let Some(e) = e.downcast_ref::<TensorError>() {
        tensor(e)
    } else if e.downcast_ref::<std::io::Error>().is_some() || e.downcast_ref::<serde_json::Error>().is_some() {
        IO
    } else {
        OTHER
    }
}

fn train(e: &TrainError) -> u8 {
    match e {
        TrainError::Config(_) => USAGE,
        TrainError::EmptyDataset | TrainError::SingleClass => DEGENERATE,
        TrainError::NonFinite { .. } => NUMERIC,
        TrainError::Tensor(e) => tensor(e),
        TrainError::Model(e) => model(e),
        TrainError::Synth(e) => synth(e),
        TrainError::Eval(e) => eval(e),
        TrainError::Io(_) | TrainError::Json(_) | TrainError::Csv(_) => IO,
    }
}

fn eval(e: &EvalError) -> u8 {
    match e {
        EvalError::Empty | EvalError::SingleClass => DEGENERATE,
        EvalError::Pca(_) | EvalError::Degenerate(_) | EvalError::NonConvergence(_) => NON_CONVERGENCE,
        EvalError::Format(_) | EvalError::Io(_) | EvalError::Csv(_) => IO,
        EvalError::LengthMismatch { .. } | EvalError::ScoreRange(_) => OTHER,
    }
}

fn model(e: &ModelError) -> u8 {
    match e {
        ModelError::InvalidArch(_) | ModelError::Incompatible(_) | ModelError::Input { .. } | ModelError::NoClassHead => {
            USAGE
        }
        ModelError::Tensor(e) => tensor(e),
        ModelError::Io(_) | ModelError::Json(_) => IO,
    }
}

fn synth(e: &SynthError) -> u8 {
    match e {
        SynthError::SizeTooSmall(_) => USAGE,
        SynthError::Tensor(e) => tensor(e),
        SynthError::Inconsistent { .. } | SynthError::Dataset(_) => IO,
        SynthError::Io(_) | SynthError::Json(_) | SynthError::Csv(_) => IO,
    }
}

fn tensor(e: &TensorError) -> u8 {
    match e {
        TensorError::NonFinite { .. } => NUMERIC,
        TensorError::Format(_) | TensorError::Io(_) => IO,
        _ => OTHER,
    }
}
