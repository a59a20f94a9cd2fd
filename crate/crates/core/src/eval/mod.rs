//! Presentation-attack-detection metrics and embedding projection.
//!
//! Scores are liveness probabilities: a sample is predicted live iff its
//! score is at least the threshold. F1 treats live as the positive class.

mod metrics;
mod pca;

pub use metrics::{
    acer, auc, candidate_thresholds, confusion_at, f1_at, sweep_threshold, Confusion, MetricsReport, ScoredSet,
};
pub use pca::{class_separation, pca_2d, PcaProjection, PCA_MAX_ITER, PCA_TOL};

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synth::Label;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("empty score set")]
    Empty,
    #[error("score {0} is outside [0, 1]")]
    ScoreRange(f64),
    #[error("both live and spoof samples are required")]
    SingleClass,
    #[error("malformed scores file: {0}")]
    Format(String),
    #[error("invalid PCA input: {0}")]
    Pca(String),
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("power iteration did not converge in {0} iterations")]
    NonConvergence(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    index: usize,
    score: f64,
    label: u8,
}

/// Writes `index,score,label`.
pub fn write_scores(path: &Path, set: &ScoredSet) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    for (index, (&score, label)) in set.scores().iter().zip(set.labels()).enumerate() {
        w.serialize(ScoreRow {
            index,
            score,
            label: label.as_u8(),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<ScoredSet, EvalError> {
    let mut r = csv::Reader::from_path(path)?;
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for row in r.deserialize::<ScoreRow>() {
        let row = row?;
        scores.push(row.score);
        labels.push(
            Label::from_u8(row.label)
                .ok_or_else(|| EvalError::Format(format!("label {} is neither 0 nor 1", row.label)))?,
        );
    }
    ScoredSet::new(scores, labels)
}

#[derive(Debug, Serialize)]
struct PointRow {
    x: f64,
    y: f64,
    label: u8,
}

/// Writes `x,y,label`.
pub fn write_projection(path: &Path, proj: &PcaProjection) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    for (p, l) in proj.points.iter().zip(&proj.labels) {
        w.serialize(PointRow {
            x: p[0],
            y: p[1],
            label: l.as_u8(),
        })?;
    }
    w.flush()?;
    Ok(())
}
