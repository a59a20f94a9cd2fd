use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Adversarial,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Warmup => "warmup",
            Phase::Adversarial => "adversarial",
        })
    }
}

/// One generator step; adversarial and critic columns are empty when the
/// corresponding term was not computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub phase: Phase,
    pub loss_total: f64,
    pub loss_l1: f64,
    pub loss_adv: Option<f64>,
    pub loss_aux: Option<f64>,
    pub critic_total: Option<f64>,
    pub critic_adv: Option<f64>,
    pub critic_aux: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub train_l1: f64,
    pub val_l1: Option<f64>,
    /// Mean generated depth on held-out live / spoof inputs.
    pub val_live_mean: Option<f64>,
    pub val_spoof_mean: Option<f64>,
}

/// Classifier fine-tuning step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierRecord {
    pub epoch: usize,
    pub step: u64,
    pub backbone: String,
    pub loss_total: f64,
    pub loss_bce: f64,
    pub loss_class: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn critic_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.critic_total.is_some()).count()
    }
}

/// Writes records as CSV, preceded by a `# key=value ...` comment line
/// when `header` is non-empty.
pub fn write_csv<T: Serialize>(path: &Path, header: &[(&str, String)], rows: &[T]) -> Result<(), TrainError> {
    let mut buf = Vec::new();
    if !header.is_empty() {
        let line: Vec<String> = header.iter().map(|(k, v)| format!("{k}={v}")).collect();
        writeln!(buf, "# {}", line.join(" "))?;
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, TrainError> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let rows = r.deserialize().collect::<Result<Vec<T>, _>>()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_log_columns_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        let rows = vec![
            StepRecord {
                epoch: 0,
                step: 1,
                phase: Phase::Warmup,
                loss_total: 50.0,
                loss_l1: 0.5,
                loss_adv: None,
                loss_aux: None,
                critic_total: None,
                critic_adv: None,
                critic_aux: None,
            },
            StepRecord {
                epoch: 5,
                step: 2,
                phase: Phase::Adversarial,
                loss_total: 1.0,
                loss_l1: 0.01,
                loss_adv: Some(0.7),
                loss_aux: Some(0.6),
                critic_total: Some(2.0),
                critic_adv: Some(1.0),
                critic_aux: Some(1.0),
            },
        ];
        write_csv(&p, &[("lambda_l", "100".into())], &rows).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# lambda_l=100"));
        assert_eq!(
            lines.next(),
            Some("epoch,step,phase,loss_total,loss_l1,loss_adv,loss_aux,critic_total,critic_adv,critic_aux")
        );
        assert_eq!(lines.next(), Some("0,1,warmup,50.0,0.5,,,,,"));
        assert_eq!(read_csv::<StepRecord>(&p).unwrap(), rows);
    }
}
