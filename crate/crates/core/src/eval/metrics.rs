use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::synth::Label;

/// Liveness scores (higher = more live) with their ground-truth labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<Label>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<Label>) -> Result<Self, EvalError> {
        if scores.len() != labels.len() {
            return Err(EvalError::LengthMismatch {
                scores: scores.len(),
                labels: labels.len(),
            });
        }
        if scores.is_empty() {
            return Err(EvalError::Empty);
        }
        if let Some(&s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(EvalError::ScoreRange(s));
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn by_class(&self, label: Label) -> Vec<f64> {
        self.scores
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == label)
            .map(|(&s, _)| s)
            .collect()
    }

    pub fn live_scores(&self) -> Vec<f64> {
        self.by_class(Label::Live)
    }

    pub fn spoof_scores(&self) -> Vec<f64> {
        self.by_class(Label::Spoof)
    }

    fn require_both(&self) -> Result<(), EvalError> {
        let live = self.labels.iter().filter(|&&l| l == Label::Live).count();
        if live == 0 || live == self.len() {
            return Err(EvalError::SingleClass);
        }
        Ok(())
    }
}

/// Confusion counts with live as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    /// live accepted
    pub tp: usize,
    /// spoof accepted
    pub fp: usize,
    /// spoof rejected
    pub tn: usize,
    /// live rejected
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Attacks accepted as live.
    pub fn apcer(&self) -> Result<f64, EvalError> {
        let attacks = self.fp + self.tn;
        if attacks == 0 {
            return Err(EvalError::SingleClass);
        }
        Ok(self.fp as f64 / attacks as f64)
    }

    /// Bona fide presentations rejected.
    pub fn bpcer(&self) -> Result<f64, EvalError> {
        let live = self.tp + self.fn_;
        if live == 0 {
            return Err(EvalError::SingleClass);
        }
        Ok(self.fn_ as f64 / live as f64)
    }

    pub fn acer(&self) -> Result<f64, EvalError> {
        Ok(acer(self.apcer()?, self.bpcer()?))
    }
}

pub fn acer(apcer: f64, bpcer: f64) -> f64 {
    (apcer + bpcer) / 2.0
}

/// Counts at `threshold`: a sample is predicted live iff its score is at
/// least the threshold.
pub fn confusion_at(set: &ScoredSet, threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for (&s, &l) in set.scores.iter().zip(&set.labels) {
        match (l, s >= threshold) {
            (Label::Live, true) => c.tp += 1,
            (Label::Live, false) => c.fn_ += 1,
            (Label::Spoof, true) => c.fp += 1,
            (Label::Spoof, false) => c.tn += 1,
        }
    }
    c
}

/// F1 with live as the positive class; 0 when undefined.
pub fn f1_at(c: &Confusion) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * c.tp as f64 / denom as f64
    }
}

/// Probability that a random live score beats a random spoof score, ties
/// counting one half.
pub fn auc(set: &ScoredSet) -> Result<f64, EvalError> {
    set.require_both()?;
    let mut live = set.live_scores();
    live.sort_by(f64::total_cmp);
    let spoof = set.spoof_scores();
    let mut wins = 0.0;
    for s in &spoof {
        let below_or_eq = live.partition_point(|l| l <= s);
        let below = live.partition_point(|l| l < s);
        wins += (live.len() - below_or_eq) as f64 + 0.5 * (below_or_eq - below) as f64;
    }
    Ok(wins / (live.len() as f64 * spoof.len() as f64))
}

/// Candidate thresholds: 0, 1 and every midpoint between consecutive
/// distinct scores, in ascending order.
pub fn candidate_thresholds(set: &ScoredSet) -> Vec<f64> {
    let mut s = set.scores.clone();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let mut out = Vec::with_capacity(s.len() + 1);
    out.push(0.0);
    out.extend(s.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    out.push(1.0);
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bpcer: f64,
    pub apcer: f64,
    pub acer: f64,
    pub f1: f64,
    pub auc: f64,
    pub threshold: f64,
    pub counts: Confusion,
}

impl MetricsReport {
    /// Metrics at a fixed threshold.
    pub fn at(set: &ScoredSet, threshold: f64) -> Result<Self, EvalError> {
        set.require_both()?;
        let counts = confusion_at(set, threshold);
        let (apcer, bpcer) = (counts.apcer()?, counts.bpcer()?);
        Ok(Self {
            bpcer,
            apcer,
            acer: acer(apcer, bpcer),
            f1: f1_at(&counts),
            auc: auc(set)?,
            threshold,
            counts,
        })
    }

    /// The `BPCER APCER ACER F1 Threshold AUC` row.
    pub fn table_row(&self) -> String {
        format!(
            "{:.4} {:.4} {:.5} {:.4} {:.4} {:.4}",
            self.bpcer, self.apcer, self.acer, self.f1, self.threshold, self.auc
        )
    }

    pub const TABLE_HEADER: &'static str = "BPCER APCER ACER F1 Threshold AUC";
}

/// Exhaustive search for the ACER-minimizing threshold. ACER is piecewise
/// constant between distinct scores, so checking one point per interval is
/// exact. Ties go to the smaller threshold.
pub fn sweep_threshold(set: &ScoredSet) -> Result<MetricsReport, EvalError> {
    set.require_both()?;
    let mut live = set.live_scores();
    let mut spoof = set.spoof_scores();
    live.sort_by(f64::total_cmp);
    spoof.sort_by(f64::total_cmp);
    let mut best: Option<(f64, f64)> = None;
    for t in candidate_thresholds(set) {
        let c = Confusion {
            tp: live.len() - live.partition_point(|&s| s < t),
            fn_: live.partition_point(|&s| s < t),
            fp: spoof.len() - spoof.partition_point(|&s| s < t),
            tn: spoof.partition_point(|&s| s < t),
        };
        let a = c.acer()?;
        if best.map_or(true, |(b, _)| a < b) {
            best = Some((a, t));
        }
    }
    let (_, t) = best.expect("at least two candidates");
    MetricsReport::at(set, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn six() -> ScoredSet {
        use Label::*;
        ScoredSet::new(
            vec![0.9, 0.8, 0.4, 0.3, 0.2, 0.7],
            vec![Live, Live, Live, Spoof, Spoof, Spoof],
        )
        .unwrap()
    }

    fn set_from(pairs: &[(f64, bool)]) -> ScoredSet {
        ScoredSet::new(
            pairs.iter().map(|p| p.0).collect(),
            pairs.iter().map(|p| if p.1 { Label::Live } else { Label::Spoof }).collect(),
        )
        .unwrap()
    }

    #[test]
    fn hand_counted_confusion() {
        let c = confusion_at(&six(), 0.5);
        assert_eq!(c, Confusion { tp: 2, fp: 1, tn: 2, fn_: 1 });
        assert_eq!(c.apcer().unwrap(), 1.0 / 3.0);
        assert_eq!(c.bpcer().unwrap(), 1.0 / 3.0);
        assert_eq!(c.acer().unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn table_one_acer() {
        assert!((acer(0.0653, 0.0618) - 0.06355).abs() < 1e-15);
    }

    #[test]
    fn sweep_on_six_scores() {
        // ACER by interval: 1/6 on (0.3, 0.4] and (0.7, 0.8], 1/3 in between;
        // the smaller optimum wins the tie
        let r = sweep_threshold(&six()).unwrap();
        assert_eq!(r.acer, 1.0 / 6.0);
        assert_eq!(r.threshold, 0.35);
        assert_eq!(confusion_at(&six(), 0.55).acer().unwrap(), 1.0 / 3.0);
        assert_eq!(confusion_at(&six(), 0.75).acer().unwrap(), 1.0 / 6.0);
        assert_eq!(r.acer, (r.apcer + r.bpcer) / 2.0);
        assert_eq!(r.counts.total(), 6);
    }

    #[test]
    fn separated_scores_are_perfect() {
        let s = set_from(&[(0.9, true), (0.7, true), (0.2, false), (0.1, false)]);
        let r = sweep_threshold(&s).unwrap();
        assert_eq!((r.acer, r.apcer, r.bpcer, r.f1, r.auc), (0.0, 0.0, 0.0, 1.0, 1.0));
        for t in [0.3, 0.5, 0.7] {
            assert_eq!(confusion_at(&s, t).acer().unwrap(), 0.0);
        }
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_at(&Confusion { tp: 2, fp: 1, tn: 0, fn_: 1 }), 4.0 / 6.0);
        assert_eq!(f1_at(&Confusion { tp: 3, fp: 0, tn: 3, fn_: 0 }), 1.0);
        assert_eq!(f1_at(&Confusion { tp: 0, fp: 0, tn: 3, fn_: 3 }), 0.0);
        assert_eq!(f1_at(&Confusion::default()), 0.0);
    }

    #[test]
    fn auc_examples() {
        assert!((auc(&six()).unwrap() - 8.0 / 9.0).abs() < 1e-15);
        let flat = set_from(&[(0.5, true), (0.5, false), (0.5, true)]);
        assert_eq!(auc(&flat).unwrap(), 0.5);
    }

    #[test]
    fn single_class_and_bad_inputs_are_errors() {
        let s = set_from(&[(0.5, true), (0.4, true)]);
        assert!(matches!(sweep_threshold(&s), Err(EvalError::SingleClass)));
        assert!(matches!(auc(&s), Err(EvalError::SingleClass)));
        assert!(confusion_at(&s, 0.5).apcer().is_err());
        assert!(ScoredSet::new(vec![1.2], vec![Label::Live]).is_err());
        assert!(ScoredSet::new(vec![0.2], vec![]).is_err());
        assert!(ScoredSet::new(vec![], vec![]).is_err());
    }

    fn arb_set() -> impl Strategy<Value = ScoredSet> {
        prop::collection::vec((0u32..=40, any::<bool>()), 2..120)
            .prop_filter("both classes", |v| v.iter().any(|p| p.1) && v.iter().any(|p| !p.1))
            .prop_map(|v| set_from(&v.iter().map(|&(q, l)| (q as f64 / 40.0, l)).collect::<Vec<_>>()))
    }

    proptest! {
        #[test]
        fn duplicating_samples_keeps_rates(set in arb_set()) {
            let r = sweep_threshold(&set).unwrap();
            let mut scores = set.scores().to_vec();
            scores.extend_from_slice(set.scores());
            let mut labels = set.labels().to_vec();
            labels.extend_from_slice(set.labels());
            let d = sweep_threshold(&ScoredSet::new(scores, labels).unwrap()).unwrap();
            prop_assert_eq!((r.acer, r.apcer, r.bpcer, r.threshold, r.auc), (d.acer, d.apcer, d.bpcer, d.threshold, d.auc));
        }

        #[test]
        fn monotone_maps_preserve_auc_and_best_acer(set in arb_set()) {
            let mapped = ScoredSet::new(set.scores().iter().map(|s| s * s).collect(), set.labels().to_vec()).unwrap();
            prop_assert!((auc(&set).unwrap() - auc(&mapped).unwrap()).abs() < 1e-12);
            prop_assert_eq!(sweep_threshold(&set).unwrap().acer, sweep_threshold(&mapped).unwrap().acer);
        }

        #[test]
        fn sweep_is_no_worse_than_a_fine_grid(set in arb_set()) {
            let r = sweep_threshold(&set).unwrap();
            let grid_best = (0..=10_000)
                .map(|i| confusion_at(&set, i as f64 / 10_000.0).acer().unwrap())
                .fold(f64::INFINITY, f64::min);
            prop_assert!(r.acer <= grid_best);
            prop_assert_eq!(r.acer, (r.apcer + r.bpcer) / 2.0);
            prop_assert_eq!(r.counts.total(), set.len());
        }
    }
}
