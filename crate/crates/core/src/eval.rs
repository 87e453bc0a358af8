//! Detection and false-alarm rates, ROC curves and AUC, and a uniform
//! evaluation harness over score-based and neural detectors.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::datagen::{SampleRow, Task};
use crate::error::{invalid, Error, Result};
use crate::features::{merge_group_scores, tailor_inputs, FeatureKind, InputScaling};
use crate::neural::Mlp;
use crate::score::{
    sd_detection_score, sd_localization_scores, td_detection_score, Orientation,
};

fn counts(labels: &[bool]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 {
        return Err(Error::EmptyClass("positive"));
    }
    if neg == 0 {
        return Err(Error::EmptyClass("negative"));
    }
    Ok((pos, neg))
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            actual: scores.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(invalid("scores", "must be finite"));
    }
    counts(labels)
}

/// `(P_d, P_f)` when flagging with `orientation.decide(score, threshold)`.
pub fn rates_at_threshold(
    scores: &[f64],
    labels: &[bool],
    threshold: f64,
    orientation: Orientation,
) -> Result<(f64, f64)> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let (mut tp, mut fp) = (0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        if orientation.decide(s, threshold) == crate::score::Hypothesis::H1 {
            if l {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    Ok((tp as f64 / pos as f64, fp as f64 / neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Threshold in the detector's own orientation; infinite at the ends.
    pub threshold: f64,
    pub p_f: f64,
    pub p_d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub orientation: Orientation,
    pub n_pos: usize,
    pub n_neg: usize,
    pub auc: f64,
}

impl RocCurve {
    /// Monotone staircase from (0,0) to (1,1).
    pub fn is_valid(&self) -> bool {
        let (first, last) = match (self.points.first(), self.points.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return false,
        };
        first.p_f == 0.0
            && first.p_d == 0.0
            && last.p_f == 1.0
            && last.p_d == 1.0
            && self
                .points
                .windows(2)
                .all(|w| w[1].p_f >= w[0].p_f && w[1].p_d >= w[0].p_d)
            && (0.0..=1.0).contains(&self.auc)
    }
}

/// Sweeps thresholds at the midpoints between distinct scores, plus the two
/// infinite sentinels. Tied scores move together.
pub fn roc_curve(scores: &[f64], labels: &[bool], orientation: Orientation) -> Result<RocCurve> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut ranked: Vec<(f64, bool)> = scores
        .iter()
        .zip(labels)
        .map(|(&s, &l)| (orientation.normalize(s), l))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let restore = |t: f64| match orientation {
        Orientation::GreaterIsH1 => t,
        Orientation::SmallerIsH1 => -t,
    };
    let mut points = Vec::new();
    points.push(RocPoint {
        threshold: restore(f64::INFINITY),
        p_f: 0.0,
        p_d: 0.0,
    });
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut k = 0;
    while k < ranked.len() {
        let v = ranked[k].0;
        while k < ranked.len() && ranked[k].0 == v {
            if ranked[k].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let threshold = if k < ranked.len() {
            0.5 * (v + ranked[k].0)
        } else {
            f64::NEG_INFINITY
        };
        let prev = *points.last().unwrap();
        let point = RocPoint {
            threshold: restore(threshold),
            p_f: fp as f64 / neg as f64,
            p_d: tp as f64 / pos as f64,
        };
        auc += (point.p_f - prev.p_f) * 0.5 * (point.p_d + prev.p_d);
        points.push(point);
    }
    Ok(RocCurve {
        points,
        orientation,
        n_pos: pos,
        n_neg: neg,
        auc,
    })
}

/// Probability that a random positive outscores a random negative, ties
/// counted as one half. Quadratic; intended as a reference.
pub fn mann_whitney(scores: &[f64], labels: &[bool], orientation: Orientation) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut wins = 0.0;
    for (a, &la) in scores.iter().zip(labels) {
        if !la {
            continue;
        }
        for (b, &lb) in scores.iter().zip(labels) {
            if lb {
                continue;
            }
            let (a, b) = (orientation.normalize(*a), orientation.normalize(*b));
            if a > b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (pos * neg) as f64)
}

/// A detector producing raw scores from a sample row.
pub trait Detector {
    fn name(&self) -> &str;
    /// Detection score of the row.
    fn nd_score(&self, row: &SampleRow) -> Result<f64>;
    fn nd_orientation(&self) -> Orientation;
    /// One localization score per neighbor of the monitor.
    fn nl_scores(&self, row: &SampleRow) -> Result<Vec<f64>>;
    fn nl_orientation(&self) -> Orientation;
}

/// Temporal-difference score detector over the first `instances` instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TdDetector {
    pub instances: usize,
}

impl Detector for TdDetector {
    fn name(&self) -> &str {
        "td"
    }

    fn nd_score(&self, row: &SampleRow) -> Result<f64> {
        td_detection_score(&row.scores(FeatureKind::Temporal, self.instances)?.values)
    }

    fn nd_orientation(&self) -> Orientation {
        Orientation::GreaterIsH1
    }

    fn nl_scores(&self, row: &SampleRow) -> Result<Vec<f64>> {
        Ok(row
            .scores(FeatureKind::Temporal, self.instances)?
            .values
            .iter()
            .map(|x| x.abs())
            .collect())
    }

    fn nl_orientation(&self) -> Orientation {
        Orientation::SmallerIsH1
    }
}

/// Spatial-difference score detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SdDetector {
    pub instances: usize,
}

impl Detector for SdDetector {
    fn name(&self) -> &str {
        "sd"
    }

    fn nd_score(&self, row: &SampleRow) -> Result<f64> {
        sd_detection_score(&row.sd_features(self.instances)?, self.instances, row.d)
    }

    fn nd_orientation(&self) -> Orientation {
        Orientation::GreaterIsH1
    }

    fn nl_scores(&self, row: &SampleRow) -> Result<Vec<f64>> {
        sd_localization_scores(&row.sd_features(self.instances)?, self.instances, row.d)
    }

    fn nl_orientation(&self) -> Orientation {
        Orientation::GreaterIsH1
    }
}

/// A trained network applied to tailored feature groups. Detection takes the
/// maximum output over groups; localization takes, per neighbor, the
/// maximum over the groups containing it.
#[derive(Debug, Clone, PartialEq)]
pub struct NnDetector {
    pub name: &'static str,
    pub model: Mlp,
    pub kind: FeatureKind,
    pub instances: usize,
    pub scaling: InputScaling,
}

impl NnDetector {
    fn groups(&self, row: &SampleRow) -> Result<Vec<crate::features::TailoredGroup>> {
        let s = row.scores(self.kind, self.instances)?;
        tailor_inputs(&s.values, s.self_value, self.model.inputs())
    }
}

impl Detector for NnDetector {
    fn name(&self) -> &str {
        self.name
    }

    fn nd_score(&self, row: &SampleRow) -> Result<f64> {
        if self.model.outputs() != 1 {
            return Err(invalid("model", "detection head must have a single output"));
        }
        let mut best = f64::NEG_INFINITY;
        for g in self.groups(row)? {
            best = best.max(self.model.forward(&self.scaling.apply_all(&g.values))?[0]);
        }
        Ok(best)
    }

    fn nd_orientation(&self) -> Orientation {
        Orientation::GreaterIsH1
    }

    fn nl_scores(&self, row: &SampleRow) -> Result<Vec<f64>> {
        if self.model.outputs() != self.model.inputs() {
            return Err(invalid("model", "localization head needs one output per slot"));
        }
        let groups = self.groups(row)?;
        let outputs = groups
            .iter()
            .map(|g| self.model.forward(&self.scaling.apply_all(&g.values)))
            .collect::<Result<Vec<_>>>()?;
        Ok(merge_group_scores(row.neighbors.len(), &groups, &outputs))
    }

    fn nl_orientation(&self) -> Orientation {
        Orientation::GreaterIsH1
    }
}

/// Pooled scores and labels. ND: one per row. NL: one per (row, neighbor)
/// over attack rows only, i.e. assuming detection already succeeded.
pub fn collect_scores<D: Detector + ?Sized>(
    detector: &D,
    rows: &[SampleRow],
    task: Task,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for row in rows {
        match task {
            Task::Nd => {
                scores.push(detector.nd_score(row)?);
                labels.push(row.is_h1());
            }
            Task::Nl => {
                if !row.is_h1() {
                    continue;
                }
                scores.extend(detector.nl_scores(row)?);
                labels.extend(row.neighbor_labels());
            }
        }
    }
    Ok((scores, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub detector: alloc::string::String,
    pub task: Task,
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

pub fn evaluate_detector<D: Detector + ?Sized>(
    detector: &D,
    rows: &[SampleRow],
    task: Task,
) -> Result<(RocCurve, EvalSummary)> {
    let (scores, labels) = collect_scores(detector, rows, task)?;
    let orientation = match task {
        Task::Nd => detector.nd_orientation(),
        Task::Nl => detector.nl_orientation(),
    };
    let curve = roc_curve(&scores, &labels, orientation)?;
    let summary = EvalSummary {
        detector: detector.name().into(),
        task,
        auc: curve.auc,
        n_pos: curve.n_pos,
        n_neg: curve.n_neg,
    };
    Ok((curve, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn rates_extremes_and_hand_count() {
        let s = [0.9, 0.8, 0.3, 0.1];
        let l = [true, true, false, false];
        let g = Orientation::GreaterIsH1;
        assert_eq!(rates_at_threshold(&s, &l, 0.0, g).unwrap(), (1.0, 1.0));
        assert_eq!(rates_at_threshold(&s, &l, 1.0, g).unwrap(), (0.0, 0.0));
        assert_eq!(rates_at_threshold(&s, &l, 0.5, g).unwrap(), (1.0, 0.0));
        assert_eq!(
            rates_at_threshold(&s, &[true; 4], 0.5, g),
            Err(Error::EmptyClass("negative"))
        );
    }

    #[test]
    fn hand_auc() {
        let c = roc_curve(
            &[0.9, 0.8, 0.3, 0.1],
            &[true, false, true, false],
            Orientation::GreaterIsH1,
        )
        .unwrap();
        assert!((c.auc - 0.75).abs() < 1e-15);
        assert!(c.is_valid());
        assert_eq!(c.points.len(), 5);
    }

    #[test]
    fn separated_and_constant() {
        let l = [true, true, false, false];
        let sep = roc_curve(&[4.0, 3.0, 2.0, 1.0], &l, Orientation::GreaterIsH1).unwrap();
        assert_eq!(sep.auc, 1.0);
        let flat = roc_curve(&[0.5; 4], &l, Orientation::GreaterIsH1).unwrap();
        assert_eq!(flat.auc, 0.5);
        assert_eq!(flat.points.len(), 2);
        assert_eq!((flat.points[1].p_f, flat.points[1].p_d), (1.0, 1.0));
    }

    #[test]
    fn smaller_is_h1_equals_negated() {
        let s = [0.2, 0.7, 0.1, 0.5, 0.5, 0.9];
        let l = [true, false, true, false, true, false];
        let a = roc_curve(&s, &l, Orientation::SmallerIsH1).unwrap();
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        let b = roc_curve(&neg, &l, Orientation::GreaterIsH1).unwrap();
        assert_eq!(a.auc, b.auc);
        for (p, q) in a.points.iter().zip(&b.points) {
            assert_eq!((p.p_f, p.p_d), (q.p_f, q.p_d));
            assert_eq!(p.threshold, -q.threshold);
        }
        let (pd, pf) = rates_at_threshold(&s, &l, a.points[2].threshold, Orientation::SmallerIsH1).unwrap();
        assert_eq!((pf, pd), (a.points[2].p_f, a.points[2].p_d));
    }

    #[test]
    fn rejects_nonfinite_and_mismatch() {
        assert!(roc_curve(&[f64::NAN, 1.0], &[true, false], Orientation::GreaterIsH1).is_err());
        assert!(roc_curve(&[1.0], &[true, false], Orientation::GreaterIsH1).is_err());
        let _ = vec![0];
    }
}
