//! Score-based benchmark detectors: temporal difference (TD) and spatial
//! difference (SD), each with a detection and a localization rule.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::features::SdScoreFeatures;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Hypothesis {
    H0,
    H1,
}

/// Which side of the threshold means "attack".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    GreaterIsH1,
    SmallerIsH1,
}

impl Orientation {
    pub fn decide(self, score: f64, threshold: f64) -> Hypothesis {
        let alarm = match self {
            Orientation::GreaterIsH1 => score > threshold,
            Orientation::SmallerIsH1 => score < threshold,
        };
        if alarm {
            Hypothesis::H1
        } else {
            Hypothesis::H0
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Orientation::GreaterIsH1 => Orientation::SmallerIsH1,
            Orientation::SmallerIsH1 => Orientation::GreaterIsH1,
        }
    }

    /// Maps a score so that larger always means "more likely H1".
    pub fn normalize(self, score: f64) -> f64 {
        match self {
            Orientation::GreaterIsH1 => score,
            Orientation::SmallerIsH1 => -score,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Orientation::GreaterIsH1 => "greater_is_h1",
            Orientation::SmallerIsH1 => "smaller_is_h1",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreVerdict {
    pub score: f64,
    pub threshold: f64,
    pub decision: Hypothesis,
    pub orientation: Orientation,
}

impl ScoreVerdict {
    pub fn new(score: f64, threshold: f64, orientation: Orientation) -> Self {
        Self {
            score,
            threshold,
            decision: orientation.decide(score, threshold),
            orientation,
        }
    }
}

/// TD detection statistic: mean absolute deviation of the neighbors' `ξ`.
pub fn td_detection_score(xi: &[f64]) -> Result<f64> {
    if xi.is_empty() {
        return Err(Error::Empty("neighbor scores"));
    }
    let n = xi.len() as f64;
    let mean = xi.iter().sum::<f64>() / n;
    Ok(xi.iter().map(|x| (x - mean).abs()).sum::<f64>() / n)
}

pub fn td_detect(xi: &[f64], threshold: f64) -> Result<ScoreVerdict> {
    Ok(ScoreVerdict::new(
        td_detection_score(xi)?,
        threshold,
        Orientation::GreaterIsH1,
    ))
}

/// TD localization: `|ξ_ij|` below the threshold flags neighbor `j`.
pub fn td_localize(xi: &[f64], threshold: f64) -> Vec<ScoreVerdict> {
    xi.iter()
        .map(|x| ScoreVerdict::new(x.abs(), threshold, Orientation::SmallerIsH1))
        .collect()
}

fn check_instances(sd: &SdScoreFeatures, instances: usize, d: usize) -> Result<()> {
    if instances == 0 || instances > sd.instances() {
        return Err(invalid("instances", "must be between 1 and the recorded instance count"));
    }
    if d != sd.d {
        return Err(Error::DimensionMismatch {
            expected: sd.d,
            actual: d,
        });
    }
    Ok(())
}

/// `(1/Kd) Σ_k` of column `j` over the first `instances` rows.
fn averaged(rows: &[Vec<f64>], j: usize, instances: usize, d: usize) -> f64 {
    rows[..instances].iter().map(|r| r[j]).sum::<f64>() / (instances * d) as f64
}

/// SD detection statistic `y̌_i = (1/|N_i|) Σ_j ((1/Kd) Σ_k 1ᵀφ̄_ij^k)²`
/// using the first `instances` recorded instances.
pub fn sd_detection_score(sd: &SdScoreFeatures, instances: usize, d: usize) -> Result<f64> {
    check_instances(sd, instances, d)?;
    let n = sd.neighbors.len();
    if n == 0 {
        return Err(Error::Empty("neighbor list"));
    }
    Ok((0..n)
        .map(|j| {
            let v = averaged(&sd.detection, j, instances, d);
            v * v
        })
        .sum::<f64>()
        / n as f64)
}

pub fn sd_detect(
    sd: &SdScoreFeatures,
    instances: usize,
    d: usize,
    threshold: f64,
) -> Result<ScoreVerdict> {
    Ok(ScoreVerdict::new(
        sd_detection_score(sd, instances, d)?,
        threshold,
        Orientation::GreaterIsH1,
    ))
}

/// Per-neighbor SD localization statistics `ž_ij = ((1/Kd) Σ_k 1ᵀφ_ij^k)²`.
pub fn sd_localization_scores(sd: &SdScoreFeatures, instances: usize, d: usize) -> Result<Vec<f64>> {
    check_instances(sd, instances, d)?;
    Ok((0..sd.neighbors.len())
        .map(|j| {
            let v = averaged(&sd.localization, j, instances, d);
            v * v
        })
        .collect())
}

/// `ž_ii`, built from `φ_ii^k = −φ̄_ii^k`.
pub fn sd_self_localization_score(sd: &SdScoreFeatures, instances: usize, d: usize) -> Result<f64> {
    check_instances(sd, instances, d)?;
    let v = sd.localization_self[..instances].iter().sum::<f64>() / (instances * d) as f64;
    Ok(v * v)
}

pub fn sd_localize(
    sd: &SdScoreFeatures,
    instances: usize,
    d: usize,
    threshold: f64,
) -> Result<Vec<ScoreVerdict>> {
    Ok(sd_localization_scores(sd, instances, d)?
        .into_iter()
        .map(|s| ScoreVerdict::new(s, threshold, Orientation::GreaterIsH1))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn sd_fixture(detection: Vec<Vec<f64>>, localization: Vec<Vec<f64>>) -> SdScoreFeatures {
        let n = detection[0].len();
        SdScoreFeatures {
            monitor: 0,
            neighbors: (1..=n).collect(),
            d: 1,
            detection_self: vec![0.0; detection.len()],
            localization_self: vec![0.0; localization.len()],
            detection,
            localization,
        }
    }

    #[test]
    fn td_zero_dispersion_is_h0() {
        let v = td_detect(&[0.3; 4], 1e-9).unwrap();
        assert_eq!(v.score, 0.0);
        assert_eq!(v.decision, Hypothesis::H0);
        assert!(td_detect(&[], 0.1).is_err());
    }

    #[test]
    fn td_hand_example() {
        assert!((td_detection_score(&[0.0, 0.0, 0.0, 4.0]).unwrap() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn td_localization_direction() {
        let v = td_localize(&[0.01, 0.9], 0.1);
        assert_eq!(v[0].decision, Hypothesis::H1);
        assert_eq!(v[1].decision, Hypothesis::H0);
        assert_eq!(td_localize(&[0.0], 1e-12)[0].decision, Hypothesis::H1);
    }

    #[test]
    fn td_localization_homogeneous() {
        let xi = [0.2, -0.5, 0.05];
        let base = td_localize(&xi, 0.3);
        let scaled: Vec<f64> = xi.iter().map(|x| 3.0 * x).collect();
        let scaled = td_localize(&scaled, 0.9);
        for (a, b) in base.iter().zip(&scaled) {
            assert!((3.0 * a.score - b.score).abs() < 1e-15);
            assert_eq!(a.decision, b.decision);
        }
    }

    #[test]
    fn sd_single_neighbor_square() {
        let sd = sd_fixture(vec![vec![3.0]], vec![vec![0.0]]);
        assert!((sd_detection_score(&sd, 1, 1).unwrap() - 9.0).abs() < 1e-15);
        let flipped = sd_fixture(vec![vec![-3.0]], vec![vec![0.0]]);
        assert_eq!(
            sd_detection_score(&sd, 1, 1).unwrap(),
            sd_detection_score(&flipped, 1, 1).unwrap()
        );
        assert!(sd_detection_score(&sd, 2, 1).is_err());
        assert!(sd_detection_score(&sd, 1, 2).is_err());
    }

    #[test]
    fn orientation_flip_flips_decision() {
        for (score, thr) in [(0.2, 0.5), (0.7, 0.5), (-1.0, 3.0)] {
            let a = Orientation::GreaterIsH1.decide(score, thr);
            let b = Orientation::SmallerIsH1.decide(score, thr);
            assert_ne!(a, b);
        }
    }
}
