//! Registration error metrics.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::model::FrameId;

pub const ROTATION_THRESHOLDS_DEG: [f64; 5] = [3.0, 5.0, 10.0, 30.0, 45.0];
pub const TRANSLATION_THRESHOLDS: [f64; 5] = [0.05, 0.1, 0.25, 0.5, 0.75];
pub const RECALL_TRANSLATION: f64 = 0.2;
pub const RECALL_ROTATION_DEG: f64 = 15.0;

/// Geodesic angle between two rotations, in radians.
///
/// Equals `acos((tr(pred^T gt) - 1) / 2)`, evaluated through atan2 of the
/// sine and cosine parts so small and near-half-turn angles keep full precision.
pub fn rotation_error(pred: &Matrix3<f64>, gt: &Matrix3<f64>) -> f64 {
    let d = pred.transpose() * gt;
    let cos2 = (d.trace() - 1.0).clamp(-2.0, 2.0);
    let sin2 = Vector3::new(d[(2, 1)] - d[(1, 2)], d[(0, 2)] - d[(2, 0)], d[(1, 0)] - d[(0, 1)]).norm();
    sin2.atan2(cos2)
}

pub fn translation_error(pred: &Vector3<f64>, gt: &Vector3<f64>) -> f64 {
    (pred - gt).norm()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairError {
    pub a: FrameId,
    pub b: FrameId,
    /// Radians.
    pub rotation: f64,
    pub translation: f64,
}

impl PairError {
    pub fn passes(&self, max_rotation: f64, max_translation: f64) -> bool {
        self.rotation < max_rotation && self.translation < max_translation
    }
}

/// Fraction of pairs under both thresholds (rotation in radians).
pub fn registration_recall(pairs: &[PairError], max_rotation: f64, max_translation: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("registration recall needs at least one pair"));
    }
    let ok = pairs.iter().filter(|p| p.passes(max_rotation, max_translation)).count();
    Ok(ok as f64 / pairs.len() as f64)
}

/// Fraction of `errors` at or below each threshold. Thresholds must ascend.
pub fn ecdf(errors: &[f64], thresholds: &[f64]) -> Vec<f64> {
    debug_assert!(thresholds.windows(2).all(|w| w[0] <= w[1]));
    if errors.is_empty() {
        return vec![0.0; thresholds.len()];
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    thresholds
        .iter()
        .map(|t| sorted.partition_point(|e| e <= t) as f64 / sorted.len() as f64)
        .collect()
}

/// Relative transform taking frame `b` coordinates to frame `a` coordinates,
/// from absolute poses that map a common frame into each frame.
pub fn relative(abs_a: &Pose, abs_b: &Pose) -> Pose {
    abs_a.compose(&abs_b.inverse())
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub units: String,
    pub pairs: Vec<PairError>,
    /// Evaluated pairs with at least one unregistered frame; they count as
    /// failures in recall and the eCDFs.
    pub missing: Vec<(FrameId, FrameId)>,
    pub mean_rotation_deg: f64,
    pub median_rotation_deg: f64,
    pub mean_translation: f64,
    pub median_translation: f64,
    pub rotation_thresholds_deg: Vec<f64>,
    pub rotation_ecdf: Vec<f64>,
    pub translation_thresholds: Vec<f64>,
    pub translation_ecdf: Vec<f64>,
    pub recall_rotation_deg: f64,
    pub recall_translation: f64,
    pub registration_recall: f64,
}

impl ErrorReport {
    /// Plain-text eCDF table.
    pub fn ecdf_table(&self) -> String {
        let mut out = String::from("rotation (deg)");
        for (t, v) in self.rotation_thresholds_deg.iter().zip(&self.rotation_ecdf) {
            out.push_str(&format!("  <={t}: {v:.3}"));
        }
        out.push_str(&format!("\ntranslation ({})", self.units));
        for (t, v) in self.translation_thresholds.iter().zip(&self.translation_ecdf) {
            out.push_str(&format!("  <={t}: {v:.3}"));
        }
        out.push_str(&format!("\nregistration recall: {:.4}\n", self.registration_recall));
        out
    }
}

/// Scores predicted absolute poses against ground truth on the given pairs,
/// using relative transforms only.
pub fn evaluate(
    predicted: &BTreeMap<FrameId, Pose>,
    ground_truth: &BTreeMap<FrameId, Pose>,
    pairs: &[(FrameId, FrameId)],
    units: &str,
) -> Result<ErrorReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("no pairs to evaluate"));
    }
    let mut errors = Vec::new();
    let mut missing = Vec::new();
    for &(a, b) in pairs {
        let (Some(ga), Some(gb)) = (ground_truth.get(&a), ground_truth.get(&b)) else {
            return Err(Error::invalid(format!("no ground truth for pair ({a}, {b})")));
        };
        match (predicted.get(&a), predicted.get(&b)) {
            (Some(pa), Some(pb)) => {
                let pred = relative(pa, pb);
                let gt = relative(ga, gb);
                errors.push(PairError {
                    a,
                    b,
                    rotation: rotation_error(pred.rotation(), gt.rotation()),
                    translation: translation_error(pred.translation(), gt.translation()),
                });
            }
            _ => missing.push((a, b)),
        }
    }

    let rot_deg: Vec<f64> = errors.iter().map(|e| e.rotation.to_degrees()).collect();
    let trans: Vec<f64> = errors.iter().map(|e| e.translation).collect();
    let with_missing = |v: &[f64]| {
        let mut all = v.to_vec();
        all.extend(std::iter::repeat_n(f64::INFINITY, missing.len()));
        all
    };
    let passed = errors
        .iter()
        .filter(|e| e.passes(RECALL_ROTATION_DEG.to_radians(), RECALL_TRANSLATION))
        .count();
    Ok(ErrorReport {
        units: units.to_owned(),
        mean_rotation_deg: mean(&rot_deg),
        median_rotation_deg: median(&rot_deg),
        mean_translation: mean(&trans),
        median_translation: median(&trans),
        rotation_thresholds_deg: ROTATION_THRESHOLDS_DEG.to_vec(),
        rotation_ecdf: ecdf(&with_missing(&rot_deg), &ROTATION_THRESHOLDS_DEG),
        translation_thresholds: TRANSLATION_THRESHOLDS.to_vec(),
        translation_ecdf: ecdf(&with_missing(&trans), &TRANSLATION_THRESHOLDS),
        recall_rotation_deg: RECALL_ROTATION_DEG,
        recall_translation: RECALL_TRANSLATION,
        registration_recall: passed as f64 / pairs.len() as f64,
        pairs: errors,
        missing,
    })
}

/// Upper bound of [`rotation_error`].
pub const MAX_ROTATION_ERROR: f64 = PI;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{axis_angle, random_pose, random_rotation};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair(rotation: f64, translation: f64) -> PairError {
        PairError { a: 0, b: 1, rotation, translation }
    }

    #[test]
    fn exact_prediction_has_zero_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let r = random_rotation(&mut rng);
        assert!(rotation_error(&r, &r) < 1e-12);
        let t = Vector3::new(0.3, -1.0, 2.0);
        assert_eq!(translation_error(&t, &t), 0.0);
    }

    #[test]
    fn quarter_turn() {
        let rz = axis_angle(&Vector3::z(), PI / 2.0);
        assert!((rotation_error(&rz, &Matrix3::identity()) - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn one_two_two() {
        assert_eq!(translation_error(&Vector3::new(1.0, 2.0, 2.0), &Vector3::zeros()), 3.0);
    }

    #[test]
    fn half_turn_is_clamped() {
        let rx = axis_angle(&Vector3::x(), PI);
        let e = rotation_error(&rx, &Matrix3::identity());
        assert!((e - PI).abs() < 1e-12);
        assert!(e <= MAX_ROTATION_ERROR);
    }

    #[test]
    fn recall_cases() {
        assert_eq!(registration_recall(&[pair(0.0, 0.0); 4], 0.26, 0.2).unwrap(), 1.0);
        assert_eq!(registration_recall(&[pair(0.0, 1.0); 4], 0.26, 0.2).unwrap(), 0.0);
        let mixed = [pair(0.0, 0.01), pair(0.1, 0.1), pair(0.01, 0.19), pair(0.5, 0.0)];
        assert_eq!(registration_recall(&mixed, 15f64.to_radians(), 0.2).unwrap(), 0.75);
        assert!(registration_recall(&[], 0.1, 0.1).is_err());
    }

    #[test]
    fn ecdf_cases() {
        assert_eq!(ecdf(&[0.0; 5], &[0.05, 0.1]), vec![1.0, 1.0]);
        assert_eq!(ecdf(&[1.0, 2.0, 3.0, 4.0], &[2.5]), vec![0.5]);
        assert_eq!(ecdf(&[1.0, 2.0], &[2.0]), vec![1.0]);
    }

    #[test]
    fn evaluate_is_gauge_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let gt: BTreeMap<FrameId, Pose> = (0..4).map(|i| (i, random_pose(&mut rng, 3.0))).collect();
        // The same poses seen from a different common frame.
        let gauge = random_pose(&mut rng, 3.0);
        let pred: BTreeMap<FrameId, Pose> = gt.iter().map(|(&i, p)| (i, p.compose(&gauge))).collect();
        let pairs = vec![(0, 1), (1, 2), (2, 3), (0, 3)];
        let report = evaluate(&pred, &gt, &pairs, "meters").unwrap();
        assert_eq!(report.registration_recall, 1.0);
        assert!(report.mean_rotation_deg < 1e-5);
        assert!(report.mean_translation < 1e-9);
        assert_eq!(report.rotation_ecdf, vec![1.0; 5]);
    }

    #[test]
    fn missing_frames_count_as_failures() {
        let mut rng = ChaCha8Rng::seed_from_u64(92);
        let gt: BTreeMap<FrameId, Pose> = (0..3).map(|i| (i, random_pose(&mut rng, 3.0))).collect();
        let mut pred = gt.clone();
        pred.remove(&2);
        let report = evaluate(&pred, &gt, &[(0, 1), (1, 2)], "meters").unwrap();
        assert_eq!(report.missing, vec![(1, 2)]);
        assert_eq!(report.registration_recall, 0.5);
        assert_eq!(report.translation_ecdf, vec![0.5; 5]);
        assert!(report.ecdf_table().contains("registration recall: 0.5000"));
    }

    proptest! {
        #[test]
        fn ecdf_matches_direct_count(seed in any::<u64>(), n in 1usize..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let errors: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut thresholds: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.2)).collect();
            thresholds.sort_by(f64::total_cmp);
            let got = ecdf(&errors, &thresholds);
            for (t, v) in thresholds.iter().zip(&got) {
                let count = errors.iter().filter(|e| *e <= t).count();
                prop_assert_eq!(*v, count as f64 / n as f64);
            }
            prop_assert!(got.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn rotation_error_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (random_rotation(&mut rng), random_rotation(&mut rng));
            prop_assert!((rotation_error(&a, &b) - rotation_error(&b, &a)).abs() < 1e-12);
        }

        #[test]
        fn rotation_error_recovers_angle(seed in any::<u64>(), theta in 0.0..PI) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = random_rotation(&mut rng);
            let axis = random_rotation(&mut rng) * Vector3::x();
            let e = rotation_error(&r, &(r * axis_angle(&axis, theta)));
            prop_assert!((e - theta).abs() < 1e-9, "{} vs {}", e, theta);
        }
    }
}
