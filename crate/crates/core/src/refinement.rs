//! Refinement of a frame's RANSAC transform by transformation averaging.
//!
//! Every merged frame that overlaps the incoming frame by more than the
//! configured ratio yields its own Procrustes estimate. Those estimates are
//! averaged: rotations by an iteratively reweighted mean in vectorized matrix
//! space, translations by a closed-form weighted least-squares solve.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{nearest_rotation, project_so3, vec, vec_inv, Point3, Pose};
use crate::model::{Frame, FrameId, MetaShape};
use crate::spatial::{mutual_nearest, KdTree};

/// Below this residual norm an observation is treated as an exact hit.
const EXACT_HIT: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinementConfig {
    /// Frames must overlap strictly more than this to contribute.
    pub overlap_threshold: f64,
    pub tau: f64,
    pub max_iterations: usize,
    pub epsilon: f64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            overlap_threshold: 0.30,
            tau: 0.07,
            max_iterations: 10,
            epsilon: 1e-3,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.overlap_threshold > 0.0 && self.tau > 0.0 && self.epsilon > 0.0) {
            return Err(Error::invalid("refinement thresholds must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("refinement needs at least one iteration"));
        }
        Ok(())
    }
}

/// One merged frame's estimate of the incoming frame's transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObservedTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// Overlap ratio that produced this observation.
    pub weight: f64,
}

impl ObservedTransform {
    pub fn from_pose(pose: &Pose, weight: f64) -> Self {
        Self {
            rotation: *pose.rotation(),
            translation: *pose.translation(),
            weight,
        }
    }
}

/// Symmetric fraction of points in `p_i` (mapped by `t`) and `p_j` whose
/// nearest neighbor in the other cloud lies strictly within `tau`.
pub fn overlap_ratio(p_i: &[Point3], p_j: &[Point3], t: &Pose, tau: f64) -> Result<f64> {
    if p_i.is_empty() || p_j.is_empty() {
        return Err(Error::invalid("overlap ratio needs two non-empty clouds"));
    }
    let moved: Vec<Point3> = p_i.iter().map(|p| t.apply(p)).collect();
    let tree_j = KdTree::new(p_j);
    let tree_i = KdTree::new(&moved);
    let close = |tree: &KdTree, q: &Point3| tree.nearest(q).is_some_and(|(_, d)| d < tau);
    let forward = moved.iter().filter(|p| close(&tree_j, p)).count();
    let backward = p_j.iter().filter(|q| close(&tree_i, q)).count();
    Ok((forward + backward) as f64 / (p_i.len() + p_j.len()) as f64)
}

/// Weighted least-squares rigid transform mapping each pair's first point onto
/// its second.
pub fn procrustes(pairs: &[(Point3, Point3)], weights: Option<&[f64]>) -> Result<Pose> {
    if pairs.len() < 3 {
        return Err(Error::DegenerateGeometry("procrustes needs at least 3 pairs"));
    }
    if let Some(w) = weights {
        if w.len() != pairs.len() {
            return Err(Error::CountMismatch {
                what: "pair/weight",
                left: pairs.len(),
                right: w.len(),
            });
        }
        if w.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
            return Err(Error::invalid("procrustes weights must be finite and non-negative"));
        }
    }
    let weight = |i: usize| weights.map_or(1.0, |w| w[i]);
    let total: f64 = (0..pairs.len()).map(weight).sum();
    if total <= 0.0 {
        return Err(Error::DegenerateGeometry("procrustes weights sum to zero"));
    }

    let mut src_mean = Point3::zeros();
    let mut dst_mean = Point3::zeros();
    for (i, (p, q)) in pairs.iter().enumerate() {
        src_mean += p * weight(i);
        dst_mean += q * weight(i);
    }
    src_mean /= total;
    dst_mean /= total;

    let mut cov = Matrix3::zeros();
    for (i, (p, q)) in pairs.iter().enumerate() {
        cov += (p - src_mean) * (q - dst_mean).transpose() * weight(i);
    }
    let svd = cov.svd(true, true);
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    if !(s[0] > 0.0) || s[1] <= 1e-10 * s[0] {
        return Err(Error::DegenerateGeometry("collinear or coincident correspondences"));
    }
    let u = svd.u.expect("svd computed with u");
    let v_t = svd.v_t.expect("svd computed with v_t");
    let mut v = v_t.transpose();
    if (v * u.transpose()).determinant() < 0.0 {
        let smallest = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(2);
        v.column_mut(smallest).neg_mut();
    }
    let rotation = nearest_rotation(&(v * u.transpose()));
    Ok(Pose::from_near_rotation(
        rotation,
        dst_mean - rotation * src_mean,
    ))
}

/// Single rotation averaging.
///
/// Starting from `r_init`, the estimate `s = vec(R)` is moved by the
/// weighted mean of unit residual directions toward each `vec(R̂ᵢ)`, with
/// weights `wᵢ / ‖vᵢ‖`, until the step is shorter than `cfg.epsilon` or
/// `cfg.max_iterations` is reached. The result is projected onto SO(3).
pub fn rotation_average(
    r_init: &Matrix3<f64>,
    observed: &[ObservedTransform],
    cfg: &RefinementConfig,
) -> Result<Matrix3<f64>> {
    if observed.is_empty() {
        return Err(Error::invalid("rotation averaging needs observations"));
    }
    if observed.iter().any(|o| !(o.weight > 0.0 && o.weight.is_finite())) {
        return Err(Error::invalid("observation weights must be positive"));
    }
    let targets: Vec<_> = observed.iter().map(|o| vec(&o.rotation)).collect();
    let mut s = vec(r_init);
    for _ in 0..cfg.max_iterations {
        let mut numerator = crate::geometry::Vec9::zeros();
        let mut denominator = 0.0;
        for (target, o) in targets.iter().zip(observed) {
            let v = target - s;
            let d = v.norm();
            if d < EXACT_HIT {
                return Ok(nearest_rotation(&o.rotation));
            }
            numerator += v * (o.weight / d);
            denominator += o.weight / d;
        }
        let s_pre = s;
        s = s_pre + numerator / denominator;
        if (s - s_pre).norm() < cfg.epsilon {
            break;
        }
    }
    project_so3(&vec_inv(&s))
}

/// Closed-form weighted least-squares translation given the averaged rotation:
/// `t̄ = (AᵀWA)⁻¹ AᵀWB` with blocks `Aᵢ = R̂ᵢR̄ᵀ`, `Bᵢ = t̂ᵢ`, `Wᵢ = wᵢI`.
pub fn translation_average(
    r_bar: &Matrix3<f64>,
    observed: &[ObservedTransform],
) -> Result<Vector3<f64>> {
    if observed.is_empty() {
        return Err(Error::invalid("translation averaging needs observations"));
    }
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for o in observed {
        let a = o.rotation * r_bar.transpose();
        ata += a.transpose() * a * o.weight;
        atb += a.transpose() * o.translation * o.weight;
    }
    let lu = ata.lu();
    if lu.determinant().abs() < 1e-12 {
        return Err(Error::SingularSystem);
    }
    lu.solve(&atb).ok_or(Error::SingularSystem)
}

/// Which path produced the refined transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinementBranch {
    /// No merged frame overlapped enough; the RANSAC transform is kept.
    Ransac,
    /// Exactly one observation; its Procrustes transform is used directly.
    Single,
    /// Two or more observations were averaged.
    Averaged,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Refinement {
    pub pose: Pose,
    pub branch: RefinementBranch,
    /// `(merged frame, overlap ratio)` for every accepted observation.
    pub observations: Vec<(FrameId, f64)>,
}

/// Refines `t_ransac` (frame → meta) against every merged frame.
pub fn refine_transform(
    meta: &MetaShape,
    frame: &Frame,
    t_ransac: &Pose,
    cfg: &RefinementConfig,
) -> Result<Refinement> {
    cfg.validate()?;
    let moved: Vec<Point3> = frame.keypoints().iter().map(|p| t_ransac.apply(p)).collect();
    let observations: Vec<(FrameId, ObservedTransform)> = meta
        .merged_ids
        .par_iter()
        .map(|id| -> Result<Option<(FrameId, ObservedTransform)>> {
            let cloud = &meta.frame_clouds[id];
            let overlap = overlap_ratio(frame.keypoints(), cloud, t_ransac, cfg.tau)?;
            if overlap <= cfg.overlap_threshold {
                return Ok(None);
            }
            let pairs: Vec<(Point3, Point3)> = mutual_nearest(&moved, cloud, cfg.tau)
                .into_iter()
                .map(|(i, j, _)| (frame.keypoints()[i], cloud[j]))
                .collect();
            match procrustes(&pairs, None) {
                Ok(pose) => Ok(Some((*id, ObservedTransform::from_pose(&pose, overlap)))),
                Err(e) => {
                    log::debug!("dropping observation from frame {id}: {e}");
                    Ok(None)
                }
            }
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let summary = observations.iter().map(|(id, o)| (*id, o.weight)).collect();
    let observed: Vec<ObservedTransform> = observations.iter().map(|(_, o)| *o).collect();
    let (pose, branch) = match observed.as_slice() {
        [] => (*t_ransac, RefinementBranch::Ransac),
        [single] => (
            Pose::from_near_rotation(single.rotation, single.translation),
            RefinementBranch::Single,
        ),
        _ => {
            let r_bar = rotation_average(t_ransac.rotation(), &observed, cfg)?;
            let t_bar = translation_average(&r_bar, &observed)?;
            (Pose::from_near_rotation(r_bar, t_bar), RefinementBranch::Averaged)
        }
    };
    Ok(Refinement {
        pose,
        branch,
        observations: summary,
    })
}
