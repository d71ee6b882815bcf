//! Merging a registered frame into the meta-shape.
//!
//! Frame points that land within `tau` of a meta point (as mutual nearest
//! neighbors) are redundant. In reservoir mode each redundant pair keeps
//! exactly one of its two points: the incoming one with probability
//! `1 / (coverage + 1)`. Since coverage counts every frame that has observed
//! the point, the survivor is uniform over all of them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, Pose};
use crate::model::{normalize, FeatureCloud, Frame, MetaPoint, MetaShape};
use crate::spatial::mutual_nearest;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    #[default]
    Reservoir,
    /// Append every frame point unconditionally.
    Concat,
    /// Coverage-weighted running mean of paired points.
    Mean,
}

impl std::str::FromStr for MergeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reservoir" => Ok(Self::Reservoir),
            "concat" => Ok(Self::Concat),
            "mean" => Ok(Self::Mean),
            other => Err(Error::invalid(format!(
                "unknown merge mode `{other}` (expected reservoir, concat or mean)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RedundantPair {
    pub meta_index: usize,
    pub frame_index: usize,
    pub distance: f64,
}

/// Mutual spatial nearest neighbors closer than `tau` between the meta-shape
/// and the frame mapped by `pose`, in ascending meta index.
pub fn find_redundant_pairs(
    meta: &MetaShape,
    frame: &Frame,
    pose: &Pose,
    tau: f64,
) -> Vec<RedundantPair> {
    let meta_pts: Vec<Point3> = meta.points.iter().map(|p| p.position).collect();
    let moved: Vec<Point3> = frame.keypoints().iter().map(|p| pose.apply(p)).collect();
    mutual_nearest(&meta_pts, &moved, tau)
        .into_iter()
        .map(|(meta_index, frame_index, distance)| RedundantPair {
            meta_index,
            frame_index,
            distance,
        })
        .collect()
}

/// Probability that an incoming point replaces a meta point observed by
/// `coverage` frames.
pub fn keep_new_probability(coverage: u32) -> Result<f64> {
    if coverage < 1 {
        return Err(Error::invalid("coverage must be at least 1"));
    }
    Ok(1.0 / (f64::from(coverage) + 1.0))
}

fn check_mergeable(meta: &MetaShape, frame: &Frame, tau: f64) -> Result<()> {
    if meta.contains(frame.id) {
        return Err(Error::AlreadyMerged(frame.id));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("redundancy threshold must be positive"));
    }
    if !meta.is_empty() && meta.dim() != frame.dim() {
        return Err(Error::CountMismatch {
            what: "descriptor dimension",
            left: meta.dim(),
            right: frame.dim(),
        });
    }
    Ok(())
}

fn frame_point(frame: &Frame, pose: &Pose, i: usize) -> MetaPoint {
    MetaPoint {
        position: pose.apply(&frame.keypoints()[i]),
        descriptor: frame.descriptor(i).to_vec(),
        coverage: 1,
        origin_frame: frame.id,
    }
}

fn append_unpaired(out: &mut MetaShape, frame: &Frame, pose: &Pose, paired: &[bool]) {
    for (i, &is_paired) in paired.iter().enumerate() {
        if !is_paired {
            out.points.push(frame_point(frame, pose, i));
        }
    }
}

/// Reservoir-sampling merge. One Bernoulli draw per redundant pair, consumed in
/// ascending meta index; the survivor's coverage becomes `c + 1` either way.
pub fn reservoir_merge(
    meta: &MetaShape,
    frame: &Frame,
    pose: &Pose,
    tau: f64,
    seed: u64,
) -> Result<MetaShape> {
    check_mergeable(meta, frame, tau)?;
    let pairs = find_redundant_pairs(meta, frame, pose, tau);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = meta.clone();
    let mut paired = vec![false; frame.len()];
    for pair in &pairs {
        paired[pair.frame_index] = true;
        let coverage = out.points[pair.meta_index].coverage;
        let take_new = rng.random_bool(keep_new_probability(coverage)?);
        let point = &mut out.points[pair.meta_index];
        if take_new {
            *point = frame_point(frame, pose, pair.frame_index);
        }
        point.coverage = coverage + 1;
    }
    append_unpaired(&mut out, frame, pose, &paired);
    out.record_frame(frame, pose);
    Ok(out)
}

/// Concatenation and mean merges.
pub fn alt_merge(
    meta: &MetaShape,
    frame: &Frame,
    pose: &Pose,
    tau: f64,
    mode: MergeMode,
) -> Result<MetaShape> {
    check_mergeable(meta, frame, tau)?;
    let mut out = meta.clone();
    match mode {
        MergeMode::Concat => {
            append_unpaired(&mut out, frame, pose, &vec![false; frame.len()]);
        }
        MergeMode::Mean => {
            let mut paired = vec![false; frame.len()];
            for pair in find_redundant_pairs(meta, frame, pose, tau) {
                paired[pair.frame_index] = true;
                let point = &mut out.points[pair.meta_index];
                let c = f64::from(point.coverage);
                let incoming = pose.apply(&frame.keypoints()[pair.frame_index]);
                point.position = (point.position * c + incoming) / (c + 1.0);
                for (d, x) in point.descriptor.iter_mut().zip(frame.descriptor(pair.frame_index)) {
                    *d = (*d * c + x) / (c + 1.0);
                }
                if !normalize(&mut point.descriptor) {
                    // Antipodal descriptors cancel; keep the incoming one.
                    point.descriptor = frame.descriptor(pair.frame_index).to_vec();
                }
                point.coverage += 1;
            }
            append_unpaired(&mut out, frame, pose, &paired);
        }
        MergeMode::Reservoir => {
            return Err(Error::invalid("reservoir merging goes through reservoir_merge"));
        }
    }
    out.record_frame(frame, pose);
    Ok(out)
}

/// Dispatches on `mode`; `seed` is only consumed by reservoir sampling.
pub fn merge(
    meta: &MetaShape,
    frame: &Frame,
    pose: &Pose,
    tau: f64,
    mode: MergeMode,
    seed: u64,
) -> Result<MetaShape> {
    match mode {
        MergeMode::Reservoir => reservoir_merge(meta, frame, pose, tau, seed),
        _ => alt_merge(meta, frame, pose, tau, mode),
    }
}
