//! Scans and the growing meta-shape they are merged into.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::{Point3, Pose};

pub type FrameId = usize;

/// Descriptor norms must lie within this distance of 1.
pub const UNIT_NORM_TOL: f64 = 1e-5;

/// Keypoints with one descriptor each. Shared view over frames and meta-shapes
/// used by descriptor matching.
pub trait FeatureCloud {
    fn len(&self) -> usize;
    fn dim(&self) -> usize;
    fn position(&self, i: usize) -> &Point3;
    fn descriptor(&self, i: usize) -> &[f64];

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One scan: keypoints in frame-local coordinates with unit-norm descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub id: FrameId,
    keypoints: Vec<Point3>,
    descriptors: Vec<f64>,
    dim: usize,
    /// Ground-truth absolute pose (world → frame-local), when known.
    pub gt_pose: Option<Pose>,
}

impl Frame {
    /// `descriptors` is row-major, `keypoints.len() × dim`.
    pub fn new(
        id: FrameId,
        keypoints: Vec<Point3>,
        descriptors: Vec<f64>,
        dim: usize,
        gt_pose: Option<Pose>,
    ) -> Result<Self> {
        if keypoints.is_empty() {
            return Err(Error::invalid(format!("frame {id} has no keypoints")));
        }
        if dim == 0 {
            return Err(Error::invalid("descriptor dimension must be positive"));
        }
        if descriptors.len() != keypoints.len() * dim {
            return Err(Error::CountMismatch {
                what: "keypoint/descriptor",
                left: keypoints.len(),
                right: descriptors.len() / dim,
            });
        }
        if keypoints.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::invalid(format!("frame {id} has non-finite keypoints")));
        }
        for (i, d) in descriptors.chunks_exact(dim).enumerate() {
            let norm = l2(d);
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::invalid(format!(
                    "frame {id} descriptor {i} has norm {norm}, expected unit norm"
                )));
            }
        }
        Ok(Self {
            id,
            keypoints,
            descriptors,
            dim,
            gt_pose,
        })
    }

    /// Like [`Frame::new`] but L2-normalizes descriptors first.
    pub fn with_normalized_descriptors(
        id: FrameId,
        keypoints: Vec<Point3>,
        mut descriptors: Vec<f64>,
        dim: usize,
        gt_pose: Option<Pose>,
    ) -> Result<Self> {
        if dim > 0 {
            for (i, d) in descriptors.chunks_exact_mut(dim).enumerate() {
                if !normalize(d) {
                    return Err(Error::invalid(format!(
                        "frame {id} descriptor {i} has zero norm"
                    )));
                }
            }
        }
        Self::new(id, keypoints, descriptors, dim, gt_pose)
    }

    pub fn keypoints(&self) -> &[Point3] {
        &self.keypoints
    }

    pub fn descriptors(&self) -> &[f64] {
        &self.descriptors
    }

    pub fn descriptor_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.descriptors.chunks_exact(self.dim)
    }
}

impl FeatureCloud for Frame {
    fn len(&self) -> usize {
        self.keypoints.len()
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn position(&self, i: usize) -> &Point3 {
        &self.keypoints[i]
    }
    fn descriptor(&self, i: usize) -> &[f64] {
        &self.descriptors[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaPoint {
    pub position: Point3,
    pub descriptor: Vec<f64>,
    /// Number of frames that have observed this point.
    pub coverage: u32,
    pub origin_frame: FrameId,
}

/// The registered model: sampled meta-points plus per-frame placement.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetaShape {
    pub points: Vec<MetaPoint>,
    /// frame-local → meta coordinates.
    pub frame_poses: BTreeMap<FrameId, Pose>,
    pub merged_ids: Vec<FrameId>,
    /// Full keypoint set of every merged frame, in meta coordinates. Sampling
    /// never touches these; overlap estimation runs against them.
    pub frame_clouds: BTreeMap<FrameId, Vec<Point3>>,
    dim: usize,
}

impl MetaShape {
    /// Meta-shape consisting of `seed` alone, at the identity pose.
    pub fn from_seed(seed: &Frame) -> Self {
        let points = seed
            .keypoints()
            .iter()
            .zip(seed.descriptor_rows())
            .map(|(p, d)| MetaPoint {
                position: *p,
                descriptor: d.to_vec(),
                coverage: 1,
                origin_frame: seed.id,
            })
            .collect();
        Self {
            points,
            frame_poses: BTreeMap::from([(seed.id, Pose::identity())]),
            merged_ids: vec![seed.id],
            frame_clouds: BTreeMap::from([(seed.id, seed.keypoints().to_vec())]),
            dim: seed.dim,
        }
    }

    pub fn contains(&self, id: FrameId) -> bool {
        self.frame_poses.contains_key(&id)
    }

    pub fn total_coverage(&self) -> u64 {
        self.points.iter().map(|p| u64::from(p.coverage)).sum()
    }

    /// Records a merged frame's pose and its transformed keypoints.
    pub(crate) fn record_frame(&mut self, frame: &Frame, pose: &Pose) {
        self.frame_poses.insert(frame.id, *pose);
        self.merged_ids.push(frame.id);
        self.frame_clouds
            .insert(frame.id, frame.keypoints().iter().map(|p| pose.apply(p)).collect());
    }

    /// Checks the structural invariants; used by tests and debug assertions.
    pub fn check_invariants(&self) -> Result<()> {
        if self.frame_poses.len() != self.merged_ids.len() {
            return Err(Error::invalid("frame_poses and merged_ids disagree"));
        }
        for id in &self.merged_ids {
            if !self.frame_poses.contains_key(id) {
                return Err(Error::invalid(format!("merged frame {id} has no pose")));
            }
        }
        if let Some(seed) = self.merged_ids.first() {
            if self.frame_poses[seed] != Pose::identity() {
                return Err(Error::invalid("seed pose is not the identity"));
            }
        }
        for (i, p) in self.points.iter().enumerate() {
            if p.coverage < 1 {
                return Err(Error::invalid(format!("meta point {i} has zero coverage")));
            }
            if !self.contains(p.origin_frame) {
                return Err(Error::invalid(format!(
                    "meta point {i} originates from unmerged frame {}",
                    p.origin_frame
                )));
            }
        }
        Ok(())
    }
}

impl FeatureCloud for MetaShape {
    fn len(&self) -> usize {
        self.points.len()
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn position(&self, i: usize) -> &Point3 {
        &self.points[i].position
    }
    fn descriptor(&self, i: usize) -> &[f64] {
        &self.points[i].descriptor
    }
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Normalizes in place; returns false for a zero vector.
pub(crate) fn normalize(v: &mut [f64]) -> bool {
    let n = l2(v);
    if n <= f64::MIN_POSITIVE || !n.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}
