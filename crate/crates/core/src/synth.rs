//! Seeded synthetic scenes with ground truth.
//!
//! The room scene is a floor, four walls and box clutter, sampled on a
//! jittered grid. Frames are overlapping slabs along the room's long axis,
//! each seen from a random rigid pose. Descriptors hash the quantized world
//! position, so a world point looks alike in every frame that sees it.

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{random_rotation, Point3, Pose};
use crate::model::{normalize, Frame, FrameId};
use crate::pipeline::mix_seed;
use crate::refinement::overlap_ratio;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub frame_count: usize,
    /// Target keypoints per frame; sets the sampling grid spacing.
    pub points_per_frame: usize,
    /// Shared fraction of each slab with the next one; `frame_count - 1`
    /// entries, or empty for `default_overlap` everywhere.
    pub overlap_schedule: Vec<f64>,
    pub default_overlap: f64,
    pub keypoint_noise: f64,
    pub descriptor_dim: usize,
    pub descriptor_noise: f64,
    pub outlier_fraction: f64,
    /// Room length, width, height.
    pub extent: [f64; 3],
    pub clutter_boxes: usize,
    /// Probability that a point inside a slab is observed by that frame.
    pub visibility: f64,
    /// Distance threshold; descriptors are hashed on a `2 * tau` grid.
    pub tau: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            frame_count: 8,
            points_per_frame: 600,
            overlap_schedule: Vec::new(),
            default_overlap: 0.5,
            keypoint_noise: 0.01,
            descriptor_dim: 32,
            descriptor_noise: 0.05,
            outlier_fraction: 0.1,
            extent: [8.0, 3.0, 2.5],
            clutter_boxes: 8,
            visibility: 0.9,
            tau: 0.07,
        }
    }
}

impl SynthConfig {
    pub fn schedule(&self) -> Result<Vec<f64>> {
        if self.frame_count == 0 {
            return Err(Error::invalid("frame_count must be at least 1"));
        }
        let schedule = if self.overlap_schedule.is_empty() {
            vec![self.default_overlap; self.frame_count - 1]
        } else {
            self.overlap_schedule.clone()
        };
        if schedule.len() != self.frame_count - 1 {
            return Err(Error::invalid(format!(
                "overlap schedule has {} entries, expected {}",
                schedule.len(),
                self.frame_count - 1
            )));
        }
        if let Some(f) = schedule.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::invalid(format!("overlap fraction {f} outside (0, 1]")));
        }
        Ok(schedule)
    }

    fn validate(&self) -> Result<()> {
        self.schedule()?;
        let nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !(nonneg(self.keypoint_noise) && nonneg(self.descriptor_noise)) {
            return Err(Error::invalid("noise levels must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return Err(Error::invalid("outlier fraction must lie in [0, 1]"));
        }
        if !(self.visibility > 0.0 && self.visibility <= 1.0) {
            return Err(Error::invalid("visibility must lie in (0, 1]"));
        }
        if self.extent.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(Error::invalid("scene extent must be positive"));
        }
        if self.descriptor_dim == 0 || self.points_per_frame == 0 {
            return Err(Error::invalid("descriptor_dim and points_per_frame must be positive"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid("tau must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapEdge {
    pub a: FrameId,
    pub b: FrameId,
    pub ratio: f64,
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    /// Frames carry their world → frame ground-truth pose.
    pub frames: Vec<Frame>,
    /// Overlap ratio under ground truth for every unordered pair.
    pub overlaps: Vec<OverlapEdge>,
    /// World x-range seen by each frame.
    pub slabs: Vec<(f64, f64)>,
    pub world_points: usize,
}

impl SyntheticScene {
    pub fn gt_poses(&self) -> BTreeMap<FrameId, Pose> {
        self.frames
            .iter()
            .filter_map(|f| f.gt_pose.map(|p| (f.id, p)))
            .collect()
    }

    /// Pairs whose ground-truth overlap exceeds `min_ratio`.
    pub fn pairs_above(&self, min_ratio: f64) -> Vec<(FrameId, FrameId)> {
        self.overlaps
            .iter()
            .filter(|e| e.ratio > min_ratio)
            .map(|e| (e.a, e.b))
            .collect()
    }

    /// World x-intervals seen by more than one frame.
    pub fn shared_intervals(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for (i, a) in self.slabs.iter().enumerate() {
            for b in &self.slabs[i + 1..] {
                let (lo, hi) = (a.0.max(b.0), a.1.min(b.1));
                if hi > lo {
                    out.push((lo, hi));
                }
            }
        }
        out
    }
}

/// Axis-aligned rectangle at `value` along `axis`.
struct Face {
    axis: usize,
    value: f64,
    lo: [f64; 2],
    hi: [f64; 2],
}

impl Face {
    fn area(&self) -> f64 {
        (self.hi[0] - self.lo[0]) * (self.hi[1] - self.lo[1])
    }

    fn sample(&self, spacing: f64, rng: &mut ChaCha8Rng, out: &mut Vec<Point3>) {
        let (u, v) = match self.axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let nu = ((self.hi[0] - self.lo[0]) / spacing).floor().max(1.0) as usize;
        let nv = ((self.hi[1] - self.lo[1]) / spacing).floor().max(1.0) as usize;
        let su = (self.hi[0] - self.lo[0]) / nu as f64;
        let sv = (self.hi[1] - self.lo[1]) / nv as f64;
        for i in 0..nu {
            for j in 0..nv {
                let mut p = Point3::zeros();
                p[self.axis] = self.value;
                p[u] = self.lo[0] + (i as f64 + 0.5 + rng.random_range(-0.2..0.2)) * su;
                p[v] = self.lo[1] + (j as f64 + 0.5 + rng.random_range(-0.2..0.2)) * sv;
                out.push(p);
            }
        }
    }
}

fn box_faces(min: Point3, max: Point3) -> Vec<Face> {
    let mut faces = vec![Face {
        axis: 2,
        value: max.z,
        lo: [min.x, min.y],
        hi: [max.x, max.y],
    }];
    for (axis, lo, hi) in [(0, [min.y, min.z], [max.y, max.z]), (1, [min.x, min.z], [max.x, max.z])] {
        for value in [min[axis], max[axis]] {
            faces.push(Face { axis, value, lo, hi });
        }
    }
    faces
}

fn cell_of(p: &Point3, cell: f64) -> [i64; 3] {
    [0, 1, 2].map(|k| (p[k] / cell).floor() as i64)
}

/// Unit descriptor determined by the quantized world position.
pub fn hashed_descriptor(p: &Point3, cell: f64, dim: usize, seed: u64) -> Vec<f64> {
    let key = cell_of(p, cell)
        .iter()
        .fold(mix_seed(seed, 0x5EED), |h, &c| mix_seed(h, c as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let mut d: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    normalize(&mut d);
    d
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let mut d: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if normalize(&mut d) {
            return d;
        }
    }
}

/// Drops points whose descriptor cell is already taken, so every surviving
/// world point has a distinct descriptor.
fn dedup_cells(points: Vec<Point3>, cell: f64) -> Vec<Point3> {
    let mut seen = HashSet::new();
    points.into_iter().filter(|p| seen.insert(cell_of(p, cell))).collect()
}

struct Observer<'a> {
    cfg: &'a SynthConfig,
    noise: Normal<f64>,
    desc_noise: Normal<f64>,
}

impl<'a> Observer<'a> {
    fn new(cfg: &'a SynthConfig) -> Result<Self> {
        let normal = |s: f64| Normal::new(0.0, s).map_err(|e| Error::invalid(e.to_string()));
        Ok(Self {
            cfg,
            noise: normal(cfg.keypoint_noise)?,
            desc_noise: normal(cfg.descriptor_noise)?,
        })
    }

    /// Expresses `world` in a new frame with a random pose and noisy observations.
    fn observe(
        &self,
        id: FrameId,
        world: &[Point3],
        center: Point3,
        rng: &mut ChaCha8Rng,
    ) -> Result<Frame> {
        let cfg = self.cfg;
        let rotation = random_rotation(rng);
        let jitter = Point3::new(
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        );
        let gt = Pose::new(rotation, -(rotation * center) + jitter)?;
        let mut keypoints = Vec::with_capacity(world.len());
        let mut descriptors = Vec::with_capacity(world.len() * cfg.descriptor_dim);
        for p in world {
            let noise = Point3::new(
                self.noise.sample(rng),
                self.noise.sample(rng),
                self.noise.sample(rng),
            );
            keypoints.push(gt.apply(p) + noise);
            let d = if rng.random_bool(cfg.outlier_fraction) {
                random_unit(rng, cfg.descriptor_dim)
            } else {
                let mut d = hashed_descriptor(p, 2.0 * cfg.tau, cfg.descriptor_dim, cfg.seed);
                for x in d.iter_mut() {
                    *x += self.desc_noise.sample(rng);
                }
                if !normalize(&mut d) {
                    d = random_unit(rng, cfg.descriptor_dim);
                }
                d
            };
            descriptors.extend(d);
        }
        Frame::new(id, keypoints, descriptors, cfg.descriptor_dim, Some(gt))
    }
}

fn overlap_graph(frames: &[Frame], tau: f64) -> Result<Vec<OverlapEdge>> {
    let mut edges = Vec::new();
    for (i, a) in frames.iter().enumerate() {
        for b in &frames[i + 1..] {
            let (ga, gb) = (a.gt_pose.unwrap(), b.gt_pose.unwrap());
            let a_to_b = gb.compose(&ga.inverse());
            edges.push(OverlapEdge {
                a: a.id,
                b: b.id,
                ratio: overlap_ratio(a.keypoints(), b.keypoints(), &a_to_b, tau)?,
            });
        }
    }
    Ok(edges)
}

/// Slab `[start, start + width]` per frame for the given schedule.
pub fn slab_layout(length: f64, schedule: &[f64]) -> Vec<(f64, f64)> {
    let width = length / (1.0 + schedule.iter().map(|f| 1.0 - f).sum::<f64>());
    let mut start = 0.0;
    let mut slabs = vec![(0.0, width)];
    for f in schedule {
        start += width * (1.0 - f);
        slabs.push((start, start + width));
    }
    slabs
}

/// The room scene.
pub fn generate_scene(cfg: &SynthConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let schedule = cfg.schedule()?;
    let [length, width, height] = cfg.extent;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut boxes = Vec::with_capacity(cfg.clutter_boxes);
    for _ in 0..cfg.clutter_boxes {
        let size = Point3::new(
            rng.random_range(0.3..0.9f64).min(length),
            rng.random_range(0.3..0.9f64).min(width),
            rng.random_range(0.3..1.2f64).min(height),
        );
        let min = Point3::new(
            rng.random_range(0.0..=length - size.x),
            rng.random_range(0.0..=width - size.y),
            0.0,
        );
        boxes.push((min, min + size));
    }

    let mut faces = vec![
        Face { axis: 2, value: 0.0, lo: [0.0, 0.0], hi: [length, width] },
        Face { axis: 1, value: 0.0, lo: [0.0, 0.0], hi: [length, height] },
        Face { axis: 1, value: width, lo: [0.0, 0.0], hi: [length, height] },
        Face { axis: 0, value: 0.0, lo: [0.0, 0.0], hi: [width, height] },
        Face { axis: 0, value: length, lo: [0.0, 0.0], hi: [width, height] },
    ];
    for (min, max) in &boxes {
        faces.extend(box_faces(*min, *max));
    }

    let slabs = slab_layout(length, &schedule);
    let slab_width = slabs[0].1 - slabs[0].0;
    let total_area: f64 = faces.iter().map(Face::area).sum();
    let expected_area = total_area * slab_width / length * cfg.visibility;
    let cell = 2.0 * cfg.tau;
    let spacing = (expected_area / cfg.points_per_frame as f64).sqrt().max(cell);

    let mut world = Vec::new();
    for face in &faces {
        face.sample(spacing, &mut rng, &mut world);
    }
    let inside_box = |p: &Point3| {
        boxes.iter().any(|(min, max)| {
            (0..3).all(|k| p[k] > min[k] - 1e-9 && p[k] < max[k] + 1e-9)
                && !box_faces(*min, *max)
                    .iter()
                    .any(|f| (p[f.axis] - f.value).abs() < 1e-12)
        })
    };
    // Floor under a box and faces buried in other boxes are never visible.
    world.retain(|p| !inside_box(p) && !(p.z == 0.0 && boxes.iter().any(|(a, b)| p.x > a.x && p.x < b.x && p.y > a.y && p.y < b.y)));
    let world = dedup_cells(world, cell);

    let observer = Observer::new(cfg)?;
    let mut frames = Vec::with_capacity(cfg.frame_count);
    for (id, &(lo, hi)) in slabs.iter().enumerate() {
        let seen: Vec<Point3> = world
            .iter()
            .filter(|p| p.x >= lo && p.x <= hi)
            .filter(|_| rng.random_bool(cfg.visibility))
            .copied()
            .collect();
        if seen.len() < 3 {
            return Err(Error::invalid(format!("frame {id} sees fewer than 3 points")));
        }
        let center = Point3::new((lo + hi) / 2.0, width / 2.0, height / 2.0);
        frames.push(observer.observe(id, &seen, center, &mut rng)?);
    }
    let overlaps = overlap_graph(&frames, cfg.tau)?;
    Ok(SyntheticScene {
        frames,
        overlaps,
        slabs,
        world_points: world.len(),
    })
}

/// Three frames along an aisle. Frames 0 and 2 both see a cluttered shelf;
/// frame 1 sees only a sparse wall, of which frames 0 and 2 each catch a
/// different handful of points. Neither outer frame shares enough with the
/// wall frame on its own, but their union does.
pub fn generate_aisle(seed: u64) -> Result<SyntheticScene> {
    let cfg = SynthConfig {
        seed,
        outlier_fraction: 0.0,
        ..SynthConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = 2.0 * cfg.tau;

    let mut shelf = Vec::new();
    let shelves = [
        (Point3::new(0.0, 0.0, 0.0), Point3::new(0.8, 0.6, 1.2)),
        (Point3::new(0.9, 0.1, 0.0), Point3::new(1.5, 0.7, 0.7)),
        (Point3::new(1.6, 0.0, 0.0), Point3::new(2.4, 0.5, 1.5)),
    ];
    for (min, max) in shelves {
        for face in box_faces(min, max) {
            face.sample(0.16, &mut rng, &mut shelf);
        }
    }
    let shelf = dedup_cells(shelf, cell);

    let mut wall = Vec::new();
    Face { axis: 1, value: 3.0, lo: [0.0, 0.0], hi: [3.0, 2.1] }.sample(0.3, &mut rng, &mut wall);
    let wall = dedup_cells(wall, cell);

    // Two disjoint handfuls of wall points, each below the inlier floor.
    let mut picks: Vec<usize> = (0..wall.len()).collect();
    for i in 0..20 {
        let j = rng.random_range(i..picks.len());
        picks.swap(i, j);
    }
    let glimpse = |range: std::ops::Range<usize>| picks[range].iter().map(|&i| wall[i]);

    let first: Vec<Point3> = shelf.iter().copied().chain(glimpse(0..10)).collect();
    let third: Vec<Point3> = shelf.iter().copied().chain(glimpse(10..20)).collect();

    let observer = Observer::new(&cfg)?;
    let frames = vec![
        observer.observe(0, &first, Point3::new(1.2, 0.5, 0.7), &mut rng)?,
        observer.observe(1, &wall, Point3::new(1.5, 3.0, 1.0), &mut rng)?,
        observer.observe(2, &third, Point3::new(1.2, 0.5, 0.7), &mut rng)?,
    ];
    let overlaps = overlap_graph(&frames, cfg.tau)?;
    Ok(SyntheticScene {
        frames,
        overlaps,
        slabs: Vec::new(),
        world_points: shelf.len() + wall.len(),
    })
}
