//! The incremental registration loop.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::matching::{
    candidate_seed, match_descriptors, ransac_estimate, rerank_candidates, CandidateAttempt,
    PairwiseEstimate, RansacConfig,
};
use crate::meta_update::{merge, MergeMode};
use crate::model::{FeatureCloud, Frame, FrameId, MetaShape};
use crate::refinement::{refine_transform, RefinementBranch, RefinementConfig};
use crate::retrieval::{
    build_similarity, fuse_features, pool_global, select_seed, top_k_candidates_excluding,
    GlobalFeature,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Candidates passed from coarse retrieval to geometric reranking.
    pub top_k: usize,
    /// Inlier, overlap and redundancy distance, in scene units.
    pub tau: f64,
    pub overlap_threshold: f64,
    pub fusion_neighbors: usize,
    pub pooling_exponent: f64,
    pub ransac_iterations: usize,
    pub min_inliers: usize,
    /// Upper bound on descriptor correspondences per candidate.
    pub correspondence_cap: usize,
    pub rotation_iterations: usize,
    pub rotation_epsilon: f64,
    pub merge_mode: MergeMode,
    pub seed: u64,
    /// Consecutive retry passes without progress before frames are given up on.
    pub max_deferral_passes: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            top_k: 10,
            tau: 0.07,
            overlap_threshold: 0.30,
            fusion_neighbors: 3,
            pooling_exponent: 3.0,
            ransac_iterations: 5000,
            min_inliers: 15,
            correspondence_cap: 5000,
            rotation_iterations: 10,
            rotation_epsilon: 1e-3,
            merge_mode: MergeMode::Reservoir,
            seed: 0,
            max_deferral_passes: 3,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::invalid("top_k must be at least 1"));
        }
        if !(self.pooling_exponent.is_finite() && self.pooling_exponent > 0.0) {
            return Err(Error::invalid("pooling exponent must be positive"));
        }
        if self.correspondence_cap < 3 {
            return Err(Error::invalid("correspondence cap must be at least 3"));
        }
        self.ransac().validate()?;
        self.refinement().validate()
    }

    pub fn ransac(&self) -> RansacConfig {
        RansacConfig {
            iterations: self.ransac_iterations,
            tau: self.tau,
            min_inliers: self.min_inliers,
            seed: self.seed,
            ..RansacConfig::default()
        }
    }

    pub fn refinement(&self) -> RefinementConfig {
        RefinementConfig {
            overlap_threshold: self.overlap_threshold,
            tau: self.tau,
            max_iterations: self.rotation_iterations,
            epsilon: self.rotation_epsilon,
        }
    }
}

/// One successful merge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub frame: FrameId,
    pub inlier_count: usize,
    pub correspondences: usize,
    /// Merged frames whose overlap passed the threshold, with their overlap ratio.
    pub overlap_weights: Vec<(FrameId, f64)>,
    pub observation_count: usize,
    pub branch: RefinementBranch,
    pub candidates: Vec<CandidateAttempt>,
    pub meta_points: usize,
}

/// A rerank round in which every candidate failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deferral {
    pub pass: usize,
    pub candidates: Vec<CandidateAttempt>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SceneResult {
    pub seed_frame: FrameId,
    /// Absolute pose per registered frame: meta coordinates → frame coordinates.
    pub poses: BTreeMap<FrameId, Pose>,
    pub order: Vec<FrameId>,
    pub steps: Vec<StepDiagnostics>,
    pub deferrals: Vec<Deferral>,
    pub failed: Vec<FrameId>,
    #[serde(skip)]
    pub meta: MetaShape,
    /// Wall-clock seconds per merge step, kept out of the serialized result so
    /// reruns stay byte-identical.
    #[serde(skip)]
    pub step_seconds: Vec<f64>,
}

impl SceneResult {
    pub fn is_complete(&self) -> bool {
        self.failed.is_empty()
    }
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Pools and fuses one global feature per frame.
pub fn global_features(frames: &[Frame], cfg: &PipelineConfig) -> Result<Vec<GlobalFeature>> {
    let pooled = frames
        .iter()
        .map(|f| pool_global(f.descriptor_rows(), cfg.pooling_exponent))
        .collect::<Result<Vec<_>>>()?;
    fuse_features(&pooled, cfg.fusion_neighbors)
}

pub fn register_scene(frames: &[Frame], cfg: &PipelineConfig) -> Result<SceneResult> {
    register_scene_with_features(frames, None, cfg)
}

/// Like [`register_scene`], but uses externally computed global features
/// (one per frame, unfused) when given.
pub fn register_scene_with_features(
    frames: &[Frame],
    features: Option<&[GlobalFeature]>,
    cfg: &PipelineConfig,
) -> Result<SceneResult> {
    cfg.validate()?;
    if frames.len() < 2 {
        return Err(Error::invalid("need at least two frames"));
    }
    let mut index = BTreeMap::new();
    for (i, f) in frames.iter().enumerate() {
        if index.insert(f.id, i).is_some() {
            return Err(Error::invalid(format!("duplicate frame id {}", f.id)));
        }
        if f.dim() != frames[0].dim() {
            return Err(Error::CountMismatch {
                what: "descriptor dimension",
                left: frames[0].dim(),
                right: f.dim(),
            });
        }
    }

    let fused = match features {
        Some(given) => {
            if given.len() != frames.len() {
                return Err(Error::CountMismatch {
                    what: "global features",
                    left: frames.len(),
                    right: given.len(),
                });
            }
            fuse_features(given, cfg.fusion_neighbors)?
        }
        None => global_features(frames, cfg)?,
    };
    let mut sim = build_similarity(&fused)?;
    let seed_idx = select_seed(&sim)?;
    sim.update_meta_row(seed_idx)?;
    let seed_frame = &frames[seed_idx];
    log::info!("seed frame {}", seed_frame.id);

    let mut meta = MetaShape::from_seed(seed_frame);
    let mut transforms: BTreeMap<FrameId, Pose> = BTreeMap::new();
    transforms.insert(seed_frame.id, Pose::identity());
    let mut order = vec![seed_frame.id];
    let mut steps = Vec::new();
    let mut deferrals = Vec::new();
    let mut step_seconds = Vec::new();
    let mut failed = Vec::new();

    let refine_cfg = cfg.refinement();
    let mut deferred = vec![false; frames.len()];
    let mut pass = 0usize;
    let mut idle_passes = 0usize;
    let mut progressed = false;

    while sim.unmerged().next().is_some() {
        let candidates = top_k_candidates_excluding(&sim, cfg.top_k, &deferred);
        if candidates.is_empty() {
            idle_passes = if progressed { 0 } else { idle_passes + 1 };
            if idle_passes >= cfg.max_deferral_passes {
                failed.extend(sim.unmerged().map(|i| frames[i].id));
                for id in &failed {
                    log::warn!("frame {id} could not be registered");
                }
                break;
            }
            pass += 1;
            progressed = false;
            deferred.fill(false);
            log::debug!("retry pass {pass}");
            continue;
        }

        let started = Instant::now();
        let refs: Vec<&Frame> = candidates.iter().map(|&i| &frames[i]).collect();
        let mut ransac = cfg.ransac();
        ransac.seed = mix_seed(cfg.seed, pass as u64);
        let outcome = rerank_candidates(&meta, &refs, &ransac, cfg.correspondence_cap)?;
        let Some(best) = outcome.best else {
            log::debug!("deferring candidates {:?}", refs.iter().map(|f| f.id).collect::<Vec<_>>());
            for &i in &candidates {
                deferred[i] = true;
            }
            deferrals.push(Deferral {
                pass,
                candidates: outcome.attempts,
            });
            continue;
        };

        let id = best.candidate.expect("rerank tags the winning candidate");
        let idx = index[&id];
        let frame = &frames[idx];
        let t_ransac = best.transform.expect("rerank returns successful estimates");
        let refined = refine_transform(&meta, frame, &t_ransac, &refine_cfg)?;
        meta = merge(
            &meta,
            frame,
            &refined.pose,
            cfg.tau,
            cfg.merge_mode,
            mix_seed(cfg.seed, id as u64 ^ (1 << 63)),
        )?;
        sim.update_meta_row(idx)?;
        transforms.insert(id, refined.pose);
        order.push(id);
        progressed = true;

        let correspondences = outcome
            .attempts
            .iter()
            .find(|a| a.frame == id)
            .map_or(0, |a| a.correspondences);
        log::info!(
            "merged frame {id}: {} inliers, {} observations ({:?}), {} meta points",
            best.inlier_count,
            refined.observations.len(),
            refined.branch,
            meta.len()
        );
        steps.push(StepDiagnostics {
            frame: id,
            inlier_count: best.inlier_count,
            correspondences,
            observation_count: refined.observations.len(),
            overlap_weights: refined.observations,
            branch: refined.branch,
            candidates: outcome.attempts,
            meta_points: meta.len(),
        });
        step_seconds.push(started.elapsed().as_secs_f64());
    }

    let poses = transforms.iter().map(|(&id, t)| (id, t.inverse())).collect();
    failed.sort_unstable();
    Ok(SceneResult {
        seed_frame: seed_frame.id,
        poses,
        order,
        steps,
        deferrals,
        failed,
        meta,
        step_seconds,
    })
}

/// Direct two-frame estimate (`a` → `b`) without a meta-shape.
pub fn register_pair(a: &Frame, b: &Frame, cfg: &PipelineConfig) -> Result<PairwiseEstimate> {
    cfg.validate()?;
    let c = match_descriptors(a, b, cfg.correspondence_cap)?;
    let mut ransac = cfg.ransac();
    ransac.seed = candidate_seed(cfg.seed, a.id);
    let mut est = ransac_estimate(&c, &ransac)?;
    est.candidate = Some(a.id);
    Ok(est)
}
