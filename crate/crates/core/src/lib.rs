//! Incremental multiview point cloud registration.
//!
//! Frames are merged one at a time into a growing meta-shape. The next frame
//! is chosen in two stages: a coarse ranking from global-feature similarity,
//! then geometric reranking by RANSAC inlier count. The winning transform is
//! refined by overlap-weighted rotation and translation averaging over every
//! merged frame it overlaps. Redundant points are then resolved with
//! reservoir sampling so overlapping regions stay uniformly sampled.

pub mod error;
pub mod geometry;
pub mod io;
pub mod matching;
pub mod meta_update;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod refinement;
pub mod retrieval;
pub mod spatial;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::{Point3, Pose};
pub use model::{FeatureCloud, Frame, FrameId, MetaPoint, MetaShape};
