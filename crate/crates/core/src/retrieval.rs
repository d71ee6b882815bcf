//! Coarse frame retrieval from global features.
//!
//! Each frame's local descriptors are pooled into one unit-norm global
//! feature, refined against its nearest neighbors, and compared pairwise into
//! a similarity matrix. During registration the meta-shape's similarity to
//! every frame is kept as a single row, updated by elementwise max as frames
//! are merged.

use crate::error::{Error, Result};
use crate::model::{l2, normalize, FrameId, UNIT_NORM_TOL};

/// Unit-norm global descriptor of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalFeature(Vec<f64>);

impl GlobalFeature {
    /// Normalizes `values`; fails on a zero or non-finite vector.
    pub fn from_unnormalized(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || !normalize(&mut values) {
            return Err(Error::invalid("global feature has zero norm"));
        }
        Ok(Self(values))
    }

    /// Accepts an already unit-norm vector.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let n = l2(&values);
        if values.is_empty() || (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::invalid(format!(
                "global feature norm {n} is not unit"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    fn dot(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    fn distance(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

fn signed_pow(x: f64, p: f64) -> f64 {
    x.signum() * x.abs().powf(p)
}

/// Generalized-mean pooling with signed powers, then L2 normalization.
pub fn pool_global<'a, I>(descriptors: I, exponent: f64) -> Result<GlobalFeature>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    if !(exponent > 0.0 && exponent.is_finite()) {
        return Err(Error::invalid(format!("pooling exponent {exponent} must be positive")));
    }
    let mut acc: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for d in descriptors {
        if acc.is_empty() {
            acc = vec![0.0; d.len()];
        } else if d.len() != acc.len() {
            return Err(Error::CountMismatch {
                what: "descriptor dimension",
                left: acc.len(),
                right: d.len(),
            });
        }
        for (a, &x) in acc.iter_mut().zip(d) {
            *a += signed_pow(x, exponent);
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("cannot pool an empty descriptor set"));
    }
    let inv = 1.0 / exponent;
    let pooled = acc
        .into_iter()
        .map(|s| signed_pow(s / count as f64, inv))
        .collect();
    GlobalFeature::from_unnormalized(pooled)
}

/// Neighbor weight: the dot product clamped at zero.
fn fusion_weight(dot: f64) -> f64 {
    dot.max(0.0)
}

/// Indices of the `m` nearest features to `i` by L2 distance, excluding `i`;
/// ties go to the lower index.
fn nearest_features(features: &[GlobalFeature], i: usize, m: usize) -> Vec<usize> {
    let mut others: Vec<(f64, usize)> = features
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(j, g)| (features[i].distance(g), j))
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    others.into_iter().take(m).map(|(_, j)| j).collect()
}

/// Refines each feature with a similarity-weighted sum of its `m` nearest
/// neighbors. Every output is computed from the original inputs and
/// re-normalized; `m` is clamped to `N − 1`.
pub fn fuse_features(features: &[GlobalFeature], m: usize) -> Result<Vec<GlobalFeature>> {
    if features.is_empty() {
        return Err(Error::invalid("no features to fuse"));
    }
    let dim = features[0].dim();
    if let Some(bad) = features.iter().find(|g| g.dim() != dim) {
        return Err(Error::CountMismatch {
            what: "global feature dimension",
            left: dim,
            right: bad.dim(),
        });
    }
    let m = m.min(features.len() - 1);
    if m == 0 {
        return Ok(features.to_vec());
    }
    features
        .iter()
        .enumerate()
        .map(|(i, gi)| {
            let mut numerator = gi.0.clone();
            let mut denominator = 1.0;
            for j in nearest_features(features, i, m) {
                let w = fusion_weight(features[j].dot(gi));
                denominator += w;
                for (n, x) in numerator.iter_mut().zip(&features[j].0) {
                    *n += w * x;
                }
            }
            numerator.iter_mut().for_each(|n| *n /= denominator);
            GlobalFeature::from_unnormalized(numerator)
        })
        .collect()
}

/// Pairwise frame similarities plus the meta-shape's row.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityState {
    n: usize,
    matrix: Vec<f64>,
    meta_row: Vec<f64>,
    merged: Vec<bool>,
}

impl SimilarityState {
    /// Builds a state from a raw square matrix (row-major).
    pub fn from_matrix(n: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != n * n {
            return Err(Error::CountMismatch {
                what: "similarity matrix entries",
                left: n * n,
                right: matrix.len(),
            });
        }
        Ok(Self {
            n,
            matrix,
            meta_row: vec![0.0; n],
            merged: vec![false; n],
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.n..(i + 1) * self.n]
    }

    pub fn meta_row(&self) -> &[f64] {
        &self.meta_row
    }

    pub fn is_merged(&self, i: usize) -> bool {
        self.merged[i]
    }

    pub fn unmerged(&self) -> impl Iterator<Item = FrameId> + '_ {
        (0..self.n).filter(|&i| !self.merged[i])
    }

    /// Folds `selected`'s row into the meta row by elementwise max, marks it
    /// merged, and zeroes every merged entry.
    pub fn update_meta_row(&mut self, selected: FrameId) -> Result<()> {
        if selected >= self.n {
            return Err(Error::invalid(format!("frame {selected} out of range")));
        }
        if self.merged[selected] {
            return Err(Error::AlreadyMerged(selected));
        }
        self.merged[selected] = true;
        for j in 0..self.n {
            self.meta_row[j] = if self.merged[j] {
                0.0
            } else {
                self.meta_row[j].max(self.matrix[selected * self.n + j])
            };
        }
        Ok(())
    }
}

/// `s_ij = (2 − ‖g_i − g_j‖) / 2`, clamped to `[0, 1]` against rounding.
pub fn build_similarity(features: &[GlobalFeature]) -> Result<SimilarityState> {
    let n = features.len();
    if let Some(first) = features.first() {
        if let Some(bad) = features.iter().find(|g| g.dim() != first.dim()) {
            return Err(Error::CountMismatch {
                what: "global feature dimension",
                left: first.dim(),
                right: bad.dim(),
            });
        }
    }
    let mut matrix = vec![0.0; n * n];
    for i in 0..n {
        matrix[i * n + i] = 1.0;
        for j in i + 1..n {
            let s = ((2.0 - features[i].distance(&features[j])) / 2.0).clamp(0.0, 1.0);
            matrix[i * n + j] = s;
            matrix[j * n + i] = s;
        }
    }
    SimilarityState::from_matrix(n, matrix)
}

/// The frame with the largest row sum; lowest index on ties.
pub fn select_seed(sim: &SimilarityState) -> Result<FrameId> {
    if sim.is_empty() {
        return Err(Error::invalid("no frames to seed from"));
    }
    let mut best = (f64::NEG_INFINITY, 0);
    for i in 0..sim.len() {
        let sum: f64 = sim.row(i).iter().sum();
        if sum > best.0 {
            best = (sum, i);
        }
    }
    Ok(best.1)
}

/// Up to `k` unmerged frames ordered by meta-row score, highest first.
pub fn top_k_candidates(sim: &SimilarityState, k: usize) -> Vec<FrameId> {
    top_k_candidates_excluding(sim, k, &[])
}

/// [`top_k_candidates`] skipping frames flagged in `excluded`.
pub fn top_k_candidates_excluding(
    sim: &SimilarityState,
    k: usize,
    excluded: &[bool],
) -> Vec<FrameId> {
    let mut ids: Vec<FrameId> = sim
        .unmerged()
        .filter(|&i| !excluded.get(i).copied().unwrap_or(false))
        .collect();
    ids.sort_by(|&a, &b| sim.meta_row[b].total_cmp(&sim.meta_row[a]).then(a.cmp(&b)));
    ids.truncate(k);
    ids
}
