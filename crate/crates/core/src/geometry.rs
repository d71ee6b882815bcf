//! Rigid-motion algebra on 3×3 rotation matrices.
//!
//! Rotations are stored as full matrices rather than quaternions because the
//! rotation averaging loop works directly on their column-stacked vectors.

use nalgebra::{Matrix3, Matrix4, Quaternion, SVector, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;
pub type Vec9 = SVector<f64, 9>;

/// Rigid transform `p ↦ R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, projecting `rotation` onto SO(3).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite translation"));
        }
        Ok(Self {
            rotation: project_so3(&rotation)?,
            translation,
        })
    }

    /// Internal constructor for matrices already known to be close to SO(3).
    pub(crate) fn from_near_rotation(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: nearest_rotation(&rotation),
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::from_near_rotation(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose::from_near_rotation(rt, -(rt * self.translation))
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// The 4×4 homogeneous matrix in row-major order.
    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.to_matrix4();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major(values: &[f64; 16]) -> Result<Pose> {
        let bottom = &values[12..16];
        let tol = 1e-9;
        if bottom[0].abs() > tol
            || bottom[1].abs() > tol
            || bottom[2].abs() > tol
            || (bottom[3] - 1.0).abs() > tol
        {
            return Err(Error::invalid(format!(
                "pose bottom row must be 0 0 0 1, got {bottom:?}"
            )));
        }
        let rotation = Matrix3::new(
            values[0], values[1], values[2], values[4], values[5], values[6], values[8],
            values[9], values[10],
        );
        Pose::new(rotation, Vector3::new(values[3], values[7], values[11]))
    }
}

/// `a ∘ b`, mapping `p ↦ a(b(p))`.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn invert(t: &Pose) -> Pose {
    t.inverse()
}

impl Serialize for Pose {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_row_major().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let values = <[f64; 16]>::deserialize(deserializer)?;
        Pose::from_row_major(&values).map_err(serde::de::Error::custom)
    }
}

/// Column-stacking vectorization.
pub fn vec(m: &Matrix3<f64>) -> Vec9 {
    // nalgebra storage is column-major, so the raw slice is already vec(m).
    Vec9::from_column_slice(m.as_slice())
}

pub fn vec_inv(v: &Vec9) -> Matrix3<f64> {
    Matrix3::from_column_slice(v.as_slice())
}

/// Nearest rotation to `m` in Frobenius norm.
///
/// Fails when `m` has two vanishing singular values, in which case the
/// nearest rotation is not unique.
pub fn project_so3(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("non-finite matrix"));
    }
    let svd = m.svd(false, false);
    let mut s = [
        svd.singular_values[0],
        svd.singular_values[1],
        svd.singular_values[2],
    ];
    s.sort_by(|a, b| b.total_cmp(a));
    if s[0] <= f64::MIN_POSITIVE || s[1] <= 1e-12 * s[0] {
        return Err(Error::DegenerateRotation(s));
    }
    Ok(nearest_rotation(m))
}

/// `U diag(1, 1, ±1) Vᵀ`, flipping the direction of the smallest singular value
/// when needed so the determinant is +1.
pub(crate) fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let mut u = svd.u.expect("svd computed with u");
    let v_t = svd.v_t.expect("svd computed with v_t");
    if (u * v_t).determinant() < 0.0 {
        let smallest = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(2);
        u.column_mut(smallest).neg_mut();
    }
    u * v_t
}

/// Rotation about `axis` by `angle` radians.
pub fn axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let axis = nalgebra::Unit::new_normalize(*axis);
    *nalgebra::Rotation3::from_axis_angle(&axis, angle).matrix()
}

/// Rotation drawn uniformly from SO(3).
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    loop {
        let q = Quaternion::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        if q.norm() > 1e-6 {
            return *UnitQuaternion::from_quaternion(q)
                .to_rotation_matrix()
                .matrix();
        }
    }
}

/// Rotation by an angle drawn uniformly from `[0, max_angle]` about a random axis.
pub fn random_small_rotation<R: Rng + ?Sized>(rng: &mut R, max_angle: f64) -> Matrix3<f64> {
    let axis = Vector3::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    );
    let axis = if axis.norm() < 1e-9 {
        Vector3::z()
    } else {
        axis
    };
    axis_angle(&axis, rng.random_range(0.0..=max_angle))
}

/// Rigid motion with a uniform random rotation and translation in `[-extent, extent]³`.
pub fn random_pose<R: Rng + ?Sized>(rng: &mut R, extent: f64) -> Pose {
    let t = Vector3::new(
        rng.random_range(-extent..=extent),
        rng.random_range(-extent..=extent),
        rng.random_range(-extent..=extent),
    );
    Pose::from_near_rotation(random_rotation(rng), t)
}

/// Frobenius residual `‖RᵀR − I‖` and determinant of `r`.
pub fn orthogonality_defect(r: &Matrix3<f64>) -> (f64, f64) {
    ((r.transpose() * r - Matrix3::identity()).norm(), r.determinant())
}
