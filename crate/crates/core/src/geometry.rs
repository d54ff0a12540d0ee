//! Rigid transforms, pinhole projection and trilinear sampling of sparse TSDF volumes.

use nalgebra::{Matrix3, Rotation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::voxel::{BlockGrid, GridIndex, ObjectVolume, TsdfVoxel};

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid camera intrinsics: {0}")]
    InvalidCamera(String),
    #[error("rotation is not orthonormal (max deviation {0:e})")]
    NotOrthonormal(f64),
}

/// An element of SE(3): `p ↦ R·p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a transform from a rotation matrix, rejecting matrices that are not
    /// proper rotations within `1e-9`.
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self, GeometryError> {
        let deviation = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if deviation > 1e-9 || rotation.determinant() < 0.0 {
            return Err(GeometryError::NotOrthonormal(deviation));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation given as an axis-angle vector (radians), followed by `translation`.
    pub fn from_axis_angle(axis_angle: Vec3, translation: Vec3) -> Self {
        Self {
            rotation: rotation_from_axis_angle(&axis_angle),
            translation,
        }
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation: *q.to_rotation_matrix().matrix(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    pub fn axis_angle(&self) -> Vec3 {
        self.quaternion().scaled_axis()
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        c.acos()
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Linear interpolation of translation and slerp of rotation, `s ∈ [0, 1]`.
    pub fn interpolate(&self, other: &RigidTransform, s: f64) -> Self {
        let q = self.quaternion().slerp(&other.quaternion(), s);
        let t = self.translation.lerp(&other.translation, s);
        Self::from_quaternion(q, t)
    }

    /// Camera-to-world pose looking from `eye` at `target` (x right, y down, z forward).
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Self {
        let z = (target - eye).normalize();
        let mut x = z.cross(&up);
        if x.norm() < 1e-12 {
            x = z.cross(&Vec3::x());
        }
        let x = x.normalize();
        let y = z.cross(&x);
        Self {
            rotation: Matrix3::from_columns(&[x, y, z]),
            translation: eye,
        }
    }

    /// Largest absolute element-wise difference of the two 3×4 matrices.
    pub fn max_abs_diff(&self, other: &RigidTransform) -> f64 {
        let r = (self.rotation - other.rotation).abs().max();
        let t = (self.translation - other.translation).abs().max();
        r.max(t)
    }
}

impl std::ops::Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

pub fn rotation_from_axis_angle(axis_angle: &Vec3) -> Matrix3<f64> {
    let angle = axis_angle.norm();
    if angle == 0.0 {
        return Matrix3::identity();
    }
    let axis = Unit::new_normalize(*axis_angle);
    *Rotation3::from_axis_angle(&axis, angle).matrix()
}

/// Calibrated pinhole camera; pixel `(u, v)` has its center at integer coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl PinholeCamera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidCamera(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidCamera("image size must be positive".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(GeometryError::InvalidCamera(format!(
                "principal point ({}, {}) outside a {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Projects a camera-frame point. `None` when behind the camera or outside the image.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        let u = self.fx * p.x / p.z + self.cx;
        let v = self.fy * p.y / p.z + self.cy;
        let inside = u >= -0.5 && u < self.width as f64 - 0.5 && v >= -0.5 && v < self.height as f64 - 0.5;
        inside.then_some((u, v))
    }

    /// Nearest pixel of a projected camera-frame point.
    pub fn project_to_pixel(&self, p: &Vec3) -> Option<(u32, u32)> {
        let (u, v) = self.project(p)?;
        let (iu, iv) = ((u + 0.5).floor(), (v + 0.5).floor());
        if iu < 0.0 || iv < 0.0 || iu >= self.width as f64 || iv >= self.height as f64 {
            return None;
        }
        Some((iu as u32, iv as u32))
    }

    /// Back-projection ray through `(u, v)` scaled to unit depth (`z = 1`).
    pub fn unproject(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Unit-length viewing ray through pixel `(u, v)` in the camera frame.
    pub fn ray_direction(&self, u: u32, v: u32) -> Vec3 {
        self.unproject(u as f64, v as f64).normalize()
    }
}

/// Result of sampling a sparse TSDF field between voxel centers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InterpolationResult {
    pub value: f64,
    pub weight: f64,
    pub valid: bool,
}

impl InterpolationResult {
    const INVALID: Self = Self {
        value: 0.0,
        weight: 0.0,
        valid: false,
    };
}

/// Trilinear interpolation of distance and weight at a world point.
pub fn trilinear_interpolate(volume: &ObjectVolume, p: &Vec3) -> InterpolationResult {
    interpolate_grid(volume.grid(), &(p / volume.params().voxel_size))
}

/// Trilinear interpolation at a point expressed in voxel units (`world / voxel_size`).
///
/// The eight neighbors are the voxel centers around `q`, found by flooring
/// `q - 0.5`. Every neighbor that receives a non-zero trilinear coefficient must
/// be observed (weight > 0); off-lattice queries therefore need all eight, while a
/// query exactly on a voxel center only needs that voxel.
pub fn interpolate_grid(grid: &BlockGrid<TsdfVoxel>, q: &Vec3) -> InterpolationResult {
    // world-to-grid division leaves ~1 ulp of noise on exact voxel centers
    let shifted = (q - Vec3::repeat(0.5)).map(|c| {
        let r = c.round();
        if (c - r).abs() < 1e-9 {
            r
        } else {
            c
        }
    });
    let base = shifted.map(f64::floor);
    let frac = shifted - base;
    if !base.iter().all(|c| c.abs() < 4.0e15) {
        return InterpolationResult::INVALID;
    }
    let base = GridIndex::new(base.x as i64, base.y as i64, base.z as i64);
    let mut value = 0.0;
    let mut weight = 0.0;
    for corner in 0..8u8 {
        let (ox, oy, oz) = ((corner & 1) as i64, ((corner >> 1) & 1) as i64, ((corner >> 2) & 1) as i64);
        let cx = if ox == 1 { frac.x } else { 1.0 - frac.x };
        let cy = if oy == 1 { frac.y } else { 1.0 - frac.y };
        let cz = if oz == 1 { frac.z } else { 1.0 - frac.z };
        let coeff = cx * cy * cz;
        if coeff == 0.0 {
            continue;
        }
        match grid.get(&base.offset(ox, oy, oz)) {
            Some(v) if v.weight > 0.0 => {
                value += coeff * v.distance;
                weight += coeff * v.weight;
            }
            _ => return InterpolationResult::INVALID,
        }
    }
    InterpolationResult {
        value,
        weight,
        valid: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::{GridParams, ObjectId, TsdfVoxel};
    use proptest::prelude::*;

    macro_rules! assert_close {
        ($a:expr, $b:expr, $tol:expr) => {{
            let (a, b): (f64, f64) = ($a, $b);
            assert!((a - b).abs() <= $tol, "{} vs {} (tol {})", a, b, $tol);
        }};
    }

    fn random_transform(aa: [f64; 3], t: [f64; 3]) -> RigidTransform {
        RigidTransform::from_axis_angle(Vec3::from(aa), Vec3::from(t))
    }

    #[test]
    fn identity_and_translation() {
        let p = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(RigidTransform::identity().transform_point(&p), p);
        let t = RigidTransform::from_translation(Vec3::new(0.05, 0.0, 0.0));
        assert_eq!(t.transform_point(&Vec3::zeros()), Vec3::new(0.05, 0.0, 0.0));
    }

    #[test]
    fn rejects_reflection() {
        let m = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(RigidTransform::new(m, Vec3::zeros()).is_err());
        assert!(RigidTransform::new(Matrix3::identity() * 1.001, Vec3::zeros()).is_err());
    }

    #[test]
    fn project_optical_axis_and_behind() {
        let cam = PinholeCamera::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        assert_eq!(cam.project(&Vec3::new(0.0, 0.0, 1.0)), Some((320.0, 240.0)));
        assert_eq!(cam.project(&Vec3::new(0.0, 0.0, -1.0)), None);
        assert_eq!(cam.project(&Vec3::new(10.0, 0.0, 1.0)), None);
    }

    #[test]
    fn camera_validation() {
        assert!(PinholeCamera::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(PinholeCamera::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(PinholeCamera::new(1.0, 1.0, 1.0, 1.0, 0, 4).is_err());
    }

    #[test]
    fn look_at_points_z_at_target() {
        let pose = RigidTransform::look_at(Vec3::new(1.0, -1.0, 1.0), Vec3::zeros(), Vec3::z());
        let fwd = pose.transform_vector(&Vec3::z());
        assert!((fwd - Vec3::new(-1.0, 1.0, -1.0).normalize()).norm() < 1e-12);
        // image "down" points to world -z for an upright camera
        assert!(pose.transform_vector(&Vec3::y()).z < 0.0);
    }

    proptest! {
        #[test]
        fn inverse_is_two_sided(aa in prop::array::uniform3(-3.0f64..3.0), t in prop::array::uniform3(-5.0f64..5.0),
                                p in prop::array::uniform3(-5.0f64..5.0)) {
            let tf = random_transform(aa, t);
            let p = Vec3::from(p);
            prop_assert!(((tf * tf.inverse()).transform_point(&p) - p).norm() < 1e-9);
            prop_assert!(((tf.inverse() * tf).transform_point(&p) - p).norm() < 1e-9);
            let r = tf.rotation();
            prop_assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-9);
        }

        #[test]
        fn composition_is_associative(a in prop::array::uniform3(-3.0f64..3.0), b in prop::array::uniform3(-3.0f64..3.0),
                                      c in prop::array::uniform3(-3.0f64..3.0), t in prop::array::uniform3(-2.0f64..2.0)) {
            let (x, y, z) = (random_transform(a, t), random_transform(b, [t[1], t[2], t[0]]), random_transform(c, [0.3, -0.2, 0.1]));
            prop_assert!(((x * y) * z).max_abs_diff(&(x * (y * z))) < 1e-9);
        }

        #[test]
        fn unproject_inverts_project(x in -0.5f64..0.5, y in -0.4f64..0.4, z in 0.5f64..5.0) {
            let cam = PinholeCamera::new(500.0, 480.0, 320.0, 240.0, 640, 480).unwrap();
            let p = Vec3::new(x * z, y * z, z);
            if let Some((u, v)) = cam.project(&p) {
                let back = cam.unproject(u, v) * z;
                prop_assert!((back - p).norm() < 1e-9);
            }
        }
    }

    fn volume_with(params: GridParams, f: impl Fn(&Vec3) -> f64, range: std::ops::Range<i64>) -> ObjectVolume {
        let mut vol = ObjectVolume::new(ObjectId(1), params);
        for x in range.clone() {
            for y in range.clone() {
                for z in range.clone() {
                    let g = GridIndex::new(x, y, z);
                    let c = params.grid_to_world(&g);
                    vol.set_voxel(&g, TsdfVoxel::new(f(&c), 1.0)).unwrap();
                }
            }
        }
        vol
    }

    #[test]
    fn exact_voxel_center_returns_stored_value() {
        let params = GridParams::default();
        let mut vol = ObjectVolume::new(ObjectId(1), params);
        let g = GridIndex::new(3, -2, 7);
        vol.set_voxel(&g, TsdfVoxel::new(0.03, 1.0)).unwrap();
        let r = trilinear_interpolate(&vol, &params.grid_to_world(&g));
        assert!(r.valid);
        assert_eq!(r.value, 0.03);
    }

    #[test]
    fn midpoint_of_two_centers() {
        let params = GridParams::default();
        // neighbors along x hold 0.0 and 0.1; other corners repeat the same pair
        let vol = volume_with(params, |c| if c.x < 0.01 { 0.0 } else { 0.1 }, 0..2);
        let p = Vec3::new(0.01, 0.0075, 0.0075);
        let r = trilinear_interpolate(&vol, &p);
        assert!(r.valid);
        assert_close!(r.value, 0.05, 1e-15);
    }

    #[test]
    fn unobserved_neighbor_invalidates() {
        let params = GridParams::default();
        let mut vol = volume_with(params, |c| c.x, 0..3);
        let p = Vec3::new(0.0213, 0.0127, 0.0141);
        assert!(trilinear_interpolate(&vol, &p).valid);
        vol.set_voxel(&GridIndex::new(2, 1, 1), TsdfVoxel::default()).unwrap();
        assert!(!trilinear_interpolate(&vol, &p).valid);
    }

    proptest! {
        #[test]
        fn affine_fields_are_reproduced(x in 0.006f64..0.044, y in 0.006f64..0.044, z in 0.006f64..0.044) {
            let params = GridParams::default();
            let vol = volume_with(params, |c| 2.0 * c.x - 0.5 * c.y + 0.25 * c.z + 0.01, 0..5);
            let p = Vec3::new(x, y, z);
            let r = trilinear_interpolate(&vol, &p);
            prop_assert!(r.valid);
            prop_assert!((r.value - (2.0 * x - 0.5 * y + 0.25 * z + 0.01)).abs() < 1e-12);
        }

        #[test]
        fn bounded_by_neighbors(x in 0.006f64..0.034, y in 0.006f64..0.034, z in 0.006f64..0.034) {
            let params = GridParams::default();
            let vol = volume_with(params, |c| (c.x * 97.0).sin() * (c.y * 31.0).cos() + c.z, 0..4);
            let r = trilinear_interpolate(&vol, &Vec3::new(x, y, z));
            let q = Vec3::new(x, y, z) / params.voxel_size - Vec3::repeat(0.5);
            let base = GridIndex::new(q.x.floor() as i64, q.y.floor() as i64, q.z.floor() as i64);
            let corners: Vec<f64> = (0..8).map(|c| vol.voxel(&base.offset(c & 1, (c >> 1) & 1, (c >> 2) & 1)).unwrap().distance).collect();
            let lo = corners.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = corners.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(r.value >= lo - 1e-12 && r.value <= hi + 1e-12);
        }

        #[test]
        fn continuous_across_voxel_faces(y in 0.006f64..0.034, z in 0.006f64..0.034) {
            let params = GridParams::default();
            let vol = volume_with(params, |c| (c.x * 50.0).sin() + (c.y * 20.0).cos() * c.z, 0..4);
            // interpolation cells switch at voxel centers
            let face = 0.015;
            let a = trilinear_interpolate(&vol, &Vec3::new(face - 1e-12, y, z)).value;
            let b = trilinear_interpolate(&vol, &Vec3::new(face + 1e-12, y, z)).value;
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
