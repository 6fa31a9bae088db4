//! Value types shared by the whole pipeline: splats, cameras, frames and time.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("degenerate rotation: quaternion norm {0:e} is below 1e-12")]
    DegenerateRotation(f64),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("splat set must contain at least one splat")]
    EmptySplatSet,
    #[error("time {t} outside [0, 1] or frame {frame} outside sequence of {len}")]
    InvalidTime { t: f64, frame: usize, len: usize },
}

const MIN_QUAT_NORM: f64 = 1e-12;

/// One rendering primitive with unconstrained parameters.
///
/// Scale lives in log-space and opacity in logit-space, so every field can be
/// optimized without bounds. Quaternions are ordered `(w, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splat {
    pub position: [f64; 3],
    pub log_scale: [f64; 3],
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub color: [f64; 3],
}

impl Splat {
    pub fn opacity(&self) -> f64 {
        crate::autodiff::sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> [f64; 3] {
        self.log_scale.map(f64::exp)
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>, SceneError> {
        covariance_from_scale_rotation(self.log_scale, self.rotation)
    }
}

/// Ordered collection of splats; indices are stable within an optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplatSet {
    splats: Vec<Splat>,
}

impl SplatSet {
    pub fn new(splats: Vec<Splat>) -> Result<Self, SceneError> {
        if splats.is_empty() {
            return Err(SceneError::EmptySplatSet);
        }
        Ok(Self { splats })
    }

    pub fn splats(&self) -> &[Splat] {
        &self.splats
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.splats.iter().map(|s| s.position).collect()
    }

    pub fn into_inner(self) -> Vec<Splat> {
        self.splats
    }
}

/// Pinhole camera with world→camera extrinsics.
///
/// Camera axes: +x right, +y down, +z forward (points in front have z > 0).
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, SceneError> {
        let cam = Self { rotation, translation, fx, fy, cx, cy, width, height };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.width == 0 || self.height == 0 {
            return Err(SceneError::InvalidCamera("width and height must be at least 1".into()));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        if !(err <= 1e-6) {
            return Err(SceneError::InvalidCamera(format!("rotation not orthonormal (|RᵀR − I| = {err:e})")));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(SceneError::InvalidCamera("focal lengths must be positive".into()));
        }
        Ok(())
    }

    /// Camera looking from `eye` at `target`, with `up` roughly the world up.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, SceneError> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(SceneError::InvalidCamera("up vector parallel to viewing direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(rotation, translation, fx, fy, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Same camera after translating the world by `offset`.
    pub fn translated_world(&self, offset: Vector3<f64>) -> Self {
        let mut c = self.clone();
        c.translation = self.translation - self.rotation * offset;
        c
    }
}

/// An RGB image with optional mask, values in `[0, 1]`, stored row-major HWC.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
    pub mask: Option<Vec<f64>>,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>, mask: Option<Vec<f64>>) -> Result<Self, SceneError> {
        if pixels.len() != width * height * 3 {
            return Err(SceneError::InvalidFrame(format!(
                "{} values for a {width}x{height} RGB frame",
                pixels.len()
            )));
        }
        if let Some(m) = &mask {
            if m.len() != width * height {
                return Err(SceneError::InvalidFrame("mask size does not match frame".into()));
            }
        }
        let in_range = |v: &f64| v.is_finite() && (0.0..=1.0).contains(v);
        if !pixels.iter().all(in_range) || !mask.iter().flatten().all(in_range) {
            return Err(SceneError::InvalidFrame("values must be finite and within [0, 1]".into()));
        }
        Ok(Self { width, height, pixels, mask })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let pixels = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, pixels, mask: None }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Normalized sequence time plus the integer frame it came from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeStamp {
    pub t: f64,
    pub frame_index: usize,
}

impl TimeStamp {
    pub fn new(t: f64, frame_index: usize, sequence_len: usize) -> Result<Self, SceneError> {
        if !(0.0..=1.0).contains(&t) || frame_index >= sequence_len.max(1) {
            return Err(SceneError::InvalidTime { t, frame: frame_index, len: sequence_len });
        }
        Ok(Self { t, frame_index })
    }

    /// Frame `i` of a `len`-frame sequence, with `t = i / (len − 1)`.
    pub fn from_frame(frame_index: usize, sequence_len: usize) -> Self {
        let t = if sequence_len > 1 { frame_index as f64 / (sequence_len - 1) as f64 } else { 0.0 };
        Self { t, frame_index }
    }

    pub fn zero() -> Self {
        Self { t: 0.0, frame_index: 0 }
    }
}

/// Unit quaternion with its first nonzero component made non-negative.
pub fn normalize_quaternion(q: [f64; 4]) -> Result<[f64; 4], SceneError> {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm >= MIN_QUAT_NORM) {
        return Err(SceneError::DegenerateRotation(norm));
    }
    let mut out = q.map(|v| v / norm);
    if let Some(first) = out.iter().find(|v| **v != 0.0) {
        if *first < 0.0 {
            out.iter_mut().for_each(|v| *v = -*v);
        }
    }
    Ok(out)
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn rotation_from_unit_quaternion(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `Σ = O S Sᵀ Oᵀ` from linear scales and a unit quaternion.
pub fn covariance_from_scales_unit_quat(scale: [f64; 3], q: [f64; 4]) -> Matrix3<f64> {
    let o = rotation_from_unit_quaternion(q);
    let m = o * Matrix3::from_diagonal(&Vector3::from(scale));
    m * m.transpose()
}

/// `Σ = O diag(exp(log_scale))² Oᵀ`, with `O` the rotation of `q / ‖q‖`.
pub fn covariance_from_scale_rotation(log_scale: [f64; 3], q: [f64; 4]) -> Result<Matrix3<f64>, SceneError> {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm >= MIN_QUAT_NORM) {
        return Err(SceneError::DegenerateRotation(norm));
    }
    let unit = q.map(|v| v / norm);
    Ok(covariance_from_scales_unit_quat(log_scale.map(f64::exp), unit))
}

/// Upper-triangular entries `(xx, xy, xz, yy, yz, zz)` of a symmetric matrix.
pub fn upper_triangle(m: &Matrix3<f64>) -> [f64; 6] {
    [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 1)], m[(1, 2)], m[(2, 2)]]
}

pub fn from_upper_triangle(u: &[f64]) -> Matrix3<f64> {
    Matrix3::new(u[0], u[1], u[2], u[1], u[3], u[4], u[2], u[4], u[5])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_1_SQRT_2, LN_2};

    fn assert_mat_close(a: &Matrix3<f64>, b: &Matrix3<f64>, tol: f64) {
        assert!((a - b).abs().max() <= tol, "{a} vs {b}");
    }

    #[test]
    fn identity_covariance() {
        let c = covariance_from_scale_rotation([0.0; 3], [1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_mat_close(&c, &Matrix3::identity(), 0.0);
    }

    #[test]
    fn diagonal_covariance_squares_scales() {
        let c = covariance_from_scale_rotation([LN_2, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_mat_close(&c, &Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)), 1e-14);
    }

    #[test]
    fn rotated_covariance_matches_direct_product() {
        // 90° about z: q = (cos 45°, 0, 0, sin 45°).
        let q = [FRAC_1_SQRT_2, 0.0, 0.0, FRAC_1_SQRT_2];
        let c = covariance_from_scale_rotation([LN_2, 0.0, 0.0], q).unwrap();
        // Oracle: explicit rotation matrix times diag(4,1,1) times its transpose.
        let o = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let want = o * Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)) * o.transpose();
        assert_mat_close(&want, &Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0)), 0.0);
        assert_mat_close(&c, &want, 1e-14);
    }

    #[test]
    fn degenerate_quaternion_is_rejected() {
        assert!(matches!(
            covariance_from_scale_rotation([0.0; 3], [0.0; 4]),
            Err(SceneError::DegenerateRotation(_))
        ));
        assert!(normalize_quaternion([1e-13, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn quaternion_normalization_examples() {
        assert_eq!(normalize_quaternion([2.0, 0.0, 0.0, 0.0]).unwrap(), [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(normalize_quaternion([0.0, -3.0, 0.0, 0.0]).unwrap(), [0.0, 1.0, 0.0, 0.0]);
        assert_eq!(normalize_quaternion([1.0, 1.0, 1.0, 1.0]).unwrap(), [0.5; 4]);
    }

    #[test]
    fn look_at_puts_target_on_axis() {
        let cam = Camera::look_at(
            Vector3::new(0.0, 0.0, -3.0),
            Vector3::zeros(),
            Vector3::new(0.0, -1.0, 0.0),
            50.0,
            50.0,
            32,
            32,
        )
        .unwrap();
        let pc = cam.to_camera(&Vector3::zeros());
        assert!(pc.x.abs() < 1e-12 && pc.y.abs() < 1e-12);
        assert!((pc.z - 3.0).abs() < 1e-12);
        assert!((cam.center() - Vector3::new(0.0, 0.0, -3.0)).norm() < 1e-12);
    }

    #[test]
    fn frame_rejects_out_of_range_values() {
        assert!(Frame::new(1, 1, vec![0.0, 1.5, 0.0], None).is_err());
        assert!(Frame::new(1, 1, vec![0.0, 0.5], None).is_err());
        assert!(Frame::new(1, 1, vec![0.0, 0.5, 1.0], Some(vec![1.0])).is_ok());
    }

    #[test]
    fn camera_rejects_non_orthonormal_rotation() {
        let r = Matrix3::identity() * 1.01;
        assert!(Camera::new(r, Vector3::zeros(), 1.0, 1.0, 0.0, 0.0, 4, 4).is_err());
        assert!(Camera::new(Matrix3::identity(), Vector3::zeros(), 1.0, 1.0, 0.0, 0.0, 0, 4).is_err());
    }

    fn quat() -> impl Strategy<Value = [f64; 4]> {
        prop::array::uniform4(-1.0f64..1.0).prop_filter("nonzero", |q| q.iter().map(|v| v * v).sum::<f64>() > 1e-4)
    }

    proptest! {
        #[test]
        fn covariance_is_psd(ls in prop::array::uniform3(-3.0f64..1.0), q in quat()) {
            let c = covariance_from_scale_rotation(ls, q).unwrap();
            prop_assert!((c - c.transpose()).abs().max() == 0.0 || (c - c.transpose()).abs().max() < 1e-15);
            let eig = c.symmetric_eigenvalues();
            let scale = c.abs().max().max(1.0);
            for e in eig.iter() {
                prop_assert!(*e >= -1e-9 * scale, "eigenvalue {}", e);
            }
        }

        #[test]
        fn covariance_double_cover(ls in prop::array::uniform3(-3.0f64..1.0), q in quat()) {
            let neg = q.map(|v| -v);
            prop_assert_eq!(
                covariance_from_scale_rotation(ls, q).unwrap(),
                covariance_from_scale_rotation(ls, neg).unwrap()
            );
        }

        #[test]
        fn normalized_quaternion_is_unit_and_canonical(q in quat()) {
            let n = normalize_quaternion(q).unwrap();
            let norm: f64 = n.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-12);
            let first = n.iter().find(|v| **v != 0.0).unwrap();
            prop_assert!(*first > 0.0);
        }

        #[test]
        fn splat_set_json_round_trip_is_bit_exact(
            vals in prop::collection::vec(prop::array::uniform16(-1e3f64..1e3), 1..8)
        ) {
            let splats: Vec<Splat> = vals.iter().map(|v| Splat {
                position: [v[0], v[1], v[2]],
                log_scale: [v[3], v[4], v[5]],
                rotation: [v[6], v[7], v[8], v[9]],
                opacity_logit: v[10],
                color: [v[11], v[12], v[13]],
            }).collect();
            let set = SplatSet::new(splats).unwrap();
            let text = serde_json::to_string(&set).unwrap();
            let back: SplatSet = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(set, back);
        }
    }
}
