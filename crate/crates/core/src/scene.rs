//! Gaussians, cameras and frames.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgbuf::Image;

/// Where a Gaussian came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceTag {
    MeshSeeded,
    Background,
    Densified,
}

impl SourceTag {
    pub fn code(self) -> u8 {
        match self {
            SourceTag::MeshSeeded => 0,
            SourceTag::Background => 1,
            SourceTag::Densified => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(SourceTag::MeshSeeded),
            1 => Some(SourceTag::Background),
            2 => Some(SourceTag::Densified),
            _ => None,
        }
    }
}

/// Canonical-space splats. Rotations are `[w, x, y, z]` quaternions, scales
/// are stored as logs and opacity as a logit.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianCloud {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub source_tags: Vec<SourceTag>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Round to the nearest f32, returned as f64.
#[inline]
pub fn to_f32_grid(v: f64) -> f64 {
    v as f32 as f64
}

impl GaussianCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn push(
        &mut self,
        position: [f64; 3],
        rotation: [f64; 4],
        log_scale: [f64; 3],
        opacity_logit: f64,
        color: [f64; 3],
        tag: SourceTag,
    ) {
        self.positions.push(position);
        self.rotations.push(rotation);
        self.log_scales.push(log_scale);
        self.opacity_logits.push(opacity_logit);
        self.colors.push(color);
        self.source_tags.push(tag);
    }

    /// Keeps the Gaussians at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> GaussianCloud {
        GaussianCloud {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            rotations: indices.iter().map(|&i| self.rotations[i]).collect(),
            log_scales: indices.iter().map(|&i| self.log_scales[i]).collect(),
            opacity_logits: indices.iter().map(|&i| self.opacity_logits[i]).collect(),
            colors: indices.iter().map(|&i| self.colors[i]).collect(),
            source_tags: indices.iter().map(|&i| self.source_tags[i]).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if n == 0 {
            return Err(Error::Schema("gaussian cloud is empty".into()));
        }
        let lens = [
            self.rotations.len(),
            self.log_scales.len(),
            self.opacity_logits.len(),
            self.colors.len(),
            self.source_tags.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::Schema(format!("gaussian attribute lengths differ: {n} vs {lens:?}")));
        }
        Ok(())
    }

    pub fn renormalize_rotations(&mut self) {
        for q in &mut self.rotations {
            *q = normalize_quat(*q);
        }
    }

    /// Snap every attribute onto the f32 grid so that f32 serialization is lossless.
    pub fn quantize_f32(&mut self) {
        for v in self.positions.iter_mut().chain(self.log_scales.iter_mut()).chain(self.colors.iter_mut()) {
            v.iter_mut().for_each(|x| *x = to_f32_grid(*x));
        }
        for q in &mut self.rotations {
            q.iter_mut().for_each(|x| *x = to_f32_grid(*x));
        }
        self.opacity_logits.iter_mut().for_each(|x| *x = to_f32_grid(*x));
    }
}

pub fn normalize_quat(q: [f64; 4]) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n == 0.0 {
        return [1.0, 0.0, 0.0, 0.0];
    }
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Rotation matrix of a unit `[w, x, y, z]` quaternion.
pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
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

/// Unit quaternion of a proper rotation matrix (Shepperd's method).
pub fn matrix_to_quat(m: &Matrix3<f64>) -> [f64; 4] {
    let t = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let q = if t > 0.0 {
        let s = (t + 1.0).sqrt() * 2.0;
        [0.25 * s, (m[(2, 1)] - m[(1, 2)]) / s, (m[(0, 2)] - m[(2, 0)]) / s, (m[(1, 0)] - m[(0, 1)]) / s]
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        [(m[(2, 1)] - m[(1, 2)]) / s, 0.25 * s, (m[(0, 1)] + m[(1, 0)]) / s, (m[(0, 2)] + m[(2, 0)]) / s]
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        [(m[(0, 2)] - m[(2, 0)]) / s, (m[(0, 1)] + m[(1, 0)]) / s, 0.25 * s, (m[(1, 2)] + m[(2, 1)]) / s]
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        [(m[(1, 0)] - m[(0, 1)]) / s, (m[(0, 2)] + m[(2, 0)]) / s, (m[(1, 2)] + m[(2, 1)]) / s, 0.25 * s]
    };
    let q = normalize_quat(q);
    if q[0] < 0.0 {
        [-q[0], -q[1], -q[2], -q[3]]
    } else {
        q
    }
}

pub fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

/// Rodrigues' formula for the rotation `exp([w]x)`.
pub fn axis_angle_to_matrix(w: [f64; 3]) -> Matrix3<f64> {
    let v = Vector3::from(w);
    let theta = v.norm();
    let k = v.cross_matrix();
    let (a, b) = if theta < 1e-8 {
        (1.0 - theta * theta / 6.0, 0.5 - theta * theta / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
    };
    Matrix3::identity() + k * a + k * k * b
}

/// `Σ = R S Sᵀ Rᵀ` with `S = diag(exp(log_scale))`.
pub fn covariance_from_params(rotation: [f64; 4], log_scale: [f64; 3]) -> Matrix3<f64> {
    let r = quat_to_matrix(rotation);
    let s2 = Vector3::new((2.0 * log_scale[0]).exp(), (2.0 * log_scale[1]).exp(), (2.0 * log_scale[2]).exp());
    r * Matrix3::from_diagonal(&s2) * r.transpose()
}

/// Pinhole camera. `world_to_camera` is row-major; camera looks down +z,
/// image x to the right and y down.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub world_to_camera: [[f64; 4]; 4],
    pub near_clip: f64,
}

impl Camera {
    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        fov_y_deg: f64,
        width: usize,
        height: usize,
    ) -> Camera {
        let eye = Vector3::from(eye);
        let forward = (Vector3::from(target) - eye).normalize();
        // image y points down, so the camera y axis is world "down"
        let right = forward.cross(&Vector3::from(up)).normalize();
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(rot * eye);
        let mut m = [[0.0; 4]; 4];
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] = rot[(r, c)];
            }
            m[r][3] = t[r];
        }
        m[3][3] = 1.0;
        let fy = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        Camera {
            fx: fy,
            fy,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
            world_to_camera: m,
            near_clip: 0.05,
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        let m = &self.world_to_camera;
        Matrix3::new(m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2])
    }

    pub fn translation(&self) -> Vector3<f64> {
        let m = &self.world_to_camera;
        Vector3::new(m[0][3], m[1][3], m[2][3])
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let m = &self.world_to_camera;
        Matrix4::from_fn(|r, c| m[r][c])
    }

    pub fn to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * x + self.translation()
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Schema(format!("camera focal lengths must be positive: {} {}", self.fx, self.fy)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Schema("camera image size must be non-zero".into()));
        }
        let r = self.rotation();
        let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
        if orth > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::Schema("camera rotation is not a proper rotation".into()));
        }
        let m = &self.world_to_camera;
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Schema("camera matrix last row must be [0,0,0,1]".into()));
        }
        Ok(())
    }
}

/// One captured frame and its rig parameters.
#[derive(Clone, Debug)]
pub struct FrameRecord {
    pub image: Image,
    pub camera: Camera,
    pub gamma_exp: Vec<f64>,
    /// Head axis-angle (rx, ry, rz) then jaw angle, radians.
    pub gamma_pose: [f64; 4],
    pub frame_index: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn covariance_identity_and_diagonal_cases() {
        let id = [1.0, 0.0, 0.0, 0.0];
        let c = covariance_from_params(id, [0.0; 3]);
        assert!((c - Matrix3::identity()).abs().max() < 1e-15);
        let c = covariance_from_params(id, [2f64.ln(), 0.0, 0.0]);
        assert!((c - Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0))).abs().max() < 1e-12);
    }

    #[test]
    fn covariance_rotated_matches_explicit_composition() {
        let h = std::f64::consts::FRAC_PI_4;
        let qz = [h.cos(), 0.0, 0.0, h.sin()];
        // explicit R S Sᵀ Rᵀ with a hand-written Rz(90°)
        let r = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let s = Matrix3::from_diagonal(&Vector3::new(2.0, 1.0, 1.0));
        let expected = r * s * s.transpose() * r.transpose();
        let got = covariance_from_params(qz, [2f64.ln(), 0.0, 0.0]);
        assert!((got - expected).abs().max() < 1e-12);
        assert!((got - Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0))).abs().max() < 1e-12);
    }

    #[test]
    fn quaternion_matrix_roundtrip() {
        let w = [0.3, -1.1, 0.7];
        let m = axis_angle_to_matrix(w);
        let q = matrix_to_quat(&m);
        assert!((quat_to_matrix(q) - m).abs().max() < 1e-12);
        assert_close(m.determinant(), 1.0, 1e-12);
    }

    #[test]
    fn quat_mul_matches_matrix_product() {
        let a = matrix_to_quat(&axis_angle_to_matrix([0.2, 0.5, -0.3]));
        let b = matrix_to_quat(&axis_angle_to_matrix([-0.7, 0.1, 0.4]));
        let ab = quat_to_matrix(quat_mul(a, b));
        assert!((ab - quat_to_matrix(a) * quat_to_matrix(b)).abs().max() < 1e-12);
    }

    #[test]
    fn look_at_camera_is_valid_and_sees_target() {
        let cam = Camera::look_at([1.0, 0.5, 3.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], 50.0, 64, 48);
        cam.validate().unwrap();
        let p = cam.to_camera(&Vector3::zeros());
        assert!(p.z > 0.0 && p.x.abs() < 1e-12 && p.y.abs() < 1e-12);
        assert!((cam.center() - Vector3::new(1.0, 0.5, 3.0)).norm() < 1e-12);
        // world up projects to image up (negative y)
        let up = cam.to_camera(&Vector3::new(0.0, 1.0, 0.0));
        assert!(up.y < 0.0);
    }

    #[test]
    fn camera_validation_rejects_bad_focal() {
        let mut cam = Camera::look_at([0.0, 0.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 50.0, 8, 8);
        cam.fx = 0.0;
        assert!(cam.validate().is_err());
    }

    #[test]
    fn sigmoid_logit_inverse() {
        for p in [0.01, 0.1, 0.5, 0.9, 0.995] {
            assert_close(sigmoid(logit(p)), p, 1e-12);
        }
    }
}
