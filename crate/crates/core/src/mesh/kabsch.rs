//! Optimal proper rotation between two corresponded point sets.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KabschResult {
    pub rotation: Matrix3<f64>,
    /// Cross-covariance rank < 2; `rotation` is the identity.
    pub degenerate: bool,
}

/// Relative singular-value floor below which the cross-covariance is treated
/// as rank deficient.
const RANK_TOL: f64 = 1e-10;

fn centroid(points: &[[f64; 3]]) -> Vector3<f64> {
    let mut c = Vector3::zeros();
    for p in points {
        c += Vector3::from(*p);
    }
    c / points.len() as f64
}

/// Rotation `R` minimising `Σ ‖R (sᵢ − s̄) − (tᵢ − t̄)‖²`, with `det R = +1`.
pub fn kabsch(source: &[[f64; 3]], target: &[[f64; 3]]) -> Result<KabschResult> {
    if source.len() != target.len() {
        return Err(Error::Shape(format!("kabsch: {} source vs {} target points", source.len(), target.len())));
    }
    if source.len() < 3 {
        return Err(Error::Argument(format!("kabsch needs at least 3 points, got {}", source.len())));
    }
    let cs = centroid(source);
    let ct = centroid(target);
    let mut h = Matrix3::zeros();
    for (s, t) in source.iter().zip(target) {
        h += (Vector3::from(*s) - cs) * (Vector3::from(*t) - ct).transpose();
    }
    Ok(rotation_from_cross_covariance(&h))
}

/// `h = Σ (sᵢ − s̄)(tᵢ − t̄)ᵀ`.
pub fn rotation_from_cross_covariance(h: &Matrix3<f64>) -> KabschResult {
    let identity = KabschResult { rotation: Matrix3::identity(), degenerate: true };
    let svd = h.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return identity;
    };
    let mut sv: Vec<(f64, usize)> = svd.singular_values.iter().copied().zip(0..3).collect();
    sv.sort_by(|a, b| b.0.total_cmp(&a.0));
    let scale = sv[0].0;
    if !(scale > 0.0) || sv[1].0 <= RANK_TOL * scale {
        return identity;
    }
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant();
    let mut flip = Matrix3::identity();
    if d < 0.0 {
        // flip the direction paired with the smallest singular value
        let smallest = sv[2].1;
        flip[(smallest, smallest)] = -1.0;
    }
    KabschResult { rotation: v * flip * u.transpose(), degenerate: false }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::axis_angle_to_matrix;

    fn pts() -> Vec<[f64; 3]> {
        vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.3, 0.1, 1.5]]
    }

    fn apply(r: &Matrix3<f64>, t: Vector3<f64>, p: &[[f64; 3]]) -> Vec<[f64; 3]> {
        p.iter().map(|x| (r * Vector3::from(*x) + t).into()).collect()
    }

    #[test]
    fn identical_sets_give_identity() {
        let r = kabsch(&pts(), &pts()).unwrap();
        assert!(!r.degenerate);
        assert!((r.rotation - Matrix3::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn recovers_quarter_turn_about_z() {
        let rz = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let r = kabsch(&pts(), &apply(&rz, Vector3::zeros(), &pts())).unwrap();
        assert!((r.rotation - rz).abs().max() < 1e-12);
    }

    #[test]
    fn recovers_rotation_under_translation() {
        let rot = axis_angle_to_matrix([0.4, -1.2, 2.0]);
        let r = kabsch(&pts(), &apply(&rot, Vector3::new(3.0, -1.0, 0.5), &pts())).unwrap();
        assert!((r.rotation - rot).norm() < 1e-10);
    }

    #[test]
    fn reflection_is_corrected() {
        let mirror = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        let r = kabsch(&pts(), &apply(&mirror, Vector3::zeros(), &pts())).unwrap();
        assert!((r.rotation.determinant() - 1.0).abs() < 1e-10);
        assert!((r.rotation.transpose() * r.rotation - Matrix3::identity()).abs().max() < 1e-10);
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let line: Vec<[f64; 3]> = (0..5).map(|i| [i as f64, 0.0, 0.0]).collect();
        let r = kabsch(&line, &line).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.rotation, Matrix3::identity());
        let same = vec![[1.0, 2.0, 3.0]; 4];
        assert!(kabsch(&same, &same).unwrap().degenerate);
    }

    #[test]
    fn too_few_points_is_an_error() {
        assert!(matches!(kabsch(&pts()[..2], &pts()[..2]), Err(Error::Argument(_))));
        assert!(matches!(kabsch(&pts()[..3], &pts()[..2]), Err(Error::Shape(_))));
    }
}
