//! A procedural head-like mesh: an ellipsoidal icosphere with smooth local
//! blendshapes and a jaw region in the lower front.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::icosphere::icosphere;
use super::MorphableMesh;
use crate::error::Result;

pub const HEAD_RADII: [f64; 3] = [0.45, 0.55, 0.5];
const BUMP_WIDTH: f64 = 0.18;
const BUMP_AMPLITUDE: f64 = 0.06;

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Head centred at the origin, face towards +z, up +y.
pub fn stand_in_head(subdivisions: u32, expressions: usize, seed: u64) -> Result<MorphableMesh> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (unit, faces) = icosphere(subdivisions);
    let verts: Vec<[f64; 3]> = unit.iter().map(|u| [0, 1, 2].map(|a| u[a] * HEAD_RADII[a])).collect();
    let mut blendshapes = Vec::with_capacity(expressions);
    for _ in 0..expressions {
        // bump centre on the front hemisphere
        let (theta, phi): (f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-0.9..0.7));
        let c = [theta.sin() * phi.cos(), phi.sin(), theta.cos() * phi.cos()];
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let shape = unit
            .iter()
            .map(|u| {
                let d2 = (u[0] - c[0]).powi(2) + (u[1] - c[1]).powi(2) + (u[2] - c[2]).powi(2);
                let a = sign * BUMP_AMPLITUDE * (-d2 / (2.0 * BUMP_WIDTH * BUMP_WIDTH)).exp();
                [0, 1, 2].map(|k| a * u[k] * HEAD_RADII[k])
            })
            .collect();
        blendshapes.push(shape);
    }
    let jaw_weights = unit.iter().map(|u| smoothstep(-0.05, -0.45, u[1]) * smoothstep(-0.2, 0.3, u[2])).collect();
    let head_pivot = [0.0, -HEAD_RADII[1], 0.0];
    let jaw_pivot = [0.0, -0.05, -0.1];
    MorphableMesh::new(verts, faces, blendshapes, head_pivot, jaw_pivot, jaw_weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_jaw_moves_only_lower_face() {
        let a = stand_in_head(2, 4, 3).unwrap();
        let b = stand_in_head(2, 4, 3).unwrap();
        assert_eq!(a.blendshapes(), b.blendshapes());
        let d = a.vertex_deformations(&[0.0; 4], &[0.0, 0.0, 0.0, 0.3]).unwrap();
        for (v, dv) in a.vertices_can().iter().zip(&d.delta_v) {
            if v[1] > 0.0 {
                assert_eq!(*dv, [0.0; 3]);
            }
        }
        assert!(d.delta_v.iter().any(|dv| dv[1].abs() > 1e-3));
    }
}
