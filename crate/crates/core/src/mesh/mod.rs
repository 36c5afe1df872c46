//! Linear-blendshape head mesh with a rigid head rotation and a weighted jaw,
//! plus the neighbourhood queries the deformation prior is built on.
//!
//! On-disk layout (a directory):
//!
//! | file              | contents                                            |
//! |-------------------|-----------------------------------------------------|
//! | `mesh.json`       | `format_version`, `vertex_count`, `face_count`,     |
//! |                   | `blendshape_count`, `head_pivot`, `jaw_pivot`       |
//! | `vertices.f32`    | V×3 little-endian f32, row-major                    |
//! | `faces.u32`       | F×3 little-endian u32                               |
//! | `blendshapes.f32` | E×V×3 little-endian f32 (blendshape-major)          |
//! | `jaw_weights.f32` | V little-endian f32 in [0, 1]                       |
//!
//! The jaw rotates about the world x axis through `jaw_pivot`.

pub mod icosphere;
pub mod kabsch;
pub mod kdtree;
pub mod standin;

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::axis_angle_to_matrix;
pub use kabsch::{kabsch, KabschResult};
pub use kdtree::{KdTree, KnnResult};
pub use standin::stand_in_head;

pub const MESH_FORMAT_VERSION: u32 = 1;

/// Added to neighbour distances in inverse-distance weighting.
pub const IDW_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct MorphableMesh {
    vertices_can: Vec<[f64; 3]>,
    faces: Vec<[u32; 3]>,
    blendshapes: Vec<Vec<[f64; 3]>>,
    head_pivot: [f64; 3],
    jaw_pivot: [f64; 3],
    jaw_weights: Vec<f64>,
    tree: KdTree,
}

/// `δv = v(γ) − v_can` for every vertex.
#[derive(Clone, Debug, PartialEq)]
pub struct VertexDeformation {
    pub delta_v: Vec<[f64; 3]>,
}

#[derive(Serialize, Deserialize)]
struct MeshManifest {
    format_version: u32,
    vertex_count: usize,
    face_count: usize,
    blendshape_count: usize,
    head_pivot: [f64; 3],
    jaw_pivot: [f64; 3],
}

impl MorphableMesh {
    pub fn new(
        vertices_can: Vec<[f64; 3]>,
        faces: Vec<[u32; 3]>,
        blendshapes: Vec<Vec<[f64; 3]>>,
        head_pivot: [f64; 3],
        jaw_pivot: [f64; 3],
        jaw_weights: Vec<f64>,
    ) -> Result<Self> {
        let v = vertices_can.len();
        if v < 4 {
            return Err(Error::Schema(format!("mesh needs at least 4 vertices, got {v}")));
        }
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i as usize >= v)) {
            return Err(Error::Schema(format!("face {f:?} references a vertex >= {v}")));
        }
        if let Some((e, _)) = blendshapes.iter().enumerate().find(|(_, b)| b.len() != v) {
            return Err(Error::Schema(format!("blendshape {e} does not have {v} rows")));
        }
        if jaw_weights.len() != v {
            return Err(Error::Schema(format!("jaw weights: {} entries for {v} vertices", jaw_weights.len())));
        }
        if jaw_weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::Schema("jaw weights must lie in [0, 1]".into()));
        }
        let tree = KdTree::new(vertices_can.clone());
        Ok(MorphableMesh { vertices_can, faces, blendshapes, head_pivot, jaw_pivot, jaw_weights, tree })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices_can.len()
    }

    pub fn expression_count(&self) -> usize {
        self.blendshapes.len()
    }

    pub fn vertices_can(&self) -> &[[f64; 3]] {
        &self.vertices_can
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn blendshapes(&self) -> &[Vec<[f64; 3]>] {
        &self.blendshapes
    }

    pub fn head_pivot(&self) -> [f64; 3] {
        self.head_pivot
    }

    pub fn jaw_pivot(&self) -> [f64; 3] {
        self.jaw_pivot
    }

    pub fn jaw_weights(&self) -> &[f64] {
        &self.jaw_weights
    }

    pub fn check_params(&self, gamma_exp: &[f64]) -> Result<()> {
        if gamma_exp.len() != self.blendshapes.len() {
            return Err(Error::Shape(format!(
                "expression vector has {} entries, mesh has {} blendshapes",
                gamma_exp.len(),
                self.blendshapes.len()
            )));
        }
        Ok(())
    }

    /// Deformed vertex positions for expression `gamma_exp` and pose
    /// `gamma_pose = (head axis-angle, jaw angle)`.
    pub fn evaluate(&self, gamma_exp: &[f64], gamma_pose: &[f64; 4]) -> Result<Vec<[f64; 3]>> {
        self.check_params(gamma_exp)?;
        let head = axis_angle_to_matrix([gamma_pose[0], gamma_pose[1], gamma_pose[2]]);
        let jaw = axis_angle_to_matrix([gamma_pose[3], 0.0, 0.0]);
        let hp = Vector3::from(self.head_pivot);
        let jp = Vector3::from(self.jaw_pivot);
        let out = (0..self.vertices_can.len())
            .map(|i| {
                let mut v = Vector3::from(self.vertices_can[i]);
                for (g, shape) in gamma_exp.iter().zip(&self.blendshapes) {
                    if *g != 0.0 {
                        v += Vector3::from(shape[i]) * *g;
                    }
                }
                let wj = self.jaw_weights[i];
                if wj != 0.0 && gamma_pose[3] != 0.0 {
                    let rotated = jaw * (v - jp) + jp;
                    v += (rotated - v) * wj;
                }
                if gamma_pose[..3].iter().any(|&a| a != 0.0) {
                    v = head * (v - hp) + hp;
                }
                v.into()
            })
            .collect();
        Ok(out)
    }

    pub fn vertex_deformations(&self, gamma_exp: &[f64], gamma_pose: &[f64; 4]) -> Result<VertexDeformation> {
        let v = self.evaluate(gamma_exp, gamma_pose)?;
        let delta_v = v
            .iter()
            .zip(&self.vertices_can)
            .map(|(a, b)| [a[0] - b[0], a[1] - b[1], a[2] - b[2]])
            .collect();
        Ok(VertexDeformation { delta_v })
    }

    /// K nearest canonical vertices, closest first; ties go to the lower index.
    pub fn knn_vertices(&self, query: &[f64; 3], k: usize) -> Result<KnnResult> {
        if k == 0 || k > self.vertices_can.len() {
            return Err(Error::Argument(format!("K = {k} must be in 1..={}", self.vertices_can.len())));
        }
        Ok(self.tree.knn(query, k))
    }

    /// Distance from `x` to the nearest canonical vertex.
    pub fn distance_to_mesh(&self, x: &[f64; 3]) -> f64 {
        self.tree.nearest(x).1
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.vertices_can.len() as f64;
        let mut c = [0.0; 3];
        for v in &self.vertices_can {
            for a in 0..3 {
                c[a] += v[a] / n;
            }
        }
        c
    }

    /// Radius of the vertex bounding sphere centred on the vertex centroid.
    pub fn bounding_radius(&self) -> f64 {
        let c = self.centroid();
        self.vertices_can
            .iter()
            .map(|v| ((v[0] - c[0]).powi(2) + (v[1] - c[1]).powi(2) + (v[2] - c[2]).powi(2)).sqrt())
            .fold(0.0, f64::max)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = MeshManifest {
            format_version: MESH_FORMAT_VERSION,
            vertex_count: self.vertices_can.len(),
            face_count: self.faces.len(),
            blendshape_count: self.blendshapes.len(),
            head_pivot: self.head_pivot,
            jaw_pivot: self.jaw_pivot,
        };
        let p = dir.join("mesh.json");
        let json = serde_json::to_string_pretty(&manifest).expect("mesh manifest serializes");
        fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
        write_f32(&dir.join("vertices.f32"), self.vertices_can.iter().flatten().copied())?;
        write_f32(&dir.join("blendshapes.f32"), self.blendshapes.iter().flatten().flatten().copied())?;
        write_f32(&dir.join("jaw_weights.f32"), self.jaw_weights.iter().copied())?;
        let p = dir.join("faces.u32");
        let bytes: Vec<u8> = self.faces.iter().flatten().flat_map(|i| i.to_le_bytes()).collect();
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("mesh.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let m: MeshManifest = serde_json::from_str(&text).map_err(|e| Error::load(&p, e.to_string()))?;
        if m.format_version != MESH_FORMAT_VERSION {
            return Err(Error::load(&p, format!("unsupported mesh format version {}", m.format_version)));
        }
        let (v, f, e) = (m.vertex_count, m.face_count, m.blendshape_count);
        let verts = read_f32(&dir.join("vertices.f32"), v * 3)?;
        let shapes = read_f32(&dir.join("blendshapes.f32"), e * v * 3)?;
        let jaw = read_f32(&dir.join("jaw_weights.f32"), v)?;
        let fp = dir.join("faces.u32");
        let fb = fs::read(&fp).map_err(|err| Error::io(&fp, err))?;
        if fb.len() != f * 12 {
            return Err(Error::load(&fp, format!("expected {} bytes, found {}", f * 12, fb.len())));
        }
        let idx: Vec<u32> = fb.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect();
        let triples = |d: &[f64]| -> Vec<[f64; 3]> { d.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect() };
        MorphableMesh::new(
            triples(&verts),
            idx.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            shapes.chunks_exact(v * 3).map(triples).collect(),
            m.head_pivot,
            m.jaw_pivot,
            jaw,
        )
    }
}

fn write_f32(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(|v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32(path: &Path, count: usize) -> Result<Vec<f64>> {
    let b = fs::read(path).map_err(|e| Error::io(path, e))?;
    if b.len() != count * 4 {
        return Err(Error::load(path, format!("expected {} bytes, found {}", count * 4, b.len())));
    }
    Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
}

/// Normalised inverse-distance weights `(1/(dⱼ+ε)) / Σ 1/(dₖ+ε)`. An exact
/// zero distance takes all the weight (first such neighbour).
pub fn idw_weights(distances: &[f64]) -> Vec<f64> {
    if let Some(hit) = distances.iter().position(|&d| d == 0.0) {
        let mut w = vec![0.0; distances.len()];
        w[hit] = 1.0;
        return w;
    }
    let inv: Vec<f64> = distances.iter().map(|d| 1.0 / (d + IDW_EPS)).collect();
    let total: f64 = inv.iter().sum();
    inv.iter().map(|v| v / total).collect()
}

/// Inverse-distance weighted average of neighbour displacements.
pub fn dwavg(deltas: &[[f64; 3]], distances: &[f64]) -> [f64; 3] {
    let w = idw_weights(distances);
    let mut out = [0.0; 3];
    for (d, wj) in deltas.iter().zip(&w) {
        for a in 0..3 {
            out[a] += wj * d[a];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::kdtree::brute_force_knn;
    use nalgebra::Matrix3;

    pub(crate) fn tetra_mesh(pivot: [f64; 3]) -> MorphableMesh {
        let verts = vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [-1.0, -1.0, -1.0], [0.5, 0.5, 0.5]];
        let faces = vec![[0, 1, 2], [0, 1, 3], [1, 2, 3], [0, 2, 3]];
        let shift: Vec<[f64; 3]> = vec![[0.1, 0.0, 0.0]; 5];
        let bump: Vec<[f64; 3]> = (0..5).map(|i| [0.0, 0.01 * i as f64, -0.02]).collect();
        MorphableMesh::new(verts, faces, vec![shift, bump], pivot, [0.0, -0.5, 0.0], vec![0.0, 0.0, 0.5, 1.0, 0.25]).unwrap()
    }

    #[test]
    fn neutral_parameters_reproduce_canonical_vertices() {
        let m = tetra_mesh([0.0, -1.0, 0.0]);
        assert_eq!(m.evaluate(&[0.0, 0.0], &[0.0; 4]).unwrap(), m.vertices_can());
        let d = m.vertex_deformations(&[0.0, 0.0], &[0.0; 4]).unwrap();
        assert!(d.delta_v.iter().all(|r| *r == [0.0; 3]));
    }

    #[test]
    fn one_hot_expression_adds_blendshape() {
        let m = tetra_mesh([0.0; 3]);
        let v = m.evaluate(&[1.0, 0.0], &[0.0; 4]).unwrap();
        for (i, p) in v.iter().enumerate() {
            let c = m.vertices_can()[i];
            let b = m.blendshapes()[0][i];
            for a in 0..3 {
                assert!((p[a] - (c[a] + b[a])).abs() < 1e-15);
            }
        }
        // translation blendshape with coefficient 2
        let d = m.vertex_deformations(&[2.0, 0.0], &[0.0; 4]).unwrap();
        for r in &d.delta_v {
            assert!((r[0] - 0.2).abs() < 1e-15 && r[1] == 0.0 && r[2] == 0.0);
        }
    }

    #[test]
    fn head_rotation_about_origin() {
        let m = tetra_mesh([0.0; 3]);
        let h = std::f64::consts::FRAC_PI_2;
        let v = m.evaluate(&[0.0, 0.0], &[0.0, 0.0, h, 0.0]).unwrap();
        let rz = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        for (p, c) in v.iter().zip(m.vertices_can()) {
            let expected = rz * Vector3::from(*c);
            assert!((Vector3::from(*p) - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn deformation_is_evaluate_minus_canonical() {
        let m = tetra_mesh([0.1, -0.8, 0.0]);
        let ge = [0.3, -0.7];
        let gp = [0.2, -0.1, 0.3, 0.25];
        let v = m.evaluate(&ge, &gp).unwrap();
        let d = m.vertex_deformations(&ge, &gp).unwrap();
        for i in 0..v.len() {
            for a in 0..3 {
                assert_eq!(d.delta_v[i][a], v[i][a] - m.vertices_can()[i][a]);
            }
        }
    }

    #[test]
    fn jaw_only_moves_weighted_vertices() {
        let m = tetra_mesh([0.0; 3]);
        let d = m.vertex_deformations(&[0.0, 0.0], &[0.0, 0.0, 0.0, 0.4]).unwrap();
        assert_eq!(d.delta_v[0], [0.0; 3]);
        assert_eq!(d.delta_v[1], [0.0; 3]);
        assert!(d.delta_v[3].iter().any(|&x| x.abs() > 1e-3));
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let m = tetra_mesh([0.0; 3]);
        assert!(matches!(m.evaluate(&[0.0], &[0.0; 4]), Err(Error::Shape(_))));
    }

    #[test]
    fn invalid_meshes_are_rejected() {
        let v = vec![[0.0; 3]; 4];
        assert!(MorphableMesh::new(v[..3].to_vec(), vec![], vec![], [0.0; 3], [0.0; 3], vec![0.0; 3]).is_err());
        assert!(MorphableMesh::new(v.clone(), vec![[0, 1, 4]], vec![], [0.0; 3], [0.0; 3], vec![0.0; 4]).is_err());
        assert!(MorphableMesh::new(v.clone(), vec![], vec![vec![[0.0; 3]; 3]], [0.0; 3], [0.0; 3], vec![0.0; 4]).is_err());
        assert!(MorphableMesh::new(v, vec![], vec![], [0.0; 3], [0.0; 3], vec![0.0, 2.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn knn_self_match_and_line_case() {
        let line = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        let m = MorphableMesh::new(line.clone(), vec![], vec![], [0.0; 3], [0.0; 3], vec![0.0; 4]).unwrap();
        let r = m.knn_vertices(&[0.6, 0.0, 0.0], 2).unwrap();
        assert_eq!(r.indices, vec![1, 0]);
        assert_eq!(r, brute_force_knn(&line, &[0.6, 0.0, 0.0], 2));
        let r = m.knn_vertices(&[2.0, 0.0, 0.0], 1).unwrap();
        assert_eq!((r.indices[0], r.distances[0]), (2, 0.0));
        let all = m.knn_vertices(&[1.2, 0.0, 0.0], 4).unwrap();
        assert_eq!(all.indices, vec![1, 2, 0, 3]);
        assert!(matches!(m.knn_vertices(&[0.0; 3], 5), Err(Error::Argument(_))));
        assert!(matches!(m.knn_vertices(&[0.0; 3], 0), Err(Error::Argument(_))));
    }

    #[test]
    fn knn_self_match_on_icosphere() {
        let (v, f) = icosphere::icosphere(2);
        let n = v.len();
        let m = MorphableMesh::new(v.clone(), f, vec![], [0.0; 3], [0.0; 3], vec![0.0; n]).unwrap();
        let r = m.knn_vertices(&v[7], 1).unwrap();
        assert_eq!(r.indices, vec![7]);
        assert_eq!(r.distances, vec![0.0]);
    }

    #[test]
    fn dwavg_rules() {
        let a = [1.0, 2.0, 3.0];
        let b = [4.0, -2.0, 0.0];
        // equal distances: arithmetic mean
        let m = dwavg(&[a, b], &[0.5, 0.5]);
        for k in 0..3 {
            assert!((m[k] - (a[k] + b[k]) / 2.0).abs() < 1e-12);
        }
        // exact hit
        assert_eq!(dwavg(&[a, b], &[0.3, 0.0]), b);
        // distances (1, 2): weights 2/3, 1/3
        let m = dwavg(&[a, b], &[1.0, 2.0]);
        for k in 0..3 {
            assert!((m[k] - (2.0 * a[k] + b[k]) / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let (v, f) = icosphere::icosphere(1);
        let n = v.len();
        let q = |x: f64| x as f32 as f64;
        let v: Vec<[f64; 3]> = v.iter().map(|p| [q(p[0]), q(p[1]), q(p[2])]).collect();
        let shape: Vec<[f64; 3]> = v.iter().map(|p| [q(p[0] * 0.1), 0.0, q(-p[2] * 0.05)]).collect();
        let jaw: Vec<f64> = (0..n).map(|i| q((i % 3) as f64 / 2.0)).collect();
        let m = MorphableMesh::new(v, f, vec![shape], [0.0, -0.5, 0.0], [0.0, -0.25, 0.125], jaw).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = MorphableMesh::load(dir.path()).unwrap();
        assert_eq!(back.vertices_can(), m.vertices_can());
        assert_eq!(back.faces(), m.faces());
        assert_eq!(back.blendshapes(), m.blendshapes());
        assert_eq!(back.jaw_weights(), m.jaw_weights());
        assert_eq!(back.head_pivot(), m.head_pivot());
        fs::remove_file(dir.path().join("faces.u32")).unwrap();
        let err = MorphableMesh::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("faces.u32"));
    }
}
