//! Procedural ground truth: a textured stand-in head in front of a backdrop,
//! animated by smooth rig-parameter walks and rendered with the reference
//! renderer.
//!
//! The reference world has three kinds of splats. Mesh splats sit on the
//! vertices and move with them; attached splats float just off the surface
//! and move with one vertex; background splats are static. Rotations of the
//! moving splats follow the Kabsch rotation of their nearest vertices, so the
//! trained model can in principle reproduce every frame.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    frame_dump_path, frame_params_path, frame_png_path, mask_path, write_json, DatasetManifest, FrameParams,
    InitPoints, Splits, DATASET_FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::imgbuf::{Image, Mask, PngEncoding};
use crate::mesh::kabsch::rotation_from_cross_covariance;
use crate::mesh::standin::HEAD_RADII;
use crate::mesh::{stand_in_head, MorphableMesh};
use crate::raster::{project_all, render_reference};
use crate::scene::{logit, matrix_to_quat, normalize_quat, quat_mul, Camera, GaussianCloud, SourceTag};

/// Neighbourhood size used for the ground-truth splat rotations.
pub const REFERENCE_K: usize = 10;
const MASK_DILATION: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub icosphere_subdivision: u32,
    pub expressions: usize,
    pub background_points: usize,
    /// Splats floating just off the upper head (hair-like), following one vertex.
    pub attached_points: usize,
    pub width: usize,
    pub height: usize,
    pub train_frames: usize,
    pub setting1_frames: usize,
    pub setting2_frames: usize,
    pub train_cameras: usize,
    pub orbit_radius: [f64; 2],
    pub orbit_height: [f64; 2],
    /// Camera yaw range around the face, degrees.
    pub orbit_yaw_deg: f64,
    pub fov_y_deg: f64,
    /// Head yaw/pitch limit, degrees.
    pub head_angle_deg: f64,
    /// Jaw opening limit, degrees.
    pub jaw_angle_deg: f64,
    /// Standard deviation of the jitter applied to the exported init points.
    pub init_point_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            icosphere_subdivision: 3,
            expressions: 8,
            background_points: 1000,
            attached_points: 240,
            width: 64,
            height: 64,
            train_frames: 200,
            setting1_frames: 20,
            setting2_frames: 20,
            train_cameras: 8,
            orbit_radius: [2.6, 3.0],
            orbit_height: [-0.1, 0.4],
            orbit_yaw_deg: 30.0,
            fov_y_deg: 50.0,
            head_angle_deg: 40.0,
            jaw_angle_deg: 25.0,
            init_point_jitter: 0.005,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_frames == 0 {
            return Err(Error::Argument("synthetic dataset needs at least one training frame".into()));
        }
        if self.width < 11 || self.height < 11 {
            return Err(Error::Argument(format!("image size {}x{} is below 11x11", self.width, self.height)));
        }
        if self.train_cameras == 0 {
            return Err(Error::Argument("need at least one training camera".into()));
        }
        if self.orbit_radius[0] > self.orbit_radius[1] || self.orbit_radius[0] <= 0.0 {
            return Err(Error::Argument("orbit radius range is invalid".into()));
        }
        Ok(())
    }
}

/// How a reference splat moves.
#[derive(Clone, Debug, PartialEq)]
pub enum Motion {
    Static,
    /// Translates with vertex `vertex` and rotates with the Kabsch rotation
    /// of `neighbours`.
    Follow { vertex: usize, neighbours: Vec<usize> },
}

#[derive(Clone, Debug)]
pub struct ReferenceWorld {
    pub mesh: MorphableMesh,
    pub cloud: GaussianCloud,
    pub motion: Vec<Motion>,
}

fn smooth_noise(p: [f64; 3], f: f64) -> f64 {
    ((f * p[0]).sin() * (1.3 * f * p[1]).cos() + (0.7 * f * p[2] + 0.5 * f * p[0]).sin()) * 0.25 + 0.5
}

fn skin_color(p: [f64; 3]) -> [f64; 3] {
    let n = [p[0] / HEAD_RADII[0], p[1] / HEAD_RADII[1], p[2] / HEAD_RADII[2]];
    let t = 0.8 + 0.2 * smooth_noise(p, 9.0);
    let mut c = [0.86 * t, 0.64 * t, 0.5 * t];
    let front = n[2] > 0.5;
    for ex in [-0.38, 0.38] {
        let d = (n[0] - ex).powi(2) + (n[1] - 0.22).powi(2);
        if front && d < 0.02 {
            c = [0.12, 0.1, 0.14];
        } else if front && d < 0.045 {
            c = [0.95, 0.95, 0.93];
        }
    }
    if front && (n[1] + 0.45).abs() < 0.09 && n[0].abs() < 0.4 {
        c = [0.75, 0.2, 0.22];
    }
    if front && n[1] > -0.2 && n[1] < 0.15 && n[0].abs() < 0.08 {
        c = [c[0] * 0.85, c[1] * 0.8, c[2] * 0.8];
    }
    c
}

fn backdrop_color(p: [f64; 3]) -> [f64; 3] {
    let a = smooth_noise(p, 2.5);
    let b = smooth_noise([p[1], p[2], p[0]], 3.5);
    [0.2 + 0.5 * a, 0.35 + 0.3 * b, 0.55 + 0.35 * (1.0 - a)]
}

fn floor_color(p: [f64; 3]) -> [f64; 3] {
    let c = if ((p[0] * 2.0).floor() + (p[2] * 2.0).floor()) as i64 % 2 == 0 { 0.25 } else { 0.6 };
    [c, c * 0.9, c * 0.75]
}

/// Unit quaternion whose local z axis is `n`.
fn frame_from_normal(n: Vector3<f64>) -> [f64; 4] {
    let n = n.normalize();
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let t1 = helper.cross(&n).normalize();
    let t2 = n.cross(&t1);
    matrix_to_quat(&Matrix3::from_columns(&[t1, t2, n]))
}

fn ellipsoid_normal(p: [f64; 3]) -> Vector3<f64> {
    Vector3::new(p[0] / HEAD_RADII[0].powi(2), p[1] / HEAD_RADII[1].powi(2), p[2] / HEAD_RADII[2].powi(2)).normalize()
}

fn mean_neighbour_spacing(mesh: &MorphableMesh) -> Result<f64> {
    let v = mesh.vertices_can();
    let mut total = 0.0;
    for p in v {
        let r = mesh.knn_vertices(p, 4)?;
        total += r.distances[1..].iter().sum::<f64>() / 3.0;
    }
    Ok(total / v.len() as f64)
}

impl ReferenceWorld {
    pub fn build(cfg: &SynthConfig) -> Result<Self> {
        let mesh = stand_in_head(cfg.icosphere_subdivision, cfg.expressions, cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x51_7e_a1);
        let spacing = mean_neighbour_spacing(&mesh)?;
        let k = REFERENCE_K.min(mesh.vertex_count());
        let mut cloud = GaussianCloud::default();
        let mut motion = Vec::new();
        let tangential = (0.6 * spacing).ln();
        let normal = (0.12 * spacing).ln();
        for (i, v) in mesh.vertices_can().iter().enumerate() {
            let q = frame_from_normal(ellipsoid_normal(*v));
            cloud.push(*v, q, [tangential, tangential, normal], logit(0.95), skin_color(*v), SourceTag::MeshSeeded);
            motion.push(Motion::Follow { vertex: i, neighbours: mesh.knn_vertices(v, k)?.indices });
        }
        let upper: Vec<usize> = (0..mesh.vertex_count())
            .filter(|&i| {
                let v = mesh.vertices_can()[i];
                v[1] > 0.1 * HEAD_RADII[1] && v[2] < 0.8 * HEAD_RADII[2]
            })
            .collect();
        if !upper.is_empty() {
            for _ in 0..cfg.attached_points {
                let j = upper[rng.gen_range(0..upper.len())];
                let v = mesh.vertices_can()[j];
                let n = ellipsoid_normal(v);
                let off = rng.gen_range(0.015..0.05);
                let p = [v[0] + n.x * off, v[1] + n.y * off, v[2] + n.z * off];
                let q = normalize_quat([0, 1, 2, 3].map(|_| rng.gen_range(-1.0..1.0)));
                let s = [(0.035f64).ln(), (0.02f64).ln(), (0.012f64).ln()];
                let shade = rng.gen_range(0.7..1.1);
                let color = [0.3 * shade, 0.18 * shade, 0.1 * shade];
                cloud.push(p, q, s, logit(0.8), color, SourceTag::Background);
                motion.push(Motion::Follow { vertex: j, neighbours: mesh.knn_vertices(&p, k)?.indices });
            }
        }
        // backdrop plane behind the head, then a floor
        let (bx, by, bz) = ([-2.2, 2.2], [-1.0, 2.0], -1.0);
        let (fz, fy) = ([-1.0, 1.2], -1.0);
        let area_b = (bx[1] - bx[0]) * (by[1] - by[0]);
        let area_f = (bx[1] - bx[0]) * (fz[1] - fz[0]);
        let nb = ((cfg.background_points as f64) * area_b / (area_b + area_f)).round() as usize;
        let bg_spacing = ((area_b + area_f) / cfg.background_points.max(1) as f64).sqrt();
        let bg_t = (0.75 * bg_spacing).ln();
        let bg_n = (0.05 * bg_spacing).ln();
        for i in 0..cfg.background_points {
            let (p, nrm, color) = if i < nb {
                let p = [rng.gen_range(bx[0]..bx[1]), rng.gen_range(by[0]..by[1]), bz + rng.gen_range(-0.02..0.02)];
                (p, Vector3::z(), backdrop_color(p))
            } else {
                let p = [rng.gen_range(bx[0]..bx[1]), fy + rng.gen_range(-0.02..0.02), rng.gen_range(fz[0]..fz[1])];
                (p, Vector3::y(), floor_color(p))
            };
            let spin = rng.gen_range(0.0..std::f64::consts::PI);
            let q = quat_mul(frame_from_normal(nrm), [(0.5 * spin).cos(), 0.0, 0.0, (0.5 * spin).sin()]);
            cloud.push(p, q, [bg_t, bg_t, bg_n], logit(0.95), color, SourceTag::Background);
            motion.push(Motion::Static);
        }
        cloud.quantize_f32();
        Ok(ReferenceWorld { mesh, cloud, motion })
    }

    /// Deformed positions and rotations for vertex displacements `delta_v`.
    pub fn pose(&self, delta_v: &[[f64; 3]]) -> (Vec<[f64; 3]>, Vec<[f64; 4]>) {
        let moving = delta_v.iter().any(|d| *d != [0.0; 3]);
        let vc = self.mesh.vertices_can();
        let mut pos = self.cloud.positions.clone();
        let mut rot = self.cloud.rotations.clone();
        for (i, m) in self.motion.iter().enumerate() {
            let Motion::Follow { vertex, neighbours } = m else { continue };
            if !moving {
                continue;
            }
            for a in 0..3 {
                pos[i][a] += delta_v[*vertex][a];
            }
            let k = neighbours.len() as f64;
            let (mut cs, mut ct) = ([0.0; 3], [0.0; 3]);
            for &j in neighbours {
                for a in 0..3 {
                    cs[a] += vc[j][a] / k;
                    ct[a] += (vc[j][a] + delta_v[j][a]) / k;
                }
            }
            let mut h = Matrix3::zeros();
            for &j in neighbours {
                for r in 0..3 {
                    for c in 0..3 {
                        h[(r, c)] += (vc[j][r] - cs[r]) * (vc[j][c] + delta_v[j][c] - ct[c]);
                    }
                }
            }
            let q = matrix_to_quat(&rotation_from_cross_covariance(&h).rotation);
            rot[i] = normalize_quat(quat_mul(q, rot[i]));
        }
        (pos, rot)
    }

    pub fn render(&self, gamma_exp: &[f64], gamma_pose: &[f64; 4], camera: &Camera) -> Result<Image> {
        let dv = self.mesh.vertex_deformations(gamma_exp, gamma_pose)?;
        let (pos, rot) = self.pose(&dv.delta_v);
        let opac: Vec<f64> = (0..self.cloud.len()).map(|i| self.cloud.opacity(i)).collect();
        let splats = project_all(&pos, &rot, &self.cloud.log_scales, &opac, &self.cloud.colors, camera);
        Ok(render_reference(&splats, camera).image)
    }
}

/// Projected silhouette of the deformed mesh, dilated by `dilation` pixels.
pub fn silhouette_mask(vertices: &[[f64; 3]], faces: &[[u32; 3]], camera: &Camera, dilation: usize) -> Mask {
    let (w, h) = (camera.width, camera.height);
    let mut mask = Mask { width: w, height: h, data: vec![false; w * h] };
    let proj: Vec<Option<[f64; 2]>> = vertices
        .iter()
        .map(|v| {
            let p = camera.to_camera(&Vector3::from(*v));
            (p.z > camera.near_clip).then(|| [camera.fx * p.x / p.z + camera.cx, camera.fy * p.y / p.z + camera.cy])
        })
        .collect();
    for f in faces {
        let (Some(a), Some(b), Some(c)) = (proj[f[0] as usize], proj[f[1] as usize], proj[f[2] as usize]) else {
            continue;
        };
        let area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
        if area.abs() < 1e-12 {
            continue;
        }
        let x0 = a[0].min(b[0]).min(c[0]).floor().max(0.0) as usize;
        let x1 = (a[0].max(b[0]).max(c[0]).ceil().max(0.0) as usize).min(w);
        let y0 = a[1].min(b[1]).min(c[1]).floor().max(0.0) as usize;
        let y1 = (a[1].max(b[1]).max(c[1]).ceil().max(0.0) as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                let p = [x as f64 + 0.5, y as f64 + 0.5];
                let e = |u: [f64; 2], v: [f64; 2]| ((v[0] - u[0]) * (p[1] - u[1]) - (v[1] - u[1]) * (p[0] - u[0])) / area;
                if e(a, b) >= 0.0 && e(b, c) >= 0.0 && e(c, a) >= 0.0 {
                    mask.data[y * w + x] = true;
                }
            }
        }
    }
    dilate(&mask, dilation)
}

/// Euclidean-disc dilation.
pub fn dilate(mask: &Mask, radius: usize) -> Mask {
    let (w, h) = (mask.width, mask.height);
    let r = radius as isize;
    let mut out = mask.clone();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !mask.data[(y * w as isize + x) as usize] {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (x + dx, y + dy);
                    if dx * dx + dy * dy <= r * r && nx >= 0 && ny >= 0 && nx < w as isize && ny < h as isize {
                        out.data[(ny * w as isize + nx) as usize] = true;
                    }
                }
            }
        }
    }
    out
}

fn camera_on_orbit(cfg: &SynthConfig, yaw_deg: f64, radius: f64, height: f64) -> Camera {
    let yaw = yaw_deg.to_radians();
    let eye = [radius * yaw.sin(), height, radius * yaw.cos()];
    Camera::look_at(eye, [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], cfg.fov_y_deg, cfg.width, cfg.height)
}

/// Smooth random walk of rig parameters, reflected at the limits.
struct Walk {
    exp: Vec<f64>,
    pose: [f64; 4],
}

impl Walk {
    fn step(&mut self, rng: &mut ChaCha8Rng, cfg: &SynthConfig) {
        let head = cfg.head_angle_deg.to_radians();
        let jaw = cfg.jaw_angle_deg.to_radians();
        let reflect = |v: f64, lo: f64, hi: f64| {
            let v = if v > hi { 2.0 * hi - v } else { v };
            (if v < lo { 2.0 * lo - v } else { v }).clamp(lo, hi)
        };
        for e in &mut self.exp {
            *e = reflect(*e + rng.gen_range(-0.25..0.25), -1.0, 1.0);
        }
        self.pose[0] = reflect(self.pose[0] + rng.gen_range(-0.08..0.08), -head, head);
        self.pose[1] = reflect(self.pose[1] + rng.gen_range(-0.1..0.1), -head, head);
        self.pose[3] = reflect(self.pose[3] + rng.gen_range(-0.06..0.06), 0.0, jaw);
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SynthSummary {
    pub frames: usize,
    pub vertices: usize,
    pub reference_gaussians: usize,
    pub init_points: usize,
}

/// Writes a complete dataset directory. Frame 0 is the canonical rig state
/// seen from camera 0.
pub fn generate(cfg: &SynthConfig, out: &Path) -> Result<SynthSummary> {
    cfg.validate()?;
    let world = ReferenceWorld::build(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xda7a);
    for sub in ["frames", "masks", "mesh"] {
        fs::create_dir_all(out.join(sub)).map_err(|e| Error::io(out.join(sub), e))?;
    }
    world.mesh.save(&out.join("mesh"))?;

    let mut cameras = vec![camera_on_orbit(cfg, 0.0, 0.5 * (cfg.orbit_radius[0] + cfg.orbit_radius[1]), 0.1)];
    for i in 1..cfg.train_cameras {
        // spread the training cameras across the yaw range
        let t = i as f64 / (cfg.train_cameras.max(2) - 1) as f64;
        let yaw = -cfg.orbit_yaw_deg + 2.0 * cfg.orbit_yaw_deg * t;
        let r = rng.gen_range(cfg.orbit_radius[0]..=cfg.orbit_radius[1]);
        let hgt = rng.gen_range(cfg.orbit_height[0]..=cfg.orbit_height[1]);
        cameras.push(camera_on_orbit(cfg, yaw, r, hgt));
    }

    let e = cfg.expressions;
    let mut params = Vec::new();
    let mut walk = Walk { exp: vec![0.0; e], pose: [0.0; 4] };
    params.push(FrameParams { exp: vec![0.0; e], pose: [0.0; 4], camera_index: 0 });
    for _ in 1..cfg.train_frames {
        walk.step(&mut rng, cfg);
        let cam = rng.gen_range(0..cfg.train_cameras);
        params.push(FrameParams { exp: walk.exp.clone(), pose: walk.pose, camera_index: cam });
    }
    // setting 1: the frontal training camera with unseen rig states
    let mut held = Walk { exp: (0..e).map(|_| rng.gen_range(-0.5..0.5)).collect(), pose: [0.1, -0.1, 0.0, 0.1] };
    for _ in 0..cfg.setting1_frames {
        for _ in 0..3 {
            held.step(&mut rng, cfg);
        }
        params.push(FrameParams { exp: held.exp.clone(), pose: held.pose, camera_index: 0 });
    }
    // setting 2: unseen cameras with training rig states
    for _ in 0..cfg.setting2_frames {
        let yaw = rng.gen_range(-cfg.orbit_yaw_deg..cfg.orbit_yaw_deg);
        let r = rng.gen_range(cfg.orbit_radius[0]..=cfg.orbit_radius[1]);
        let hgt = rng.gen_range(cfg.orbit_height[0]..=cfg.orbit_height[1]);
        cameras.push(camera_on_orbit(cfg, yaw, r, hgt));
        let src = &params[rng.gen_range(0..cfg.train_frames)];
        params.push(FrameParams { exp: src.exp.clone(), pose: src.pose, camera_index: cameras.len() - 1 });
    }

    let t = cfg.train_frames;
    let s1 = cfg.setting1_frames;
    let splits = Splits {
        train: (0..t).collect(),
        setting1: (t..t + s1).collect(),
        setting2: (t + s1..params.len()).collect(),
    };
    for (i, p) in params.iter().enumerate() {
        let camera = &cameras[p.camera_index];
        let image = world.render(&p.exp, &p.pose, camera)?;
        image.save_png(&frame_png_path(out, i), PngEncoding::Gamma22)?;
        image.save_dump(&frame_dump_path(out, i))?;
        write_json(&frame_params_path(out, i), p)?;
        let verts = world.mesh.evaluate(&p.exp, &p.pose)?;
        silhouette_mask(&verts, world.mesh.faces(), camera, MASK_DILATION).save_png(&mask_path(out, i))?;
    }

    let jitter = Normal::new(0.0, cfg.init_point_jitter.max(0.0)).map_err(|e| Error::Argument(e.to_string()))?;
    let mut init = InitPoints::default();
    for (i, tag) in world.cloud.source_tags.iter().enumerate() {
        if *tag == SourceTag::Background {
            let p = world.cloud.positions[i];
            init.positions.push(p.map(|c| crate::scene::to_f32_grid(c + jitter.sample(&mut rng))));
            init.colors.push(world.cloud.colors[i]);
        }
    }
    write_json(&out.join("init_points.json"), &init)?;

    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        width: cfg.width,
        height: cfg.height,
        expression_count: e,
        frame_count: params.len(),
        splits,
        cameras,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    write_json(&out.join("synth_config.json"), cfg)?;
    Ok(SynthSummary {
        frames: params.len(),
        vertices: world.mesh.vertex_count(),
        reference_gaussians: world.cloud.len(),
        init_points: init.positions.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dilation_grows_a_point_to_a_disc() {
        let mut m = Mask { width: 9, height: 9, data: vec![false; 81] };
        m.data[4 * 9 + 4] = true;
        assert_eq!(dilate(&m, 2).count(), 13);
        assert_eq!(dilate(&m, 0), m);
    }

    #[test]
    fn canonical_pose_is_identity() {
        let cfg = SynthConfig { icosphere_subdivision: 1, background_points: 10, attached_points: 5, ..Default::default() };
        let w = ReferenceWorld::build(&cfg).unwrap();
        let (p, r) = w.pose(&vec![[0.0; 3]; w.mesh.vertex_count()]);
        assert_eq!(p, w.cloud.positions);
        assert_eq!(r, w.cloud.rotations);
    }
}
