//! Mesh-driven deformation of canonical Gaussians.
//!
//! Per Gaussian with K canonical nearest vertices, IDW weights `u`, mesh mask
//! `m = [dist < D]` and neighbour displacements `δv`:
//!
//! ```text
//! learnable:  Def = Σ wⱼ δvⱼ + η + T(i),   w = F(x) + m·u,  η = G(PE(x), PE(dwavg))
//! fixed:      Def = exp(-d²/2σ²)·dwavg + M(PE(x), γ),  σ = D/3
//! none:       Def = M(PE(x), γ)
//! R_def = R_mesh · exp([R*]×) · R_can   (R_mesh = I in none mode and outside the mask)
//! log S_def = log S_can + s,  S* = exp(s)
//! ```
//!
//! Network conditioning on `x_can` is detached: gradients reach the
//! canonical positions only through `x_def = x_can + Def`.

use std::str::FromStr;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::mesh::{idw_weights, kabsch::rotation_from_cross_covariance, MorphableMesh};
use crate::scene::matrix_to_quat;

/// ParamId base for deformation-field tensors.
pub const FIELD_PARAM_BASE: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorMode {
    Learnable,
    Fixed,
    None,
}

impl PriorMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PriorMode::Learnable => "learnable",
            PriorMode::Fixed => "fixed",
            PriorMode::None => "none",
        }
    }
}

impl FromStr for PriorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learnable" => Ok(PriorMode::Learnable),
            "fixed" => Ok(PriorMode::Fixed),
            "none" => Ok(PriorMode::None),
            other => Err(Error::Argument(format!("unknown prior mode {other:?} (learnable, fixed, none)"))),
        }
    }
}

impl std::fmt::Display for PriorMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformationConfig {
    pub k: usize,
    /// Far-field threshold on the distance to the mesh, world units.
    pub far_threshold: f64,
    pub pe_freqs_pos: usize,
    pub pe_freqs_def: usize,
    pub triplane_resolution: usize,
    pub triplane_channels: usize,
    pub mlp_hidden: usize,
    pub softplus_beta: f64,
    pub frame_code_dim: usize,
    pub prior_mode: PriorMode,
}

impl DeformationConfig {
    /// Defaults with `D = 0.15 ×` the mesh bounding radius.
    pub fn for_mesh(mesh: &MorphableMesh, prior_mode: PriorMode) -> Self {
        DeformationConfig {
            k: 10,
            far_threshold: 0.15 * mesh.bounding_radius(),
            pe_freqs_pos: 10,
            pe_freqs_def: 4,
            triplane_resolution: 64,
            triplane_channels: 16,
            mlp_hidden: 64,
            softplus_beta: 10.0,
            frame_code_dim: 16,
            prior_mode,
        }
    }

    pub fn validate(&self, vertex_count: usize) -> Result<()> {
        if self.k == 0 || self.k > vertex_count {
            return Err(Error::Argument(format!("K = {} must be in 1..={vertex_count}", self.k)));
        }
        if self.prior_mode != PriorMode::None && self.k < 3 {
            return Err(Error::Argument("the mesh rotation prior needs K >= 3".into()));
        }
        if !(self.far_threshold > 0.0) {
            return Err(Error::Argument(format!("far-field threshold must be positive, got {}", self.far_threshold)));
        }
        let sizes = [self.triplane_channels, self.mlp_hidden, self.frame_code_dim];
        if self.triplane_resolution < 2 || sizes.contains(&0) || !(self.softplus_beta > 0.0) {
            return Err(Error::Argument("deformation network sizes must be positive".into()));
        }
        Ok(())
    }
}

/// `x ++ [sin(2ˡπx), cos(2ˡπx)]` for `l = 0..L`, componentwise.
pub fn positional_encode(x: &[f64], freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() * (1 + 2 * freqs));
    out.extend_from_slice(x);
    for l in 0..freqs {
        let f = (1u64 << l) as f64 * std::f64::consts::PI;
        for &v in x {
            let (s, c) = (f * v).sin_cos();
            out.push(s);
            out.push(c);
        }
    }
    out
}

/// Axis-aligned box mapped to [-1, 1]³ for network inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub center: [f64; 3],
    pub half_extent: [f64; 3],
}

impl SceneBox {
    /// Bounding box of `points` padded by 5%.
    pub fn around(points: &[[f64; 3]]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let center = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])];
        let half_extent = [0, 1, 2].map(|a| (0.5 * (hi[a] - lo[a]) * 1.05).max(1e-6));
        SceneBox { center, half_extent }
    }

    pub fn normalize(&self, x: &[f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| ((x[a] - self.center[a]) / self.half_extent[a]).clamp(-1.0, 1.0))
    }

    /// Displacement scaled by the box (no centring).
    pub fn scale_offset(&self, d: &[f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| d[a] / self.half_extent[a])
    }
}

/// Per-point data fixed at creation: canonical KNN, IDW weights, mesh mask
/// and fixed-prior decay.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PriorCache {
    pub k: usize,
    /// N×K vertex indices.
    pub knn: Vec<usize>,
    pub knn_dist: Vec<f64>,
    /// N×K inverse-distance weights.
    pub idw: Vec<f64>,
    pub mesh_dist: Vec<f64>,
    pub near_mesh: Vec<bool>,
    pub decay: Vec<f64>,
}

impl PriorCache {
    pub fn build(mesh: &MorphableMesh, config: &DeformationConfig, points: &[[f64; 3]]) -> Result<Self> {
        let mut c = PriorCache { k: config.k, ..Default::default() };
        c.extend(mesh, config, points)?;
        Ok(c)
    }

    pub fn extend(&mut self, mesh: &MorphableMesh, config: &DeformationConfig, points: &[[f64; 3]]) -> Result<()> {
        let sigma = config.far_threshold / 3.0;
        for p in points {
            let r = mesh.knn_vertices(p, self.k)?;
            self.idw.extend(idw_weights(&r.distances));
            let d = r.distances[0];
            self.knn.extend(&r.indices);
            self.knn_dist.extend(&r.distances);
            self.mesh_dist.push(d);
            self.near_mesh.push(d < config.far_threshold);
            self.decay.push((-d * d / (2.0 * sigma * sigma)).exp());
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.mesh_dist.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mesh_dist.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> PriorCache {
        let k = self.k;
        let pick_k = |v: &[f64]| rows.iter().flat_map(|&r| v[r * k..(r + 1) * k].iter().copied()).collect::<Vec<_>>();
        PriorCache {
            k,
            knn: rows.iter().flat_map(|&r| self.knn[r * k..(r + 1) * k].iter().copied()).collect(),
            knn_dist: pick_k(&self.knn_dist),
            idw: pick_k(&self.idw),
            mesh_dist: rows.iter().map(|&r| self.mesh_dist[r]).collect(),
            near_mesh: rows.iter().map(|&r| self.near_mesh[r]).collect(),
            decay: rows.iter().map(|&r| self.decay[r]).collect(),
        }
    }

    /// Indices of points at or beyond the far-field threshold.
    pub fn far_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.near_mesh[i]).collect()
    }
}

/// Mesh state for one frame.
#[derive(Clone, Debug)]
pub struct FrameDrive {
    pub gamma_exp: Vec<f64>,
    pub gamma_pose: [f64; 4],
    pub delta_v: Vec<[f64; 3]>,
    /// Training frame whose per-frame code feeds T; `None` at inference.
    pub frame: Option<usize>,
}

impl FrameDrive {
    pub fn new(mesh: &MorphableMesh, gamma_exp: &[f64], gamma_pose: [f64; 4], frame: Option<usize>) -> Result<Self> {
        let dv = mesh.vertex_deformations(gamma_exp, &gamma_pose)?;
        Ok(FrameDrive { gamma_exp: gamma_exp.to_vec(), gamma_pose, delta_v: dv.delta_v, frame })
    }
}

/// Tape handles of the deformed Gaussians and the intermediate terms the
/// losses need.
pub struct Deformed {
    pub positions: Var,
    pub rotations: Var,
    pub log_scales: Var,
    /// N×3 total displacement.
    pub def: Var,
    /// N×3 mesh-prior part of `def` (learnable: Σ wδv; fixed: decayed IDW).
    pub prior: Option<Var>,
    pub eta: Option<Var>,
    /// 1×3 per-frame translation.
    pub t: Option<Var>,
    /// N×3 rotation correction (axis-angle).
    pub r_star: Var,
    /// N×3 raw log-scale correction.
    pub s_raw: Var,
    /// Rows whose Kabsch rotation was degenerate and fell back to identity.
    pub kabsch_degenerate: usize,
}

/// Canonical Gaussian tensors on the tape.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub positions: Var,
    /// Unit quaternions.
    pub rotations: Var,
    pub log_scales: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    pub config: DeformationConfig,
    pub scene_box: SceneBox,
    pub expression_count: usize,
    /// Frame indices with a T code, ascending; row `r` of `t.codes` belongs
    /// to `train_frames[r]`.
    pub train_frames: Vec<usize>,
    pub params: ParamStore,
}

struct Mlp {
    prefix: &'static str,
    layers: usize,
}

const F_HEAD: Mlp = Mlp { prefix: "f_head", layers: 2 };
const G_NET: Mlp = Mlp { prefix: "g", layers: 2 };
const T_NET: Mlp = Mlp { prefix: "t", layers: 2 };
const R_NET: Mlp = Mlp { prefix: "r_star", layers: 4 };
const S_NET: Mlp = Mlp { prefix: "s_star", layers: 4 };
const DIRECT_NET: Mlp = Mlp { prefix: "direct", layers: 4 };

const PLANES: [(&str, usize, usize); 3] = [("triplane.xy", 0, 1), ("triplane.xz", 0, 2), ("triplane.yz", 1, 2)];

impl DeformationField {
    /// Zero-output initialisation: hidden layers are Xavier-uniform, every
    /// output layer is zero.
    pub fn new(
        config: DeformationConfig,
        scene_box: SceneBox,
        expression_count: usize,
        train_frames: &[usize],
        seed: u64,
    ) -> Result<Self> {
        let mut train_frames = train_frames.to_vec();
        train_frames.sort_unstable();
        train_frames.dedup();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_def0);
        let mut params = ParamStore::new(FIELD_PARAM_BASE);
        let c = &config;
        let h = c.mlp_hidden;
        let uniform = |rng: &mut ChaCha8Rng, rows: usize, cols: usize, a: f64| {
            Tensor { rows, cols, data: (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect() }
        };
        let add_mlp = |rng: &mut ChaCha8Rng, params: &mut ParamStore, net: &Mlp, input: usize, output: usize| {
            let mut fan_in = input;
            for l in 0..net.layers {
                let last = l + 1 == net.layers;
                let fan_out = if last { output } else { h };
                let w = if last {
                    Tensor::zeros(fan_in, fan_out)
                } else {
                    uniform(rng, fan_in, fan_out, (6.0 / (fan_in + fan_out) as f64).sqrt())
                };
                params.insert(&format!("{}.{l}.w", net.prefix), w);
                params.insert(&format!("{}.{l}.b", net.prefix), Tensor::zeros(1, fan_out));
                fan_in = fan_out;
            }
        };
        let pos_dim = 3 * (1 + 2 * c.pe_freqs_pos);
        let def_dim = 3 * (1 + 2 * c.pe_freqs_def);
        let gamma_dim = expression_count + 4;
        match c.prior_mode {
            PriorMode::Learnable => {
                let cells = c.triplane_resolution * c.triplane_resolution;
                for (name, _, _) in PLANES {
                    params.insert(name, uniform(&mut rng, cells, c.triplane_channels, 0.1));
                }
                add_mlp(&mut rng, &mut params, &F_HEAD, 3 * c.triplane_channels, c.k);
                add_mlp(&mut rng, &mut params, &G_NET, pos_dim + def_dim, 3);
                let codes = Tensor {
                    rows: train_frames.len(),
                    cols: c.frame_code_dim,
                    data: (0..train_frames.len() * c.frame_code_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                };
                params.insert("t.codes", codes);
                add_mlp(&mut rng, &mut params, &T_NET, c.frame_code_dim, 3);
                add_mlp(&mut rng, &mut params, &R_NET, pos_dim + def_dim, 3);
                add_mlp(&mut rng, &mut params, &S_NET, pos_dim + def_dim, 3);
            }
            PriorMode::Fixed => {
                add_mlp(&mut rng, &mut params, &DIRECT_NET, pos_dim + gamma_dim, 3);
                add_mlp(&mut rng, &mut params, &R_NET, pos_dim + def_dim, 3);
                add_mlp(&mut rng, &mut params, &S_NET, pos_dim + def_dim, 3);
            }
            PriorMode::None => {
                add_mlp(&mut rng, &mut params, &DIRECT_NET, pos_dim + gamma_dim, 3);
                add_mlp(&mut rng, &mut params, &R_NET, pos_dim + gamma_dim, 3);
                add_mlp(&mut rng, &mut params, &S_NET, pos_dim + gamma_dim, 3);
            }
        }
        Ok(DeformationField { config, scene_box, expression_count, train_frames, params })
    }

    pub fn mode(&self) -> PriorMode {
        self.config.prior_mode
    }

    fn code_row(&self, frame: usize) -> Result<usize> {
        self.train_frames
            .binary_search(&frame)
            .map_err(|_| Error::Argument(format!("frame {frame} has no per-frame code (not a training frame)")))
    }

    fn mlp(&self, tape: &mut Tape, net: &Mlp, x: Var) -> Result<Var> {
        let mut h = x;
        for l in 0..net.layers {
            let w = self.params.bind(tape, &format!("{}.{l}.w", net.prefix))?;
            let b = self.params.bind(tape, &format!("{}.{l}.b", net.prefix))?;
            h = tape.affine(h, w, b)?;
            if l + 1 < net.layers {
                h = tape.softplus(h, self.config.softplus_beta);
            }
        }
        Ok(h)
    }

    /// Raw weight-field output `F(x)` (N×K) for normalised coordinates.
    fn weight_field(&self, tape: &mut Tape, xn: &[[f64; 3]]) -> Result<Var> {
        let res = self.config.triplane_resolution;
        let mut feats = Vec::with_capacity(3);
        for (name, a, b) in PLANES {
            let coords = Tensor { rows: xn.len(), cols: 2, data: xn.iter().flat_map(|p| [p[a], p[b]]).collect() };
            let cv = tape.constant(coords);
            let plane = self.params.bind(tape, name)?;
            feats.push(tape.grid_sample(plane, cv, res)?);
        }
        let f = tape.concat(&feats)?;
        self.mlp(tape, &F_HEAD, f)
    }

    /// T(i) as a 1×3 row.
    pub fn frame_translation(&self, tape: &mut Tape, frame: usize) -> Result<Var> {
        let row = self.code_row(frame)?;
        let codes = self.params.bind(tape, "t.codes")?;
        let code = tape.gather_rows(codes, &[row])?;
        self.mlp(tape, &T_NET, code)
    }

    fn pe_rows(&self, rows: impl Iterator<Item = Vec<f64>>, n: usize) -> Tensor {
        let data: Vec<f64> = rows.flatten().collect();
        let cols = if n == 0 { 0 } else { data.len() / n };
        Tensor { rows: n, cols, data }
    }

    /// Displacement `Def` for canonical points `x` with prior data `cache`.
    /// Returns `(def, prior, eta, dwavg)`.
    fn displacement(
        &self,
        tape: &mut Tape,
        x: &[[f64; 3]],
        cache: &PriorCache,
        drive: &FrameDrive,
        t: Option<Var>,
    ) -> Result<(Var, Option<Var>, Option<Var>, Vec<[f64; 3]>)> {
        let n = x.len();
        let k = cache.k;
        let c = &self.config;
        let xn: Vec<[f64; 3]> = x.iter().map(|p| self.scene_box.normalize(p)).collect();
        let dwavg: Vec<[f64; 3]> = (0..n)
            .map(|i| {
                let mut s = [0.0; 3];
                for j in 0..k {
                    let d = drive.delta_v[cache.knn[i * k + j]];
                    let w = cache.idw[i * k + j];
                    for a in 0..3 {
                        s[a] += w * d[a];
                    }
                }
                s
            })
            .collect();
        let pe_x = self.pe_rows(xn.iter().map(|p| positional_encode(p, c.pe_freqs_pos)), n);
        let (def, prior, eta) = match c.prior_mode {
            PriorMode::Learnable => {
                let f_raw = self.weight_field(tape, &xn)?;
                let mut mu = Tensor::zeros(n, k);
                for i in 0..n {
                    if cache.near_mesh[i] {
                        mu.row_mut(i).copy_from_slice(&cache.idw[i * k..(i + 1) * k]);
                    }
                }
                let w = tape.add_const(f_raw, &mu)?;
                let mut dmat = Tensor::zeros(n, 3 * k);
                for i in 0..n {
                    let r = dmat.row_mut(i);
                    for j in 0..k {
                        r[3 * j..3 * j + 3].copy_from_slice(&drive.delta_v[cache.knn[i * k + j]]);
                    }
                }
                let prior = tape.row_contract(w, dmat)?;
                let input = self.conditioning(tape, &pe_x, &dwavg, drive)?;
                let eta = self.mlp(tape, &G_NET, input)?;
                let mut def = tape.add(prior, eta)?;
                if let Some(t) = t {
                    def = tape.add_row(def, t)?;
                }
                (def, Some(prior), Some(eta))
            }
            PriorMode::Fixed | PriorMode::None => {
                let gamma: Vec<f64> = drive.gamma_exp.iter().chain(&drive.gamma_pose).copied().collect();
                let mut inp = Tensor::zeros(n, pe_x.cols + gamma.len());
                for i in 0..n {
                    let r = inp.row_mut(i);
                    r[..pe_x.cols].copy_from_slice(pe_x.row(i));
                    r[pe_x.cols..].copy_from_slice(&gamma);
                }
                let iv = tape.constant(inp);
                let direct = self.mlp(tape, &DIRECT_NET, iv)?;
                if c.prior_mode == PriorMode::Fixed {
                    let mut pc = Tensor::zeros(n, 3);
                    for i in 0..n {
                        for a in 0..3 {
                            pc.data[i * 3 + a] = cache.decay[i] * dwavg[i][a];
                        }
                    }
                    let prior = tape.constant(pc.clone());
                    (tape.add_const(direct, &pc)?, Some(prior), None)
                } else {
                    (direct, None, None)
                }
            }
        };
        Ok((def, prior, eta, dwavg))
    }

    /// Input to G, R* and S*: `PE(x) ++ PE(dwavg)`, or `PE(x) ++ γ` without a prior.
    fn conditioning(&self, tape: &mut Tape, pe_x: &Tensor, dwavg: &[[f64; 3]], drive: &FrameDrive) -> Result<Var> {
        let n = pe_x.rows;
        let extra: Vec<Vec<f64>> = if self.config.prior_mode == PriorMode::None {
            let gamma: Vec<f64> = drive.gamma_exp.iter().chain(&drive.gamma_pose).copied().collect();
            vec![gamma; n]
        } else {
            dwavg.iter().map(|d| positional_encode(&self.scene_box.scale_offset(d), self.config.pe_freqs_def)).collect()
        };
        let ec = extra.first().map_or(0, Vec::len);
        let mut inp = Tensor::zeros(n, pe_x.cols + ec);
        for i in 0..n {
            let r = inp.row_mut(i);
            r[..pe_x.cols].copy_from_slice(pe_x.row(i));
            r[pe_x.cols..].copy_from_slice(&extra[i]);
        }
        Ok(tape.constant(inp))
    }

    /// Deforms every Gaussian. `x_can` are the current canonical positions
    /// (network inputs); `cache` holds their fixed prior data.
    pub fn deform(
        &self,
        tape: &mut Tape,
        mesh: &MorphableMesh,
        gauss: GaussianVars,
        cache: &PriorCache,
        drive: &FrameDrive,
    ) -> Result<Deformed> {
        let x_can = tape.value(gauss.positions).to_rows::<3>();
        if cache.len() != x_can.len() {
            return Err(Error::Shape(format!("prior cache has {} rows for {} gaussians", cache.len(), x_can.len())));
        }
        mesh.check_params(&drive.gamma_exp)?;
        let t = match (self.mode(), drive.frame) {
            (PriorMode::Learnable, Some(f)) => Some(self.frame_translation(tape, f)?),
            _ => None,
        };
        let (def, prior, eta, dwavg) = self.displacement(tape, &x_can, cache, drive, t)?;
        let positions = tape.add(gauss.positions, def)?;

        let n = x_can.len();
        let xn: Vec<[f64; 3]> = x_can.iter().map(|p| self.scene_box.normalize(p)).collect();
        let pe_x = self.pe_rows(xn.iter().map(|p| positional_encode(p, self.config.pe_freqs_pos)), n);
        let cond = self.conditioning(tape, &pe_x, &dwavg, drive)?;
        let r_star = self.mlp(tape, &R_NET, cond)?;
        let s_raw = self.mlp(tape, &S_NET, cond)?;

        let (q_mesh, degenerate) = self.mesh_rotations(mesh, cache, drive);
        let qr = tape.axis_angle_to_quat(r_star)?;
        let qm = tape.constant(q_mesh);
        let q_prior = tape.quat_mul(qm, qr)?;
        let q = tape.quat_mul(q_prior, gauss.rotations)?;
        let rotations = tape.quat_normalize(q)?;
        let log_scales = tape.add(gauss.log_scales, s_raw)?;
        Ok(Deformed { positions, rotations, log_scales, def, prior, eta, t, r_star, s_raw, kabsch_degenerate: degenerate })
    }

    /// Per-row Kabsch quaternion of the canonical→deformed neighbour set;
    /// identity outside the mesh mask and in `none` mode.
    pub fn mesh_rotations(&self, mesh: &MorphableMesh, cache: &PriorCache, drive: &FrameDrive) -> (Tensor, usize) {
        let n = cache.len();
        let k = cache.k;
        let mut out = Tensor::zeros(n, 4);
        let mut degenerate = 0;
        let vc = mesh.vertices_can();
        for i in 0..n {
            out.data[i * 4] = 1.0;
            if self.mode() == PriorMode::None || !cache.near_mesh[i] {
                continue;
            }
            if drive.delta_v.iter().all(|d| *d == [0.0; 3]) {
                continue;
            }
            let idx = &cache.knn[i * k..(i + 1) * k];
            let (mut cs, mut ct) = ([0.0; 3], [0.0; 3]);
            for &j in idx {
                for a in 0..3 {
                    cs[a] += vc[j][a] / k as f64;
                    ct[a] += (vc[j][a] + drive.delta_v[j][a]) / k as f64;
                }
            }
            let mut h = Matrix3::zeros();
            for &j in idx {
                for r in 0..3 {
                    for c in 0..3 {
                        h[(r, c)] += (vc[j][r] - cs[r]) * (vc[j][c] + drive.delta_v[j][c] - ct[c]);
                    }
                }
            }
            let res = rotation_from_cross_covariance(&h);
            if res.degenerate {
                degenerate += 1;
            }
            out.row_mut(i).copy_from_slice(&matrix_to_quat(&res.rotation));
        }
        (out, degenerate)
    }

    /// `Def` at the canonical mesh vertices (rows of `vertex_cache`), for L_FLAME.
    pub fn vertex_displacement(
        &self,
        tape: &mut Tape,
        mesh: &MorphableMesh,
        vertex_cache: &PriorCache,
        drive: &FrameDrive,
        t: Option<Var>,
    ) -> Result<Var> {
        let (def, _, _, _) = self.displacement(tape, mesh.vertices_can(), vertex_cache, drive, t)?;
        Ok(def)
    }

    /// Weights `w = F(x) + m·u` for one point.
    pub fn predict_weights(&self, mesh: &MorphableMesh, x_can: [f64; 3]) -> Result<Vec<f64>> {
        if self.mode() != PriorMode::Learnable {
            return Err(Error::Argument(format!("prior mode {} has no weight field", self.mode())));
        }
        let cache = PriorCache::build(mesh, &self.config, &[x_can])?;
        let mut tape = Tape::new();
        let f = self.weight_field(&mut tape, &[self.scene_box.normalize(&x_can)])?;
        let mut w = tape.value(f).data.clone();
        if cache.near_mesh[0] {
            for (wj, u) in w.iter_mut().zip(&cache.idw) {
                *wj += u;
            }
        }
        Ok(w)
    }

    /// Deforms a single Gaussian outside of training.
    pub fn deform_point(
        &self,
        mesh: &MorphableMesh,
        x_can: [f64; 3],
        q_can: [f64; 4],
        log_scale_can: [f64; 3],
        drive: &FrameDrive,
    ) -> Result<PointDeformation> {
        let cache = PriorCache::build(mesh, &self.config, &[x_can])?;
        let mut tape = Tape::new();
        let gauss = GaussianVars {
            positions: tape.constant(Tensor::from_rows(&[x_can])),
            rotations: tape.constant(Tensor::from_rows(&[crate::scene::normalize_quat(q_can)])),
            log_scales: tape.constant(Tensor::from_rows(&[log_scale_can])),
        };
        let d = self.deform(&mut tape, mesh, gauss, &cache, drive)?;
        let row3 = |v: Var| -> [f64; 3] { tape.value(v).to_rows::<3>()[0] };
        Ok(PointDeformation {
            position: row3(d.positions),
            rotation: tape.value(d.rotations).to_rows::<4>()[0],
            log_scale: row3(d.log_scales),
            prior_term: d.prior.map_or([0.0; 3], row3),
            eta: d.eta.map_or([0.0; 3], row3),
            t: d.t.map_or([0.0; 3], row3),
            r_star: row3(d.r_star),
            s_raw: row3(d.s_raw),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointDeformation {
    pub position: [f64; 3],
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
    pub prior_term: [f64; 3],
    pub eta: [f64; 3],
    pub t: [f64; 3],
    pub r_star: [f64; 3],
    pub s_raw: [f64; 3],
}

/// `Σ wⱼ δvⱼ + η + t`.
pub fn compose_displacement(weights: &[f64], deltas: &[[f64; 3]], eta: [f64; 3], t: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (w, d) in weights.iter().zip(deltas) {
        for a in 0..3 {
            out[a] += w * d[a];
        }
    }
    [0, 1, 2].map(|a| out[a] + eta[a] + t[a])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_encoding_examples() {
        let z = positional_encode(&[0.0; 3], 10);
        assert_eq!(z.len(), 63);
        assert_eq!(&z[..3], &[0.0; 3]);
        for l in 0..10 {
            for a in 0..3 {
                assert_eq!(z[3 + l * 6 + 2 * a], 0.0);
                assert_eq!(z[3 + l * 6 + 2 * a + 1], 1.0);
            }
        }
        let h = positional_encode(&[0.5], 1);
        assert_eq!(h[0], 0.5);
        assert!((h[1] - 1.0).abs() < 1e-15 && h[2].abs() < 1e-15);
        assert_eq!(positional_encode(&[0.1, 0.2, 0.3], 4).len(), 27);
    }

    #[test]
    fn compose_examples() {
        assert_eq!(compose_displacement(&[1.0], &[[0.1, 0.0, 0.0]], [0.0; 3], [0.0; 3]), [0.1, 0.0, 0.0]);
        let d = compose_displacement(&[0.5, 0.5], &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], [0.0; 3], [0.0; 3]);
        assert_eq!(d, [0.5, 0.5, 0.0]);
        assert_eq!(compose_displacement(&[0.0; 4], &[[1.0; 3]; 4], [0.0; 3], [0.0; 3]), [0.0; 3]);
    }

    #[test]
    fn prior_mode_parses() {
        assert_eq!("fixed".parse::<PriorMode>().unwrap(), PriorMode::Fixed);
        assert!("rigid".parse::<PriorMode>().is_err());
    }
}
