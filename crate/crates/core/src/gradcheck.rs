//! Central finite-difference checks for every differentiable op.
//!
//! Each check draws random instances, contracts the op output with a random
//! weight tensor `W` and compares the tape gradient of `Σ W ⊙ out` against
//! central differences. The error is normwise per input tensor:
//! `‖g_tape − g_fd‖ / max(‖g_tape‖, ‖g_fd‖, 1e-6)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::deform::{DeformationConfig, DeformationField, FrameDrive, GaussianVars, PriorCache, PriorMode, SceneBox};
use crate::error::{Error, Result};
use crate::imgbuf::Image;
use crate::losses;
use crate::mesh::{stand_in_head, MorphableMesh};
use crate::raster::op::rasterize;
use crate::raster::{project_all, threshold_margin};
use crate::scene::{normalize_quat, Camera};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const NORM_FLOOR: f64 = 1e-6;
/// Instances whose blending state lies this close (in log-α / log-T) to a
/// rasterizer threshold are redrawn.
const RASTER_MARGIN: f64 = 1e-4;
const MAX_ATTEMPTS_PER_INSTANCE: usize = 50;

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    /// Draws discarded for sitting on a discontinuity.
    pub rejected: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub step: f64,
    /// Entries probed per parameter tensor; larger tensors are subsampled.
    pub max_entries: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { instances: 20, seed: 0, tolerance: DEFAULT_TOLERANCE, step: 1e-6, max_entries: 24 }
    }
}

type Build<'a> = dyn Fn(&ParamStore, &mut Tape) -> Result<Var> + 'a;

/// One finite-difference instance: the largest per-tensor relative error.
pub fn check_instance(params: &ParamStore, build: &Build, cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut tape = Tape::new();
    let out = build(params, &mut tape)?;
    let (r, c) = tape.shape(out);
    let w = Tensor { rows: r, cols: c, data: (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let grads = tape.backward_with(out, w.clone())?.params();
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let o = build(p, &mut t)?;
        Ok(t.value(o).data.iter().zip(&w.data).map(|(a, b)| a * b).sum())
    };
    let mut work = params.clone();
    let mut worst: f64 = 0.0;
    for (id, _, t) in params.iter() {
        let analytic = grads.get(&id).cloned().unwrap_or_else(|| Tensor::zeros(t.rows, t.cols));
        let entries = pick_entries(&analytic, cfg.max_entries, rng);
        let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
        for e in entries {
            let x0 = t.data[e];
            work.by_id_mut(id).data[e] = x0 + cfg.step;
            let fp = eval(&work)?;
            work.by_id_mut(id).data[e] = x0 - cfg.step;
            let fm = eval(&work)?;
            work.by_id_mut(id).data[e] = x0;
            let fd = (fp - fm) / (2.0 * cfg.step);
            let a = analytic.data[e];
            diff += (a - fd) * (a - fd);
            na += a * a;
            nf += fd * fd;
        }
        let rel = diff.sqrt() / na.sqrt().max(nf.sqrt()).max(NORM_FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// All entries, or half the budget on the largest analytic gradients and the
/// rest uniformly at random.
fn pick_entries(analytic: &Tensor, budget: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = analytic.data.len();
    if n <= budget {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| analytic.data[b].abs().total_cmp(&analytic.data[a].abs()).then(a.cmp(&b)));
    let mut out: Vec<usize> = idx[..budget / 2].to_vec();
    while out.len() < budget {
        let e = rng.gen_range(0..n);
        if !out.contains(&e) {
            out.push(e);
        }
    }
    out
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor { rows, cols, data: (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect() }
}

fn store(inputs: Vec<Tensor>) -> ParamStore {
    let mut s = ParamStore::new(0);
    for (i, t) in inputs.into_iter().enumerate() {
        s.insert(&format!("in{i}"), t);
    }
    s
}

fn bind_all(p: &ParamStore, tape: &mut Tape) -> Result<Vec<Var>> {
    (0..p.len()).map(|i| p.bind(tape, &format!("in{i}"))).collect()
}

fn simple(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Option<(ParamStore, Box<Build<'static>>)> {
    let build = move |p: &ParamStore, tape: &mut Tape| {
        let v = bind_all(p, tape)?;
        f(tape, &v)
    };
    Some((store(inputs), Box::new(build)))
}

fn away_from(t: &Tensor, points: &[f64], gap: f64) -> bool {
    t.data.iter().all(|v| points.iter().all(|p| (v - p).abs() > gap))
}

fn draw_affine(rng: &mut ChaCha8Rng) -> Option<(ParamStore, Box<Build<'static>>)> {
    let (n, i, o) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..5));
    simple(vec![uniform(rng, n, i, -1.0, 1.0), uniform(rng, i, o, -1.0, 1.0), uniform(rng, 1, o, -1.0, 1.0)], |t, v| {
        t.affine(v[0], v[1], v[2])
    })
}

fn draw_unary(rng: &mut ChaCha8Rng, lo: f64, hi: f64, f: fn(&mut Tape, Var) -> Var) -> Option<(ParamStore, Box<Build<'static>>)> {
    let (n, c) = (rng.gen_range(1..6), rng.gen_range(1..5));
    simple(vec![uniform(rng, n, c, lo, hi)], move |t, v| Ok(f(t, v[0])))
}

fn draw_binary(
    rng: &mut ChaCha8Rng,
    f: fn(&mut Tape, Var, Var) -> Result<Var>,
    b_lo: f64,
) -> Option<(ParamStore, Box<Build<'static>>)> {
    let (n, c) = (rng.gen_range(1..6), rng.gen_range(1..5));
    let a = uniform(rng, n, c, -1.0, 1.0);
    let mut b = uniform(rng, n, c, b_lo, 1.0);
    if b_lo > 0.0 && rng.gen_bool(0.5) {
        b = b.map(|x| -x);
    }
    simple(vec![a, b], move |t, v| f(t, v[0], v[1]))
}

fn draw_grid_sample(rng: &mut ChaCha8Rng) -> Option<(ParamStore, Box<Build<'static>>)> {
    let res = rng.gen_range(2..7);
    let ch = rng.gen_range(1..4);
    let n = rng.gen_range(1..6);
    let plane = uniform(rng, res * res, ch, -1.0, 1.0);
    let coords = uniform(rng, n, 2, -0.98, 0.98);
    // texel edges are kinks
    let on_edge = coords.data.iter().any(|c| {
        let u = (c + 1.0) * 0.5 * (res - 1) as f64;
        (u - u.round()).abs() < 1e-4
    });
    if on_edge {
        return None;
    }
    simple(vec![plane, coords], move |t, v| t.grid_sample(v[0], v[1], res))
}

fn draw_axis_angle(rng: &mut ChaCha8Rng, quat: bool) -> Option<(ParamStore, Box<Build<'static>>)> {
    let n = rng.gen_range(1..5);
    let mut x = uniform(rng, n, 3, -2.0, 2.0);
    // exercise the small-angle series
    if rng.gen_bool(0.5) {
        x.row_mut(0).iter_mut().for_each(|v| *v *= 1e-4);
    }
    if quat {
        simple(vec![x], |t, v| t.axis_angle_to_quat(v[0]))
    } else {
        simple(vec![x], |t, v| t.axis_angle_to_matrix(v[0]))
    }
}

fn draw_mlp(rng: &mut ChaCha8Rng) -> Option<(ParamStore, Box<Build<'static>>)> {
    let (n, i, h, o) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(2..9), rng.gen_range(1..4));
    let inputs = vec![
        uniform(rng, n, i, -1.0, 1.0),
        uniform(rng, i, h, -1.0, 1.0),
        uniform(rng, 1, h, -0.5, 0.5),
        uniform(rng, h, o, -1.0, 1.0),
        uniform(rng, 1, o, -0.5, 0.5),
    ];
    simple(inputs, |t, v| {
        let a = t.affine(v[0], v[1], v[2])?;
        let s = t.softplus(a, 10.0);
        t.affine(s, v[3], v[4])
    })
}

pub fn gradcheck_camera(size: usize) -> Camera {
    Camera::look_at([0.3, -0.2, -3.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], 45.0, size, size)
}

/// Random scene of at most 8 splats on a 16×16 image.
fn draw_raster(rng: &mut ChaCha8Rng) -> Option<(ParamStore, Box<Build<'static>>)> {
    let n = rng.gen_range(1..=8);
    let camera = gradcheck_camera(16);
    let pos = uniform(rng, n, 3, -0.6, 0.6);
    let quats: Vec<[f64; 4]> = (0..n)
        .map(|_| normalize_quat([0, 1, 2, 3].map(|_| rng.gen_range(-1.0..1.0))))
        .collect();
    let ls = uniform(rng, n, 3, (0.06f64).ln(), (0.3f64).ln());
    let op = Tensor { rows: n, cols: 1, data: (0..n).map(|_| rng.gen_range(0.2..0.9995)).collect() };
    let col = uniform(rng, n, 3, 0.0, 1.0);
    let splats = project_all(
        &pos.to_rows::<3>(),
        &quats,
        &ls.to_rows::<3>(),
        &op.data,
        &col.to_rows::<3>(),
        &camera,
    );
    if splats.is_empty() || threshold_margin(&splats, &camera) < RASTER_MARGIN {
        return None;
    }
    let q = Tensor::from_rows(&quats);
    simple(vec![pos, q, ls, op, col], move |t, v| rasterize(t, &camera, [v[0], v[1], v[2], v[3], v[4]]))
}

fn draw_dssim(rng: &mut ChaCha8Rng) -> Option<(ParamStore, Box<Build<'static>>)> {
    let (w, h) = (rng.gen_range(11..17), rng.gen_range(11..17));
    let gt = Image::from_data(w, h, (0..w * h * 3).map(|_| rng.gen_range(0.0..1.0)).collect()).ok()?;
    let pred = uniform(rng, w * h, 3, 0.0, 1.0);
    simple(vec![pred], move |t, v| losses::dssim(t, v[0], &gt))
}

struct DeformFixture {
    mesh: MorphableMesh,
}

fn draw_deform(rng: &mut ChaCha8Rng, mode: PriorMode, fx: &DeformFixture) -> Option<(ParamStore, Box<Build<'static>>)> {
    let mesh = fx.mesh.clone();
    let mut cfg = DeformationConfig::for_mesh(&mesh, mode);
    cfg.k = 4;
    cfg.triplane_resolution = 6;
    cfg.triplane_channels = 3;
    cfg.mlp_hidden = 6;
    cfg.frame_code_dim = 3;
    cfg.pe_freqs_pos = 3;
    cfg.pe_freqs_def = 2;
    let n = rng.gen_range(2..6);
    // mix of points on the surface and far away
    let points: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            let v = mesh.vertices_can()[rng.gen_range(0..mesh.vertex_count())];
            let s = if i % 2 == 0 { 1.0 + rng.gen_range(-0.05..0.05) } else { 1.8 };
            v.map(|c| c * s)
        })
        .collect();
    let scene_box = SceneBox::around(&[points.clone(), mesh.vertices_can().to_vec()].concat());
    let mut field = DeformationField::new(cfg.clone(), scene_box, mesh.expression_count(), &[0, 3], rng.gen()).ok()?;
    // leave the zero initialisation, otherwise hidden-layer gradients vanish
    for (_, t) in field.params.iter_mut() {
        t.data.iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
    }
    let cache = PriorCache::build(&mesh, &cfg, &points).ok()?;
    let gamma: Vec<f64> = (0..mesh.expression_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let pose = [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), 0.0, rng.gen_range(0.0..0.3)];
    let drive = FrameDrive::new(&mesh, &gamma, pose, Some(3)).ok()?;
    let quats: Vec<[f64; 4]> = (0..n).map(|_| normalize_quat([0, 1, 2, 3].map(|_| rng.gen_range(-1.0..1.0)))).collect();
    let canon = [Tensor::from_rows(&points), Tensor::from_rows(&quats), uniform(rng, n, 3, -3.0, -1.0)];
    let shell = field.clone();
    let build = move |p: &ParamStore, tape: &mut Tape| {
        let mut f = shell.clone();
        f.params = p.clone();
        let g = GaussianVars {
            positions: tape.constant(canon[0].clone()),
            rotations: tape.constant(canon[1].clone()),
            log_scales: tape.constant(canon[2].clone()),
        };
        let d = f.deform(tape, &mesh, g, &cache, &drive)?;
        tape.concat(&[d.positions, d.rotations, d.log_scales])
    };
    Some((field.params, Box::new(build)))
}

/// Names of the registered checks, in run order.
pub const CHECKS: [&str; 33] = [
    "affine", "softplus", "sin", "cos", "exp", "sigmoid", "abs", "square", "scale", "add", "sub", "mul", "div",
    "add_row", "mul_const", "add_const", "sum", "mean", "row_sum", "concat", "gather_rows", "clamp", "grid_sample",
    "axis_angle_to_matrix", "axis_angle_to_quat", "quat_mul", "quat_normalize", "mat3_mul_const_left",
    "row_contract", "mlp2", "rasterize", "dssim", "deform",
];

fn draw(name: &str, rng: &mut ChaCha8Rng, fx: &DeformFixture) -> Result<Option<(ParamStore, Box<Build<'static>>)>> {
    let (n, c) = (rng.gen_range(1..6), rng.gen_range(1..5));
    let r = match name {
        "affine" => draw_affine(rng),
        "softplus" => {
            let beta = if rng.gen_bool(0.5) { 10.0 } else { 1.0 };
            simple(vec![uniform(rng, n, c, -1.0, 1.0)], move |t, v| Ok(t.softplus(v[0], beta)))
        }
        "sin" => draw_unary(rng, -3.0, 3.0, Tape::sin),
        "cos" => draw_unary(rng, -3.0, 3.0, Tape::cos),
        "exp" => draw_unary(rng, -2.0, 2.0, Tape::exp),
        "sigmoid" => draw_unary(rng, -4.0, 4.0, Tape::sigmoid),
        "abs" => {
            let x = uniform(rng, n, c, -1.0, 1.0);
            if !away_from(&x, &[0.0], 1e-3) {
                return Ok(None);
            }
            simple(vec![x], |t, v| Ok(t.abs(v[0])))
        }
        "square" => draw_unary(rng, -2.0, 2.0, Tape::square),
        "scale" => draw_unary(rng, -2.0, 2.0, |t, x| t.scale(x, -1.7)),
        "add" => draw_binary(rng, Tape::add, -1.0),
        "sub" => draw_binary(rng, Tape::sub, -1.0),
        "mul" => draw_binary(rng, Tape::mul, -1.0),
        "div" => draw_binary(rng, Tape::div, 0.3),
        "add_row" => simple(vec![uniform(rng, n, c, -1.0, 1.0), uniform(rng, 1, c, -1.0, 1.0)], |t, v| t.add_row(v[0], v[1])),
        "mul_const" => {
            let k = uniform(rng, n, c, -2.0, 2.0);
            simple(vec![uniform(rng, n, c, -1.0, 1.0)], move |t, v| t.mul_const(v[0], k.clone()))
        }
        "add_const" => {
            let k = uniform(rng, n, c, -2.0, 2.0);
            simple(vec![uniform(rng, n, c, -1.0, 1.0)], move |t, v| t.add_const(v[0], &k))
        }
        "sum" => draw_unary(rng, -1.0, 1.0, Tape::sum),
        "mean" => draw_unary(rng, -1.0, 1.0, Tape::mean),
        "row_sum" => draw_unary(rng, -1.0, 1.0, Tape::row_sum),
        "concat" => {
            let parts = (0..rng.gen_range(1..4))
                .map(|_| {
                    let w = rng.gen_range(1..4);
                    uniform(rng, n, w, -1.0, 1.0)
                })
                .collect();
            simple(parts, |t, v| t.concat(v))
        }
        "gather_rows" => {
            let idx: Vec<usize> = (0..rng.gen_range(1..8)).map(|_| rng.gen_range(0..n)).collect();
            simple(vec![uniform(rng, n, c, -1.0, 1.0)], move |t, v| t.gather_rows(v[0], &idx))
        }
        "clamp" => {
            let x = uniform(rng, n, c, -1.0, 1.0);
            if !away_from(&x, &[-0.5, 0.5], 1e-3) {
                return Ok(None);
            }
            simple(vec![x], |t, v| Ok(t.clamp(v[0], -0.5, 0.5)))
        }
        "grid_sample" => draw_grid_sample(rng),
        "axis_angle_to_matrix" => draw_axis_angle(rng, false),
        "axis_angle_to_quat" => draw_axis_angle(rng, true),
        "quat_mul" => simple(vec![uniform(rng, n, 4, -1.0, 1.0), uniform(rng, n, 4, -1.0, 1.0)], |t, v| t.quat_mul(v[0], v[1])),
        "quat_normalize" => {
            let x = uniform(rng, n, 4, -1.0, 1.0);
            if x.data.chunks(4).any(|q| q.iter().map(|v| v * v).sum::<f64>() < 0.05) {
                return Ok(None);
            }
            simple(vec![x], |t, v| t.quat_normalize(v[0]))
        }
        "mat3_mul_const_left" => {
            let k = uniform(rng, n, 9, -1.0, 1.0);
            simple(vec![uniform(rng, n, 9, -1.0, 1.0)], move |t, v| t.mat3_mul_const_left(v[0], k.clone()))
        }
        "row_contract" => {
            let d = uniform(rng, n, 3 * c, -1.0, 1.0);
            simple(vec![uniform(rng, n, c, -1.0, 1.0)], move |t, v| t.row_contract(v[0], d.clone()))
        }
        "mlp2" => draw_mlp(rng),
        "rasterize" => draw_raster(rng),
        "dssim" => draw_dssim(rng),
        "deform" => {
            let mode = [PriorMode::Learnable, PriorMode::Fixed, PriorMode::None][rng.gen_range(0..3)];
            draw_deform(rng, mode, fx)
        }
        other => return Err(Error::Argument(format!("unknown gradient check {other}"))),
    };
    Ok(r)
}

/// Runs one named check over `cfg.instances` accepted draws.
pub fn run_check(name: &str, cfg: &GradcheckConfig) -> Result<CheckReport> {
    let fx = DeformFixture { mesh: stand_in_head(1, 3, 11)? };
    let salt = CHECKS.iter().position(|c| *c == name).unwrap_or(CHECKS.len()) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt);
    let mut report = CheckReport { name: name.to_string(), instances: 0, rejected: 0, max_rel_error: 0.0, passed: false };
    while report.instances < cfg.instances {
        if report.rejected > MAX_ATTEMPTS_PER_INSTANCE * cfg.instances.max(1) {
            return Err(Error::Training(format!("gradient check {name}: could not draw a smooth instance")));
        }
        let Some((params, build)) = draw(name, &mut rng, &fx)? else {
            report.rejected += 1;
            continue;
        };
        let err = check_instance(&params, build.as_ref(), cfg, &mut rng)?;
        report.max_rel_error = report.max_rel_error.max(if err.is_finite() { err } else { f64::INFINITY });
        report.instances += 1;
    }
    report.passed = report.max_rel_error < cfg.tolerance;
    Ok(report)
}

/// Every registered check, in [`CHECKS`] order.
pub fn run_all(cfg: &GradcheckConfig) -> Result<Vec<CheckReport>> {
    CHECKS.iter().map(|name| run_check(name, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        use crate::autodiff::CustomOp;
        struct Wrong;
        impl CustomOp for Wrong {
            fn name(&self) -> &'static str {
                "wrong"
            }
            fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
                vec![Some(inputs[0].map(|x| 3.0 * x * x * g.item()))]
            }
            fn as_any(&self) -> &dyn std::any::Any {
                self
            }
        }
        let p = store(vec![Tensor::from_rows(&[[0.7, -0.4]])]);
        let build = |p: &ParamStore, t: &mut Tape| {
            let v = p.bind(t, "in0")?;
            let s: f64 = t.value(v).data.iter().map(|x| x * x).sum();
            Ok(t.custom(Box::new(Wrong), &[v], Tensor::scalar(s)))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = check_instance(&p, &build, &GradcheckConfig::default(), &mut rng).unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn a_few_ops_pass() {
        let cfg = GradcheckConfig { instances: 3, ..Default::default() };
        for name in ["affine", "softplus", "grid_sample", "rasterize", "dssim"] {
            let r = run_check(name, &cfg).unwrap();
            assert!(r.passed, "{r:?}");
        }
    }
}
