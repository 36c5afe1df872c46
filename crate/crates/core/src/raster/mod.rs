//! CPU splatting rasterizer with a hand-derived backward pass.
//!
//! Pixel `(x, y)` is sampled at `(x + 0.5, y + 0.5)`. Per pixel, splats are
//! composited front to back by camera-space depth (ties by source index):
//!
//! ```text
//! αᵢ = min(0.99, oᵢ · exp(-½ dᵀ Σ'⁻¹ d)),  skipped when αᵢ < 1/255
//! C  = Σ cᵢ αᵢ Tᵢ,  Tᵢ₊₁ = Tᵢ (1 - αᵢ)
//! ```
//!
//! Compositing stops before a splat would push transmittance below 1e-4.
//! The background is black.

pub mod op;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};

use crate::imgbuf::Image;
use crate::scene::{quat_to_matrix, Camera};

pub const TILE_SIZE: usize = 16;
pub const COV2D_DILATION: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const TRANSMITTANCE_MIN: f64 = 1e-4;

/// Screen-space footprint of one Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Footprint {
    pub mean2d: [f64; 2],
    /// `[a, b, c]` of the symmetric matrix `[[a, b], [b, c]]`, dilation included.
    pub cov2d: [f64; 3],
    pub depth: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedSplat {
    pub mean2d: [f64; 2],
    pub cov2d: [f64; 3],
    pub depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
    pub source_index: usize,
}

impl ProjectedSplat {
    pub fn new(fp: Footprint, color: [f64; 3], opacity: f64, source_index: usize) -> Self {
        ProjectedSplat { mean2d: fp.mean2d, cov2d: fp.cov2d, depth: fp.depth, color, opacity, source_index }
    }

    /// `[A, B, C]` of the inverse covariance.
    fn conic(&self) -> [f64; 3] {
        let [a, b, c] = self.cov2d;
        let det = a * c - b * b;
        [c / det, -b / det, a / det]
    }

    /// Pixel distance beyond which α < 1/255 everywhere.
    fn support_radius(&self) -> f64 {
        let ln = (255.0 * self.opacity.min(ALPHA_MAX)).ln();
        if ln <= 0.0 {
            return -1.0;
        }
        let [a, b, c] = self.cov2d;
        let mid = 0.5 * (a + c);
        let lmax = mid + (mid * mid - (a * c - b * b)).max(0.0).sqrt();
        (2.0 * lmax * ln).sqrt()
    }
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub image: Image,
    /// Final transmittance per pixel, row-major.
    pub transmittance: Vec<f64>,
}

/// Per-splat gradients of a scalar loss w.r.t. the 2-D splat attributes.
/// `cov2d` is w.r.t. `[a, b, c]` with `b` counted once.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatGrads {
    pub mean2d: Vec<[f64; 2]>,
    pub cov2d: Vec<[f64; 3]>,
    pub color: Vec<[f64; 3]>,
    pub opacity: Vec<f64>,
}

impl SplatGrads {
    pub fn zeros(n: usize) -> Self {
        SplatGrads { mean2d: vec![[0.0; 2]; n], cov2d: vec![[0.0; 3]; n], color: vec![[0.0; 3]; n], opacity: vec![0.0; n] }
    }
}

/// Perspective Jacobian of `(fx x/z + cx, fy y/z + cy)` at camera-space `p`.
pub fn projection_jacobian(p: &Vector3<f64>, camera: &Camera) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    Matrix2x3::new(camera.fx * iz, 0.0, -camera.fx * p.x * iz * iz, 0.0, camera.fy * iz, -camera.fy * p.y * iz * iz)
}

/// Projects a world-space Gaussian. `None` when it lies at or in front of
/// the near plane.
pub fn project(position: [f64; 3], cov3d: &Matrix3<f64>, camera: &Camera) -> Option<Footprint> {
    let rot = camera.rotation();
    let p = rot * Vector3::from(position) + camera.translation();
    if p.z <= camera.near_clip {
        return None;
    }
    let mean2d = [camera.fx * p.x / p.z + camera.cx, camera.fy * p.y / p.z + camera.cy];
    let t = projection_jacobian(&p, camera) * rot;
    let c = t * cov3d * t.transpose();
    Some(Footprint {
        mean2d,
        cov2d: [c[(0, 0)] + COV2D_DILATION, 0.5 * (c[(0, 1)] + c[(1, 0)]), c[(1, 1)] + COV2D_DILATION],
        depth: p.z,
    })
}

/// Projects every Gaussian of a deformed cloud; culled ones are omitted.
pub fn project_all(
    positions: &[[f64; 3]],
    rotations: &[[f64; 4]],
    log_scales: &[[f64; 3]],
    opacities: &[f64],
    colors: &[[f64; 3]],
    camera: &Camera,
) -> Vec<ProjectedSplat> {
    (0..positions.len())
        .filter_map(|i| {
            let cov = crate::scene::covariance_from_params(rotations[i], log_scales[i]);
            project(positions[i], &cov, camera).map(|fp| ProjectedSplat::new(fp, colors[i], opacities[i], i))
        })
        .collect()
}

fn depth_order(splats: &[ProjectedSplat]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| {
        splats[a].depth.total_cmp(&splats[b].depth).then(splats[a].source_index.cmp(&splats[b].source_index))
    });
    order
}

#[inline]
fn splat_alpha(s: &ProjectedSplat, conic: &[f64; 3], px: f64, py: f64) -> (f64, f64, f64, f64) {
    let dx = px - s.mean2d[0];
    let dy = py - s.mean2d[1];
    let power = -0.5 * (conic[0] * dx * dx + 2.0 * conic[1] * dx * dy + conic[2] * dy * dy);
    let g = power.exp();
    (s.opacity * g, g, dx, dy)
}

/// Composites one pixel over `list` (indices into `splats`, front to back).
/// Calls `visit(splat, alpha, transmittance_before)` for each contributor.
#[inline]
fn composite_pixel(
    splats: &[ProjectedSplat],
    conics: &[[f64; 3]],
    list: &[usize],
    px: f64,
    py: f64,
    mut visit: impl FnMut(usize, f64, f64),
) -> ([f64; 3], f64) {
    let mut t = 1.0;
    let mut c = [0.0; 3];
    for &i in list {
        let s = &splats[i];
        let (raw, _, _, _) = splat_alpha(s, &conics[i], px, py);
        let alpha = raw.min(ALPHA_MAX);
        if alpha < ALPHA_MIN {
            continue;
        }
        let next_t = t * (1.0 - alpha);
        if next_t < TRANSMITTANCE_MIN {
            break;
        }
        let w = alpha * t;
        for k in 0..3 {
            c[k] += s.color[k] * w;
        }
        visit(i, alpha, t);
        t = next_t;
    }
    (c, t)
}

struct Tiles {
    tiles_x: usize,
    tiles_y: usize,
    lists: Vec<Vec<usize>>,
}

fn bin_tiles(splats: &[ProjectedSplat], order: &[usize], camera: &Camera) -> Tiles {
    let tiles_x = camera.width.div_ceil(TILE_SIZE);
    let tiles_y = camera.height.div_ceil(TILE_SIZE);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for &i in order {
        let s = &splats[i];
        let r = s.support_radius();
        if r < 0.0 {
            continue;
        }
        // pixel centres are at integer + 0.5
        let x_lo = (s.mean2d[0] - r - 0.5).ceil().max(0.0);
        let x_hi = (s.mean2d[0] + r - 0.5).floor().min(camera.width as f64 - 1.0);
        let y_lo = (s.mean2d[1] - r - 0.5).ceil().max(0.0);
        let y_hi = (s.mean2d[1] + r - 0.5).floor().min(camera.height as f64 - 1.0);
        if x_lo > x_hi || y_lo > y_hi {
            continue;
        }
        let (tx0, tx1) = (x_lo as usize / TILE_SIZE, x_hi as usize / TILE_SIZE);
        let (ty0, ty1) = (y_lo as usize / TILE_SIZE, y_hi as usize / TILE_SIZE);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                lists[ty * tiles_x + tx].push(i);
            }
        }
    }
    Tiles { tiles_x, tiles_y, lists }
}

fn conics(splats: &[ProjectedSplat]) -> Vec<[f64; 3]> {
    splats.iter().map(|s| s.conic()).collect()
}

/// Tile-based forward render.
pub fn render(splats: &[ProjectedSplat], camera: &Camera) -> RenderOutput {
    let order = depth_order(splats);
    let tiles = bin_tiles(splats, &order, camera);
    let conics = conics(splats);
    let (w, h) = (camera.width, camera.height);
    let mut image = Image::new(w, h);
    let mut transmittance = vec![1.0; w * h];
    for ty in 0..tiles.tiles_y {
        for tx in 0..tiles.tiles_x {
            let list = &tiles.lists[ty * tiles.tiles_x + tx];
            for y in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(h) {
                for x in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(w) {
                    let (c, t) = composite_pixel(splats, &conics, list, x as f64 + 0.5, y as f64 + 0.5, |_, _, _| {});
                    image.set_pixel(x, y, c);
                    transmittance[y * w + x] = t;
                }
            }
        }
    }
    RenderOutput { image, transmittance }
}

/// Brute-force oracle: every pixel composites every splat in global depth order.
pub fn render_reference(splats: &[ProjectedSplat], camera: &Camera) -> RenderOutput {
    let order = depth_order(splats);
    let conics = conics(splats);
    let (w, h) = (camera.width, camera.height);
    let mut image = Image::new(w, h);
    let mut transmittance = vec![1.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (c, t) = composite_pixel(splats, &conics, &order, x as f64 + 0.5, y as f64 + 0.5, |_, _, _| {});
            image.set_pixel(x, y, c);
            transmittance[y * w + x] = t;
        }
    }
    RenderOutput { image, transmittance }
}

/// Blending weights `αᵢ Tᵢ` of every contributor at one pixel, front to back.
pub fn pixel_weights(splats: &[ProjectedSplat], camera: &Camera, x: usize, y: usize) -> (Vec<(usize, f64)>, f64) {
    let order = depth_order(splats);
    let conics = conics(splats);
    let mut out = Vec::new();
    let (_, t) = composite_pixel(splats, &conics, &order, x as f64 + 0.5, y as f64 + 0.5, |i, a, t| {
        out.push((splats[i].source_index, a * t))
    });
    let _ = camera;
    (out, t)
}

/// Gradients of `Σ out_grad · image` w.r.t. the 2-D splat attributes.
/// `out_grad` is row-major H×W×3. Blending is recomputed per pixel and
/// walked back to front.
pub fn render_backward(splats: &[ProjectedSplat], camera: &Camera, out_grad: &[f64]) -> SplatGrads {
    assert_eq!(out_grad.len(), camera.width * camera.height * 3, "render_backward: output gradient size");
    let order = depth_order(splats);
    let tiles = bin_tiles(splats, &order, camera);
    let conics = conics(splats);
    let (w, h) = (camera.width, camera.height);
    let mut grads = SplatGrads::zeros(splats.len());
    let mut contrib: Vec<(usize, f64, f64)> = Vec::new();
    for ty in 0..tiles.tiles_y {
        for tx in 0..tiles.tiles_x {
            let list = &tiles.lists[ty * tiles.tiles_x + tx];
            if list.is_empty() {
                continue;
            }
            for y in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(h) {
                for x in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(w) {
                    let gi = (y * w + x) * 3;
                    let g = [out_grad[gi], out_grad[gi + 1], out_grad[gi + 2]];
                    if g == [0.0; 3] {
                        continue;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    contrib.clear();
                    composite_pixel(splats, &conics, list, px, py, |i, a, t| contrib.push((i, a, t)));
                    // suffix[k] = Σ_{j>i} c_j α_j T_j, accumulated back to front
                    let mut suffix = [0.0; 3];
                    for &(i, alpha, t) in contrib.iter().rev() {
                        let s = &splats[i];
                        let w_i = alpha * t;
                        let mut d_alpha = 0.0;
                        for k in 0..3 {
                            grads.color[i][k] += g[k] * w_i;
                            d_alpha += g[k] * (s.color[k] * t - suffix[k] / (1.0 - alpha));
                            suffix[k] += s.color[k] * w_i;
                        }
                        let (raw, gauss, dx, dy) = splat_alpha(s, &conics[i], px, py);
                        if raw > ALPHA_MAX {
                            continue;
                        }
                        grads.opacity[i] += d_alpha * gauss;
                        // α = o·exp(power)
                        let d_power = d_alpha * alpha;
                        let [ca, cb, cc] = conics[i];
                        grads.mean2d[i][0] += d_power * (ca * dx + cb * dy);
                        grads.mean2d[i][1] += d_power * (cb * dx + cc * dy);
                        let d_conic = [-0.5 * dx * dx * d_power, -dx * dy * d_power, -0.5 * dy * dy * d_power];
                        // dL/dΣ = -Q (dL/dQ) Q with Q the conic
                        let q = Matrix2::new(ca, cb, cb, cc);
                        let dq = Matrix2::new(d_conic[0], 0.5 * d_conic[1], 0.5 * d_conic[1], d_conic[2]);
                        let ds = -(q * dq * q);
                        grads.cov2d[i][0] += ds[(0, 0)];
                        grads.cov2d[i][1] += ds[(0, 1)] + ds[(1, 0)];
                        grads.cov2d[i][2] += ds[(1, 1)];
                    }
                }
            }
        }
    }
    grads
}

/// Gradients w.r.t. the 3-D parameters of one Gaussian.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Gaussian3dGrad {
    pub position: [f64; 3],
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
}

/// Chains 2-D footprint gradients back through projection and
/// `Σ = R S Sᵀ Rᵀ` for a Gaussian with unit quaternion `q`.
pub fn footprint_backward(
    position: [f64; 3],
    q: [f64; 4],
    log_scale: [f64; 3],
    camera: &Camera,
    d_mean2d: [f64; 2],
    d_cov2d: [f64; 3],
) -> Gaussian3dGrad {
    let rot = camera.rotation();
    let p = rot * Vector3::from(position) + camera.translation();
    let (fx, fy) = (camera.fx, camera.fy);
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    let m = quat_to_matrix(q);
    let s2 = Vector3::new((2.0 * log_scale[0]).exp(), (2.0 * log_scale[1]).exp(), (2.0 * log_scale[2]).exp());
    let sigma = m * Matrix3::from_diagonal(&s2) * m.transpose();
    let j = projection_jacobian(&p, camera);
    let t = j * rot;

    let g2 = Matrix2::new(d_cov2d[0], 0.5 * d_cov2d[1], 0.5 * d_cov2d[1], d_cov2d[2]);
    // cov2d = T Σ Tᵀ
    let d_sigma = t.transpose() * g2 * t;
    let d_t = 2.0 * g2 * t * sigma;
    let d_j = d_t * rot.transpose();

    let mut dp = Vector3::new(d_mean2d[0] * fx * iz, d_mean2d[1] * fy * iz, -(d_mean2d[0] * fx * p.x + d_mean2d[1] * fy * p.y) * iz2);
    // J = [[fx/z, 0, -fx x/z²], [0, fy/z, -fy y/z²]]
    dp.x += d_j[(0, 2)] * (-fx * iz2);
    dp.y += d_j[(1, 2)] * (-fy * iz2);
    dp.z += d_j[(0, 0)] * (-fx * iz2)
        + d_j[(0, 2)] * (2.0 * fx * p.x * iz2 * iz)
        + d_j[(1, 1)] * (-fy * iz2)
        + d_j[(1, 2)] * (2.0 * fy * p.y * iz2 * iz);
    let d_position = rot.transpose() * dp;

    // Σ = Σₖ sₖ² mₖ mₖᵀ
    let mut d_log_scale = [0.0; 3];
    for k in 0..3 {
        let mk = m.column(k);
        d_log_scale[k] = 2.0 * s2[k] * (mk.transpose() * d_sigma * mk)[(0, 0)];
    }
    let d_m = 2.0 * d_sigma * m * Matrix3::from_diagonal(&s2);
    let [w, x, y, z] = q;
    let g = |r: usize, c: usize| d_m[(r, c)];
    let d_q = [
        2.0 * (-g(0, 1) * z + g(0, 2) * y + g(1, 0) * z - g(1, 2) * x - g(2, 0) * y + g(2, 1) * x),
        2.0 * (g(0, 1) * y + g(0, 2) * z + g(1, 0) * y - 2.0 * g(1, 1) * x - g(1, 2) * w + g(2, 0) * z + g(2, 1) * w
            - 2.0 * g(2, 2) * x),
        2.0 * (-2.0 * g(0, 0) * y + g(0, 1) * x + g(0, 2) * w + g(1, 0) * x + g(1, 2) * z - g(2, 0) * w + g(2, 1) * z
            - 2.0 * g(2, 2) * y),
        2.0 * (-2.0 * g(0, 0) * z - g(0, 1) * w + g(0, 2) * x + g(1, 0) * w - 2.0 * g(1, 1) * z + g(1, 2) * y
            + g(2, 0) * x
            + g(2, 1) * y),
    ];
    Gaussian3dGrad { position: d_position.into(), rotation: d_q, log_scale: d_log_scale }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam(w: usize, h: usize) -> Camera {
        Camera {
            fx: 20.0,
            fy: 20.0,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            width: w,
            height: h,
            world_to_camera: [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]],
            near_clip: 0.1,
        }
    }

    fn splat(mean: [f64; 2], cov: [f64; 3], depth: f64, color: [f64; 3], opacity: f64, idx: usize) -> ProjectedSplat {
        ProjectedSplat { mean2d: mean, cov2d: cov, depth, color, opacity, source_index: idx }
    }

    #[test]
    fn point_behind_camera_is_culled() {
        let c = cam(8, 8);
        assert!(project([0.0, 0.0, -1.0], &Matrix3::identity(), &c).is_none());
        assert!(project([0.0, 0.0, 0.05], &Matrix3::identity(), &c).is_none());
    }

    #[test]
    fn on_axis_isotropic_covariance() {
        let c = cam(8, 8);
        let (sigma, z) = (0.3, 4.0);
        let fp = project([0.0, 0.0, z], &(Matrix3::identity() * sigma * sigma), &c).unwrap();
        let e = (c.fx * sigma / z).powi(2) + COV2D_DILATION;
        assert!((fp.cov2d[0] - e).abs() < 1e-12 && (fp.cov2d[2] - e).abs() < 1e-12 && fp.cov2d[1].abs() < 1e-15);
        assert_eq!(fp.mean2d, [c.cx, c.cy]);
    }

    #[test]
    fn unit_magnification() {
        let mut c = cam(8, 8);
        c.cx = 0.0;
        c.cy = 0.0;
        let fp = project([0.7, -1.3, c.fx], &Matrix3::identity(), &c).unwrap();
        assert!((fp.mean2d[0] - 0.7).abs() < 1e-12 && (fp.mean2d[1] + 1.3).abs() < 1e-12);
    }

    #[test]
    fn single_splat_caps_alpha() {
        let c = cam(4, 4);
        let s = splat([2.5, 2.5], [1.0, 0.0, 1.0], 1.0, [0.2, 0.6, 1.0], 1.0, 0);
        let out = render(&[s], &c);
        let p = out.image.pixel(2, 2);
        for k in 0..3 {
            assert!((p[k] - 0.99 * s.color[k]).abs() < 1e-12);
        }
        assert!((out.transmittance[2 * 4 + 2] - 0.01).abs() < 1e-12);
    }

    #[test]
    fn two_coincident_half_alpha_splats() {
        let c = cam(4, 4);
        let a = splat([1.5, 1.5], [1.0, 0.0, 1.0], 1.0, [1.0; 3], 0.5, 0);
        let b = splat([1.5, 1.5], [1.0, 0.0, 1.0], 2.0, [0.0; 3], 0.5, 1);
        let out = render(&[b, a], &c);
        let p = out.image.pixel(1, 1);
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert!((out.transmittance[5] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn empty_scene_is_black() {
        let c = cam(5, 3);
        for out in [render(&[], &c), render_reference(&[], &c)] {
            assert!(out.image.data.iter().all(|&v| v == 0.0));
            assert!(out.transmittance.iter().all(|&t| t == 1.0));
        }
    }

    fn random_scene(rng: &mut ChaCha8Rng, n: usize, w: usize, h: usize) -> Vec<ProjectedSplat> {
        (0..n)
            .map(|i| {
                let a: f64 = rng.gen_range(0.5..20.0);
                let c: f64 = rng.gen_range(0.5..20.0);
                let b = rng.gen_range(-0.8..0.8) * (a * c).sqrt();
                splat(
                    [rng.gen_range(-4.0..w as f64 + 4.0), rng.gen_range(-4.0..h as f64 + 4.0)],
                    [a, b, c],
                    rng.gen_range(1.0..3.0),
                    [rng.gen(), rng.gen(), rng.gen()],
                    rng.gen_range(0.05..1.0),
                    i,
                )
            })
            .collect()
    }

    #[test]
    fn tiled_matches_reference_and_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let c = cam(37, 21);
            let s = random_scene(&mut rng, 40, 37, 21);
            let a = render(&s, &c);
            let b = render_reference(&s, &c);
            assert!(a.image.max_abs_diff(&b.image) <= 1e-12);
            let (w, t) = pixel_weights(&s, &c, 10, 7);
            let total: f64 = w.iter().map(|x| x.1).sum::<f64>() + t;
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = cam(16, 16);
        let s = random_scene(&mut rng, 6, 16, 16);
        let g = render_backward(&s, &c, &vec![0.0; 16 * 16 * 3]);
        assert_eq!(g, SplatGrads::zeros(6));
    }

    #[test]
    fn color_gradient_at_center_is_alpha() {
        let c = cam(4, 4);
        let s = splat([1.5, 1.5], [2.0, 0.3, 1.5], 1.0, [0.3, 0.3, 0.3], 0.7, 0);
        let mut og = vec![0.0; 48];
        og[(4 + 1) * 3] = 1.0;
        let g = render_backward(&[s], &c, &og);
        assert!((g.color[0][0] - 0.7).abs() < 1e-12);
        assert_eq!(g.color[0][1], 0.0);
    }
}

/// Smallest relative distance, over every pixel and splat, of the blending
/// state to a discontinuity (α skip, α cap, transmittance cut-off, depth tie).
/// Finite differences are only meaningful when this is comfortably positive.
pub fn threshold_margin(splats: &[ProjectedSplat], camera: &Camera) -> f64 {
    let order = depth_order(splats);
    let conics = conics(splats);
    let mut margin = f64::INFINITY;
    for w in order.windows(2) {
        margin = margin.min((splats[w[1]].depth - splats[w[0]].depth).abs());
    }
    for y in 0..camera.height {
        for x in 0..camera.width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            for &i in &order {
                let (raw, _, _, _) = splat_alpha(&splats[i], &conics[i], px, py);
                margin = margin.min((raw / ALPHA_MIN).ln().abs()).min((raw / ALPHA_MAX).ln().abs());
                let alpha = raw.min(ALPHA_MAX);
                if alpha < ALPHA_MIN {
                    continue;
                }
                let next_t = t * (1.0 - alpha);
                margin = margin.min((next_t / TRANSMITTANCE_MIN).ln().abs());
                if next_t < TRANSMITTANCE_MIN {
                    break;
                }
                t = next_t;
            }
        }
    }
    margin
}
