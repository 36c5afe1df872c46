//! Photometric terms, the deformation regularisers and their weighted sum.
//!
//! Every term is a mean over its index set, so weights do not depend on the
//! image size or the number of Gaussians.

use std::any::Any;

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::imgbuf::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub dssim: f64,
    pub flame: f64,
    pub global_def: f64,
    pub eta: f64,
    pub t: f64,
    pub global_rot: f64,
    pub global_scale: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 0.8,
            dssim: 0.2,
            flame: 1.0,
            global_def: 1e-1,
            eta: 1e-3,
            t: 1e-3,
            global_rot: 1e-1,
            global_scale: 1.0,
        }
    }
}

/// Values of the individual terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l1: f64,
    pub dssim: f64,
    pub flame: f64,
    pub global_def: f64,
    pub eta: f64,
    pub t: f64,
    pub global_rot: f64,
    pub global_scale: f64,
}

impl LossTerms {
    pub const NAMES: [&'static str; 8] = ["l1", "dssim", "flame", "global_def", "eta", "t", "global_rot", "global_scale"];

    pub fn values(&self) -> [f64; 8] {
        [self.l1, self.dssim, self.flame, self.global_def, self.eta, self.t, self.global_rot, self.global_scale]
    }

    pub fn from_values(v: [f64; 8]) -> Self {
        LossTerms {
            l1: v[0],
            dssim: v[1],
            flame: v[2],
            global_def: v[3],
            eta: v[4],
            t: v[5],
            global_rot: v[6],
            global_scale: v[7],
        }
    }
}

impl LossWeights {
    pub fn values(&self) -> [f64; 8] {
        [self.l1, self.dssim, self.flame, self.global_def, self.eta, self.t, self.global_rot, self.global_scale]
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.values().iter().position(|w| !(*w >= 0.0)) {
            return Err(Error::Argument(format!("loss weight {} must be >= 0", LossTerms::NAMES[i])));
        }
        Ok(())
    }
}

/// Weighted sum of `terms`; a non-finite term is a training error naming it.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<f64> {
    let v = terms.values();
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::Training(format!("loss term {} is not finite ({})", LossTerms::NAMES[i], v[i])));
    }
    Ok(v.iter().zip(weights.values()).map(|(t, w)| t * w).sum())
}

pub fn l1_loss(pred: &Image, gt: &Image) -> Result<f64> {
    pred.same_shape(gt)?;
    let n = pred.data.len().max(1) as f64;
    Ok(pred.data.iter().zip(&gt.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable valid-mode correlation of a `w×h` plane with the window.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a valid-size map back to `w×h`.
fn filter_adjoint(map: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = map[y * ow + x];
            for i in 0..SSIM_WINDOW {
                tmp[(y + i) * ow + x] += k[i] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for i in 0..SSIM_WINDOW {
                out[y * w + x + i] += k[i] * v;
            }
        }
    }
    out
}

fn channel(data: &[f64], c: usize) -> Vec<f64> {
    data.iter().skip(c).step_by(3).copied().collect()
}

struct SsimStats {
    /// Mean SSIM over channels and valid window positions.
    mean: f64,
    /// Per channel: ∂S/∂μx, ∂S/∂E[x²], ∂S/∂E[xy] at each window position.
    partials: Vec<[Vec<f64>; 3]>,
    /// Channel-mean SSIM at each window position.
    map: Vec<f64>,
    positions: usize,
}

fn ssim_stats(x: &[f64], y: &[f64], w: usize, h: usize, with_partials: bool) -> SsimStats {
    let k = gaussian_kernel();
    let mut total = 0.0;
    let mut partials = Vec::new();
    let mut positions = 0;
    let mut map = Vec::new();
    for c in 0..3 {
        let xc = channel(x, c);
        let yc = channel(y, c);
        let sq = |v: &[f64]| v.iter().map(|a| a * a).collect::<Vec<_>>();
        let xy: Vec<f64> = xc.iter().zip(&yc).map(|(a, b)| a * b).collect();
        let mx = filter_valid(&xc, w, h, &k);
        let my = filter_valid(&yc, w, h, &k);
        let sxx = filter_valid(&sq(&xc), w, h, &k);
        let syy = filter_valid(&sq(&yc), w, h, &k);
        let sxy = filter_valid(&xy, w, h, &k);
        positions = mx.len();
        map.resize(positions, 0.0);
        let mut ga = vec![0.0; positions];
        let mut gs = vec![0.0; positions];
        let mut gc = vec![0.0; positions];
        for p in 0..positions {
            let (a, b) = (mx[p], my[p]);
            let a1 = 2.0 * a * b + SSIM_C1;
            let a2 = 2.0 * (sxy[p] - a * b) + SSIM_C2;
            let b1 = a * a + b * b + SSIM_C1;
            let b2 = (sxx[p] - a * a) + (syy[p] - b * b) + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            map[p] += s / 3.0;
            if with_partials {
                ga[p] = 2.0 * b * (a2 - a1) / (b1 * b2) - 2.0 * a * s / b1 + 2.0 * a * s / b2;
                gs[p] = -s / b2;
                gc[p] = 2.0 * a1 / (b1 * b2);
            }
        }
        if with_partials {
            partials.push([ga, gs, gc]);
        }
    }
    SsimStats { mean: total / (3 * positions) as f64, partials, map, positions }
}

fn check_ssim_size(w: usize, h: usize) -> Result<()> {
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Argument(format!("image {w}x{h} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")));
    }
    Ok(())
}

/// Mean SSIM (Gaussian 11×11 window, σ = 1.5, valid positions, channel mean).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    check_ssim_size(a.width, a.height)?;
    Ok(ssim_stats(&a.data, &b.data, a.width, a.height, false).mean)
}

/// Per-window SSIM, row-major over the `(W − 10) × (H − 10)` valid window
/// positions. Position `(x, y)` is centred on pixel `(x + 5, y + 5)`.
pub fn ssim_map(a: &Image, b: &Image) -> Result<Vec<f64>> {
    a.same_shape(b)?;
    check_ssim_size(a.width, a.height)?;
    Ok(ssim_stats(&a.data, &b.data, a.width, a.height, false).map)
}

/// `(1 − SSIM) / 2`.
pub fn dssim_loss(pred: &Image, gt: &Image) -> Result<f64> {
    Ok((1.0 - ssim(pred, gt)?) / 2.0)
}

/// D-SSIM against a fixed target, differentiable in the prediction.
pub struct DssimOp {
    gt: Vec<f64>,
    width: usize,
    height: usize,
}

impl CustomOp for DssimOp {
    fn name(&self) -> &'static str {
        "dssim"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, out_grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = &inputs[0].data;
        let (w, h) = (self.width, self.height);
        let st = ssim_stats(x, &self.gt, w, h, true);
        let k = gaussian_kernel();
        let scale = -0.5 * out_grad.item() / (3 * st.positions) as f64;
        let mut d = Tensor::zeros(w * h, 3);
        for (c, [ga, gs, gc]) in st.partials.iter().enumerate() {
            let ta = filter_adjoint(ga, w, h, &k);
            let ts = filter_adjoint(gs, w, h, &k);
            let tc = filter_adjoint(gc, w, h, &k);
            for q in 0..w * h {
                let (xq, yq) = (x[q * 3 + c], self.gt[q * 3 + c]);
                d.data[q * 3 + c] = scale * (ta[q] + 2.0 * xq * ts[q] + yq * tc[q]);
            }
        }
        vec![Some(d)]
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// D-SSIM of a `(H·W)×3` image variable against `gt`.
pub fn dssim(tape: &mut Tape, pred: Var, gt: &Image) -> Result<Var> {
    check_ssim_size(gt.width, gt.height)?;
    let pv = tape.value(pred);
    if pv.data.len() != gt.data.len() {
        return Err(Error::Shape(format!("dssim: prediction has {} values, target {}", pv.data.len(), gt.data.len())));
    }
    let value = (1.0 - ssim_stats(&pv.data, &gt.data, gt.width, gt.height, false).mean) / 2.0;
    let op = DssimOp { gt: gt.data.clone(), width: gt.width, height: gt.height };
    Ok(tape.custom(Box::new(op), &[pred], Tensor::scalar(value)))
}

/// Mean absolute error of a `(H·W)×3` image variable against `gt`.
pub fn l1(tape: &mut Tape, pred: Var, gt: &Image) -> Result<Var> {
    let neg = Tensor { rows: gt.width * gt.height, cols: 3, data: gt.data.iter().map(|v| -v).collect() };
    let diff = tape.add_const(pred, &neg)?;
    let a = tape.abs(diff);
    Ok(tape.mean(a))
}

/// Mean over rows of the squared row norm.
pub fn mean_sq_norm(tape: &mut Tape, x: Var) -> Var {
    let cols = tape.shape(x).1 as f64;
    let s = tape.square(x);
    let m = tape.mean(s);
    tape.scale(m, cols)
}

/// `mean_v ‖Def(v_can) − δv‖²` over the mesh vertices.
pub fn flame_match(tape: &mut Tape, def_at_vertices: Var, delta_v: &[[f64; 3]]) -> Result<Var> {
    let neg = Tensor { rows: delta_v.len(), cols: 3, data: delta_v.iter().flatten().map(|v| -v).collect() };
    let diff = tape.add_const(def_at_vertices, &neg)?;
    Ok(mean_sq_norm(tape, diff))
}

/// `(L_def, L_rot, L_scale)`: squared displacement and `‖exp([r]×) − I‖²_F`
/// averaged over `far_rows`, and `|exp(s) − 1|` averaged over every entry.
pub fn far_field(tape: &mut Tape, def: Var, r_star: Var, s_raw: Var, far_rows: &[usize]) -> Result<(Var, Var, Var)> {
    let (l_def, l_rot) = if far_rows.is_empty() {
        log::debug!("far-field set is empty; global deformation terms are 0");
        (tape.constant(Tensor::scalar(0.0)), tape.constant(Tensor::scalar(0.0)))
    } else {
        let d = tape.gather_rows(def, far_rows)?;
        let l_def = mean_sq_norm(tape, d);
        let r = tape.gather_rows(r_star, far_rows)?;
        let m = tape.axis_angle_to_matrix(r)?;
        let eye: Vec<f64> = (0..far_rows.len()).flat_map(|_| [-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0]).collect();
        let diff = tape.add_const(m, &Tensor { rows: far_rows.len(), cols: 9, data: eye })?;
        (l_def, mean_sq_norm(tape, diff))
    };
    let e = tape.exp(s_raw);
    let (n, c) = tape.shape(s_raw);
    let shifted = tape.add_const(e, &Tensor::full(n, c, -1.0))?;
    let a = tape.abs(shifted);
    let l_scale = tape.mean(a);
    Ok((l_def, l_rot, l_scale))
}

/// Tape handles of every term, in [`LossTerms::NAMES`] order.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub terms: [Var; 8],
}

/// `Σ λ · term` on the tape.
pub fn weighted_sum(tape: &mut Tape, vars: &LossVars, weights: &LossWeights) -> Result<Var> {
    let w = weights.values();
    let mut total = tape.scale(vars.terms[0], w[0]);
    for (v, wi) in vars.terms.iter().zip(w).skip(1) {
        let s = tape.scale(*v, wi);
        total = tape.add(total, s)?;
    }
    Ok(total)
}

pub fn read_terms(tape: &Tape, vars: &LossVars) -> LossTerms {
    LossTerms::from_values(vars.terms.map(|v| tape.value(v).item()))
}

/// `‖R − I‖²_F` for a rotation about any axis by `θ`, i.e. `4(1 − cos θ)`.
pub fn rotation_identity_gap(theta: f64) -> f64 {
    4.0 * (1.0 - theta.cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(w: usize, h: usize, f: impl Fn(usize) -> f64) -> Image {
        Image::from_data(w, h, (0..w * h * 3).map(f).collect()).unwrap()
    }

    #[test]
    fn l1_examples() {
        let z = Image::new(4, 4);
        let o = Image::filled(4, 4, [1.0; 3]);
        assert_eq!(l1_loss(&z, &z).unwrap(), 0.0);
        assert_eq!(l1_loss(&z, &o).unwrap(), 1.0);
        let half = img(4, 4, |i| if (i / 3) % 2 == 0 { 0.5 } else { 0.0 });
        assert!((l1_loss(&z, &half).unwrap() - 0.25).abs() < 1e-15);
        assert!(l1_loss(&z, &Image::new(4, 5)).is_err());
    }

    #[test]
    fn dssim_examples() {
        let a = img(16, 16, |i| ((i * 37) % 101) as f64 / 100.0);
        assert!(dssim_loss(&a, &a).unwrap().abs() < 1e-15);
        let (ca, cb) = (0.3, 0.7);
        let expected = (1.0 - (2.0 * ca * cb + SSIM_C1) / (ca * ca + cb * cb + SSIM_C1)) / 2.0;
        let got = dssim_loss(&Image::filled(12, 12, [ca; 3]), &Image::filled(12, 12, [cb; 3])).unwrap();
        assert!((got - expected).abs() < 1e-12);
        let mut b = Image::filled(32, 32, [0.5; 3]);
        let flat = b.clone();
        b.set_pixel(16, 16, [1.0, 0.0, 1.0]);
        assert!(dssim_loss(&b, &flat).unwrap() > 0.0);
        assert!(matches!(dssim_loss(&Image::new(10, 20), &Image::new(10, 20)), Err(Error::Argument(_))));
    }

    #[test]
    fn dssim_is_symmetric() {
        let a = img(14, 13, |i| ((i * 37) % 101) as f64 / 100.0);
        let b = img(14, 13, |i| ((i * 11) % 7) as f64 / 7.0);
        assert!((dssim_loss(&a, &b).unwrap() - dssim_loss(&b, &a).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn total_loss_impulses() {
        let w = LossWeights::default();
        assert_eq!(total_loss(&LossTerms::default(), &w).unwrap(), 0.0);
        let mut t = LossTerms::default();
        t.l1 = 1.0;
        assert_eq!(total_loss(&t, &w).unwrap(), 0.8);
        let mut t = LossTerms::default();
        t.global_def = 1.0;
        assert_eq!(total_loss(&t, &w).unwrap(), 0.1);
        let mut t = LossTerms::default();
        t.eta = f64::NAN;
        let err = total_loss(&t, &w).unwrap_err();
        assert!(err.to_string().contains("eta"));
    }

    #[test]
    fn small_and_far_terms() {
        let mut tape = Tape::new();
        let eta = tape.constant(Tensor::from_rows(&[[0.0, 0.2, 0.0]; 5]));
        let l = mean_sq_norm(&mut tape, eta);
        assert!((tape.value(l).item() - 0.04).abs() < 1e-15);
        let t = tape.constant(Tensor::from_rows(&[[0.3, 0.0, 0.0]]));
        let lt = mean_sq_norm(&mut tape, t);
        assert!((tape.value(lt).item() - 0.09).abs() < 1e-15);

        let def = tape.constant(Tensor::from_rows(&[[0.1, 0.0, 0.0], [5.0, 5.0, 5.0]]));
        let theta = 0.7;
        let r = tape.constant(Tensor::from_rows(&[[0.0, 0.0, theta], [1.0, 2.0, 3.0]]));
        let s = tape.constant(Tensor::zeros(2, 3));
        let (ld, lr, ls) = far_field(&mut tape, def, r, s, &[0]).unwrap();
        assert!((tape.value(ld).item() - 0.01).abs() < 1e-15);
        assert!((tape.value(lr).item() - rotation_identity_gap(theta)).abs() < 1e-12);
        assert_eq!(tape.value(ls).item(), 0.0);
        let (ld, lr, _) = far_field(&mut tape, def, r, s, &[]).unwrap();
        assert_eq!((tape.value(ld).item(), tape.value(lr).item()), (0.0, 0.0));
    }
}
