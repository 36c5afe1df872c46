//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! Every op records its output value at record time; [`Tape::backward`] walks
//! the records in exact reverse order and accumulates gradients additively.

use std::any::Any;
use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifier of a learnable tensor owned outside the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// An op with a hand-written backward, e.g. the rasterizer.
pub trait CustomOp: Any {
    fn name(&self) -> &'static str;

    /// Gradient for each input, given the gradient of the output.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, out_grad: &Tensor) -> Vec<Option<Tensor>>;

    fn as_any(&self) -> &dyn Any;
}

enum Op {
    Leaf,
    Affine { x: usize, w: usize, b: usize },
    Softplus { x: usize, beta: f64 },
    Sin(usize),
    Cos(usize),
    Exp(usize),
    Sigmoid(usize),
    Abs(usize),
    Square(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow { x: usize, row: usize },
    Scale { x: usize, s: f64 },
    MulConst { x: usize, c: Tensor },
    AddConst { x: usize },
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    Concat(Vec<usize>),
    GatherRows { x: usize, idx: Vec<usize> },
    Clamp { x: usize, lo: f64, hi: f64 },
    GridSample { plane: usize, coords: usize, res: usize },
    AxisAngleToMatrix(usize),
    AxisAngleToQuat(usize),
    QuatMul(usize, usize),
    QuatNormalize(usize),
    Mat3MulConstLeft { x: usize, c: Tensor },
    RowContract { w: usize, d: Tensor },
    Custom { op: Box<dyn CustomOp>, inputs: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    // false for constants and everything computed only from constants
    needs_grad: bool,
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::Softplus { x, .. }
            | Op::Scale { x, .. }
            | Op::MulConst { x, .. }
            | Op::AddConst { x }
            | Op::GatherRows { x, .. }
            | Op::Clamp { x, .. }
            | Op::Mat3MulConstLeft { x, .. } => vec![*x],
            Op::Sin(x)
            | Op::Cos(x)
            | Op::Exp(x)
            | Op::Sigmoid(x)
            | Op::Abs(x)
            | Op::Square(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::RowSum(x)
            | Op::AxisAngleToMatrix(x)
            | Op::AxisAngleToQuat(x)
            | Op::QuatNormalize(x) => vec![*x],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::QuatMul(a, b) => vec![*a, *b],
            Op::AddRow { x, row } => vec![*x, *row],
            Op::Concat(parts) => parts.clone(),
            Op::GridSample { plane, coords, .. } => vec![*plane, *coords],
            Op::RowContract { w, .. } => vec![*w],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(usize, ParamId)>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of every parameter leaf, summed when a parameter was recorded
    /// more than once.
    pub fn params(&self) -> HashMap<ParamId, Tensor> {
        let mut out: HashMap<ParamId, Tensor> = HashMap::new();
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                match out.get_mut(&id) {
                    Some(acc) => acc.add_assign(g),
                    None => {
                        out.insert(id, g.clone());
                    }
                }
            }
        }
        out
    }
}

fn shape_err<T>(what: &str, a: &Tensor, b: &Tensor) -> Result<T> {
    Err(Error::Shape(format!("{what}: {}x{} vs {}x{}", a.rows, a.cols, b.rows, b.cols)))
}

#[inline]
fn softplus(x: f64, beta: f64) -> f64 {
    let bx = beta * x;
    (bx.max(0.0) + (-bx.abs()).exp().ln_1p()) / beta
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    crate::scene::sigmoid(x)
}

/// Coefficients of `R = I + a K + b K²` and their `(d/dθ)/θ` derivatives.
fn rodrigues_coeffs(theta: f64) -> (f64, f64, f64, f64) {
    if theta < 1e-3 {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0 + t2 * t2 / 120.0, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, -1.0 / 3.0 + t2 / 30.0, -1.0 / 12.0 + t2 / 180.0)
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        (s / theta, (1.0 - c) / t2, (theta * c - s) / (t2 * theta), (theta * s - 2.0 * (1.0 - c)) / (t2 * t2))
    }
}

fn skew(w: &[f64]) -> [[f64; 3]; 3] {
    [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
}

fn mat_mul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut o = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            o[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    o
}

fn quat_mul(a: &[f64], b: &[f64]) -> [f64; 4] {
    crate::scene::quat_mul([a[0], a[1], a[2], a[3]], [b[0], b[1], b[2], b[3]])
}

/// Bilinear corner indices and weights for a coordinate in [-1, 1]
/// (corners aligned with the grid ends). `du_dc` is d(texel)/d(coord).
#[inline]
fn bilinear_setup(c: f64, res: usize) -> (usize, usize, f64, f64) {
    let u = ((c + 1.0) * 0.5 * (res - 1) as f64).clamp(0.0, (res - 1) as f64);
    let i0 = (u.floor() as usize).min(res.saturating_sub(2));
    let f = u - i0 as f64;
    (i0, (i0 + 1).min(res - 1), f, 0.5 * (res - 1) as f64)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Whether `v` depends on any parameter.
    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId, value: &Tensor) -> Var {
        let v = self.push(value.clone(), Op::Leaf);
        self.nodes[v.0].needs_grad = true;
        self.params.push((v.0, id));
        v
    }

    /// The custom op that produced `v`, if any.
    pub fn custom_op(&self, v: Var) -> Option<&dyn CustomOp> {
        match &self.nodes[v.0].op {
            Op::Custom { op, .. } => Some(op.as_ref()),
            _ => None,
        }
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.nodes[x.0].value.map(f);
        self.push(v, op)
    }

    /// `x W + b` with `x: N×I`, `W: I×O`, `b: 1×O`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        if xv.cols != wv.rows {
            return shape_err("affine input vs weight", xv, wv);
        }
        if bv.rows != 1 || bv.cols != wv.cols {
            return shape_err("affine bias vs weight", bv, wv);
        }
        let (n, i_dim, o_dim) = (xv.rows, wv.rows, wv.cols);
        let mut out = Tensor::zeros(n, o_dim);
        for r in 0..n {
            out.data[r * o_dim..(r + 1) * o_dim].copy_from_slice(&bv.data);
        }
        gemm(n, i_dim, o_dim, (&xv.data, i_dim, 1), (&wv.data, o_dim, 1), &mut out.data);
        Ok(self.push(out, Op::Affine { x: x.0, w: w.0, b: b.0 }))
    }

    /// `(1/β) ln(1 + exp(β x))`.
    pub fn softplus(&mut self, x: Var, beta: f64) -> Var {
        self.unary(x, |v| softplus(v, beta), Op::Softplus { x: x.0, beta })
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, f64::sin, Op::Sin(x.0))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, f64::cos, Op::Cos(x.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x.0))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x.0))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x.0))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale { x: x.0, s })
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return shape_err(what, av, bv);
        }
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor { rows: av.rows, cols: av.cols, data };
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a.0, b.0))
    }

    /// Adds a `1×C` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (&self.nodes[x.0].value, &self.nodes[row.0].value);
        if rv.rows != 1 || rv.cols != xv.cols {
            return shape_err("add_row", xv, rv);
        }
        let mut out = xv.clone();
        for r in 0..out.rows {
            for (o, v) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o += v;
            }
        }
        Ok(self.push(out, Op::AddRow { x: x.0, row: row.0 }))
    }

    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        xv.same_shape(&c, "mul_const")?;
        let data = xv.data.iter().zip(&c.data).map(|(a, b)| a * b).collect();
        let out = Tensor { rows: xv.rows, cols: xv.cols, data };
        Ok(self.push(out, Op::MulConst { x: x.0, c }))
    }

    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        xv.same_shape(c, "add_const")?;
        let data = xv.data.iter().zip(&c.data).map(|(a, b)| a + b).collect();
        let out = Tensor { rows: xv.rows, cols: xv.cols, data };
        Ok(self.push(out, Op::AddConst { x: x.0 }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s = v.data.iter().sum::<f64>() / v.data.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(x.0))
    }

    /// `N×C → N×1` sum over columns.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let data = (0..v.rows).map(|r| v.row(r).iter().sum()).collect();
        let out = Tensor { rows: v.rows, cols: 1, data };
        self.push(out, Op::RowSum(x.0))
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.nodes[parts[0].0].value.rows;
        let mut cols = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.rows != rows {
                return shape_err("concat", &self.nodes[parts[0].0].value, v);
            }
            cols += v.cols;
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let v = &self.nodes[p.0].value;
                out.data[r * cols + off..r * cols + off + v.cols].copy_from_slice(v.row(r));
                off += v.cols;
            }
        }
        Ok(self.push(out, Op::Concat(parts.iter().map(|p| p.0).collect())))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.rows) {
            return Err(Error::Shape(format!("gather_rows index {bad} out of {} rows", v.rows)));
        }
        let mut out = Tensor::zeros(idx.len(), v.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(v.row(i));
        }
        Ok(self.push(out, Op::GatherRows { x: x.0, idx: idx.to_vec() }))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x: x.0, lo, hi })
    }

    /// Bilinear lookup of a `res×res` grid with `C` channels (stored as a
    /// `res²×C` tensor, row = `y·res + x`) at `coords: N×2` in [-1, 1].
    pub fn grid_sample(&mut self, plane: Var, coords: Var, res: usize) -> Result<Var> {
        let (pv, cv) = (&self.nodes[plane.0].value, &self.nodes[coords.0].value);
        if pv.rows != res * res || res < 2 {
            return Err(Error::Shape(format!("grid_sample plane has {} rows, expected {}", pv.rows, res * res)));
        }
        if cv.cols != 2 {
            return Err(Error::Shape(format!("grid_sample coords need 2 columns, got {}", cv.cols)));
        }
        let ch = pv.cols;
        let mut out = Tensor::zeros(cv.rows, ch);
        for r in 0..cv.rows {
            let (x0, x1, fx, _) = bilinear_setup(cv.get(r, 0), res);
            let (y0, y1, fy, _) = bilinear_setup(cv.get(r, 1), res);
            let corners = [
                (y0 * res + x0, (1.0 - fx) * (1.0 - fy)),
                (y0 * res + x1, fx * (1.0 - fy)),
                (y1 * res + x0, (1.0 - fx) * fy),
                (y1 * res + x1, fx * fy),
            ];
            let o = out.row_mut(r);
            for (cell, w) in corners {
                for (ov, pv) in o.iter_mut().zip(pv.row(cell)) {
                    *ov += w * pv;
                }
            }
        }
        Ok(self.push(out, Op::GridSample { plane: plane.0, coords: coords.0, res }))
    }

    /// `N×3` axis-angle to `N×9` row-major rotation matrices.
    pub fn axis_angle_to_matrix(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.cols != 3 {
            return Err(Error::Shape(format!("axis-angle needs 3 columns, got {}", v.cols)));
        }
        let mut out = Tensor::zeros(v.rows, 9);
        for r in 0..v.rows {
            let w = v.row(r);
            let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
            let (a, b, _, _) = rodrigues_coeffs(theta);
            let k = skew(w);
            let k2 = mat_mul3(&k, &k);
            let o = out.row_mut(r);
            for i in 0..3 {
                for j in 0..3 {
                    o[i * 3 + j] = if i == j { 1.0 } else { 0.0 } + a * k[i][j] + b * k2[i][j];
                }
            }
        }
        Ok(self.push(out, Op::AxisAngleToMatrix(x.0)))
    }

    /// `N×3` axis-angle to `N×4` unit quaternions `[w, x, y, z]`.
    pub fn axis_angle_to_quat(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.cols != 3 {
            return Err(Error::Shape(format!("axis-angle needs 3 columns, got {}", v.cols)));
        }
        let mut out = Tensor::zeros(v.rows, 4);
        for r in 0..v.rows {
            let w = v.row(r);
            let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
            let (s, _) = half_angle_coeffs(theta);
            let o = out.row_mut(r);
            o[0] = (0.5 * theta).cos();
            o[1] = s * w[0];
            o[2] = s * w[1];
            o[3] = s * w[2];
        }
        Ok(self.push(out, Op::AxisAngleToQuat(x.0)))
    }

    /// Row-wise Hamilton product of `N×4` quaternions.
    pub fn quat_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() || av.cols != 4 {
            return shape_err("quat_mul", av, bv);
        }
        let mut out = Tensor::zeros(av.rows, 4);
        for r in 0..av.rows {
            out.row_mut(r).copy_from_slice(&quat_mul(av.row(r), bv.row(r)));
        }
        Ok(self.push(out, Op::QuatMul(a.0, b.0)))
    }

    pub fn quat_normalize(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.cols != 4 {
            return Err(Error::Shape(format!("quat_normalize needs 4 columns, got {}", v.cols)));
        }
        let mut out = v.clone();
        for r in 0..out.rows {
            let q = out.row_mut(r);
            let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
            q.iter_mut().for_each(|c| *c /= n);
        }
        Ok(self.push(out, Op::QuatNormalize(x.0)))
    }

    /// Row-wise `Cᵢ · Xᵢ` for `N×9` row-major 3×3 matrices; `c` is constant.
    pub fn mat3_mul_const_left(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.cols != 9 || c.shape() != xv.shape() {
            return shape_err("mat3_mul_const_left", xv, &c);
        }
        let mut out = Tensor::zeros(xv.rows, 9);
        for r in 0..xv.rows {
            let (m, a) = (xv.row(r), c.row(r));
            let o = out.row_mut(r);
            for i in 0..3 {
                for j in 0..3 {
                    o[i * 3 + j] = a[i * 3] * m[j] + a[i * 3 + 1] * m[3 + j] + a[i * 3 + 2] * m[6 + j];
                }
            }
        }
        Ok(self.push(out, Op::Mat3MulConstLeft { x: x.0, c }))
    }

    /// `yₙ = Σₖ wₙₖ dₙₖ` with `w: N×K` and constant `d: N×3K` (3-vectors
    /// packed per k).
    pub fn row_contract(&mut self, w: Var, d: Tensor) -> Result<Var> {
        let wv = &self.nodes[w.0].value;
        if d.rows != wv.rows || d.cols != 3 * wv.cols {
            return shape_err("row_contract", wv, &d);
        }
        let k = wv.cols;
        let mut out = Tensor::zeros(wv.rows, 3);
        for r in 0..wv.rows {
            let (wr, dr) = (wv.row(r), d.row(r));
            let o = out.row_mut(r);
            for j in 0..k {
                for a in 0..3 {
                    o[a] += wr[j] * dr[3 * j + a];
                }
            }
        }
        Ok(self.push(out, Op::RowContract { w: w.0, d }))
    }

    /// Records an op whose forward value is computed by the caller.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], output: Tensor) -> Var {
        self.push(output, Op::Custom { op, inputs: inputs.iter().map(|v| v.0).collect() })
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let ov = &self.nodes[out.0].value;
        if ov.len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar, got {}x{}", ov.rows, ov.cols)));
        }
        self.backward_with(out, Tensor::scalar(1.0))
    }

    /// Reverse pass seeded with an arbitrary output gradient.
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        self.nodes[out.0].value.same_shape(&seed, "backward seed")?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for id in (0..=out.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |i: usize| &self.nodes[i].value;
        let y = &self.nodes[id].value;
        let live = |i: usize| self.nodes[i].needs_grad;
        let mut acc = |i: usize, t: Tensor| {
            if !live(i) {
                return;
            }
            match &mut grads[i] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let elementwise = |x: &Tensor, f: &dyn Fn(f64, f64, f64) -> f64| -> Tensor {
            let data = x.data.iter().zip(&y.data).zip(&g.data).map(|((&xv, &yv), &gv)| f(xv, yv, gv)).collect();
            Tensor { rows: x.rows, cols: x.cols, data }
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (n, i_dim, o_dim) = (xv.rows, wv.rows, wv.cols);
                let need_x = live(*x);
                let mut dx = Tensor::zeros(if need_x { n } else { 0 }, i_dim);
                let mut dw = Tensor::zeros(i_dim, o_dim);
                let mut db = Tensor::zeros(1, o_dim);
                for r in 0..n {
                    for (d, gv) in db.data.iter_mut().zip(g.row(r)) {
                        *d += gv;
                    }
                }
                if need_x {
                    gemm(n, o_dim, i_dim, (&g.data, o_dim, 1), (&wv.data, 1, o_dim), &mut dx.data);
                }
                gemm(i_dim, n, o_dim, (&xv.data, 1, i_dim), (&g.data, o_dim, 1), &mut dw.data);
                acc(*x, dx);
                acc(*w, dw);
                acc(*b, db);
            }
            Op::Softplus { x, beta } => {
                let beta = *beta;
                acc(*x, elementwise(val(*x), &|xv, _, gv| gv * sigmoid(beta * xv)));
            }
            Op::Sin(x) => acc(*x, elementwise(val(*x), &|xv, _, gv| gv * xv.cos())),
            Op::Cos(x) => acc(*x, elementwise(val(*x), &|xv, _, gv| -gv * xv.sin())),
            Op::Exp(x) => acc(*x, elementwise(val(*x), &|_, yv, gv| gv * yv)),
            Op::Sigmoid(x) => acc(*x, elementwise(val(*x), &|_, yv, gv| gv * yv * (1.0 - yv))),
            Op::Abs(x) => acc(
                *x,
                elementwise(val(*x), &|xv, _, gv| {
                    if xv > 0.0 {
                        gv
                    } else if xv < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                }),
            ),
            Op::Square(x) => acc(*x, elementwise(val(*x), &|xv, _, gv| 2.0 * xv * gv)),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let da = Tensor { rows: g.rows, cols: g.cols, data: g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect() };
                let db = Tensor { rows: g.rows, cols: g.cols, data: g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect() };
                acc(*a, da);
                acc(*b, db);
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let da = Tensor { rows: g.rows, cols: g.cols, data: g.data.iter().zip(&bv.data).map(|(x, y)| x / y).collect() };
                let data = g.data.iter().zip(&av.data).zip(&bv.data).map(|((gv, x), y)| -gv * x / (y * y)).collect();
                acc(*a, da);
                acc(*b, Tensor { rows: g.rows, cols: g.cols, data });
            }
            Op::AddRow { x, row } => {
                let mut dr = Tensor::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (d, v) in dr.data.iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                acc(*x, g.clone());
                acc(*row, dr);
            }
            Op::Scale { x, s } => acc(*x, g.map(|v| v * s)),
            Op::MulConst { x, c } => {
                let data = g.data.iter().zip(&c.data).map(|(a, b)| a * b).collect();
                acc(*x, Tensor { rows: g.rows, cols: g.cols, data });
            }
            Op::AddConst { x } => acc(*x, g.clone()),
            Op::Sum(x) => {
                let xv = val(*x);
                acc(*x, Tensor::full(xv.rows, xv.cols, g.item()));
            }
            Op::Mean(x) => {
                let xv = val(*x);
                acc(*x, Tensor::full(xv.rows, xv.cols, g.item() / xv.len().max(1) as f64));
            }
            Op::RowSum(x) => {
                let xv = val(*x);
                let mut d = Tensor::zeros(xv.rows, xv.cols);
                for r in 0..xv.rows {
                    let gv = g.data[r];
                    d.row_mut(r).iter_mut().for_each(|v| *v = gv);
                }
                acc(*x, d);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = val(p).cols;
                    let mut d = Tensor::zeros(g.rows, pc);
                    for r in 0..g.rows {
                        d.row_mut(r).copy_from_slice(&g.row(r)[off..off + pc]);
                    }
                    acc(p, d);
                    off += pc;
                }
            }
            Op::GatherRows { x, idx } => {
                let xv = val(*x);
                let mut d = Tensor::zeros(xv.rows, xv.cols);
                for (o, &i) in idx.iter().enumerate() {
                    for (dv, gv) in d.row_mut(i).iter_mut().zip(g.row(o)) {
                        *dv += gv;
                    }
                }
                acc(*x, d);
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                acc(*x, elementwise(val(*x), &|xv, _, gv| if xv > lo && xv < hi { gv } else { 0.0 }));
            }
            Op::GridSample { plane, coords, res } => {
                let (pv, cv, res) = (val(*plane), val(*coords), *res);
                let ch = pv.cols;
                let mut dp = Tensor::zeros(pv.rows, ch);
                let mut dc = Tensor::zeros(cv.rows, 2);
                let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
                for r in 0..cv.rows {
                    let (cx, cy) = (cv.get(r, 0), cv.get(r, 1));
                    let (x0, x1, fx, sx) = bilinear_setup(cx, res);
                    let (y0, y1, fy, sy) = bilinear_setup(cy, res);
                    let gr = g.row(r);
                    let cells = [y0 * res + x0, y0 * res + x1, y1 * res + x0, y1 * res + x1];
                    let weights = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
                    for (cell, w) in cells.iter().zip(weights) {
                        for (d, gv) in dp.row_mut(*cell).iter_mut().zip(gr) {
                            *d += w * gv;
                        }
                    }
                    let v00 = dot(pv.row(cells[0]), gr);
                    let v10 = dot(pv.row(cells[1]), gr);
                    let v01 = dot(pv.row(cells[2]), gr);
                    let v11 = dot(pv.row(cells[3]), gr);
                    let inside = |c: f64| c > -1.0 && c < 1.0;
                    if inside(cx) {
                        dc.data[r * 2] = sx * ((1.0 - fy) * (v10 - v00) + fy * (v11 - v01));
                    }
                    if inside(cy) {
                        dc.data[r * 2 + 1] = sy * ((1.0 - fx) * (v01 - v00) + fx * (v11 - v10));
                    }
                }
                acc(*plane, dp);
                acc(*coords, dc);
            }
            Op::AxisAngleToMatrix(x) => {
                let xv = val(*x);
                let mut d = Tensor::zeros(xv.rows, 3);
                for r in 0..xv.rows {
                    let w = xv.row(r);
                    let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
                    let (a, b, da, db) = rodrigues_coeffs(theta);
                    let k = skew(w);
                    let k2 = mat_mul3(&k, &k);
                    let gr = g.row(r);
                    let inner = |m: &[[f64; 3]; 3]| -> f64 {
                        let mut s = 0.0;
                        for i in 0..3 {
                            for j in 0..3 {
                                s += gr[i * 3 + j] * m[i][j];
                            }
                        }
                        s
                    };
                    let gk = inner(&k);
                    let gk2 = inner(&k2);
                    for c in 0..3 {
                        let mut e = [0.0; 3];
                        e[c] = 1.0;
                        let ek = skew(&e);
                        let ekk = mat_mul3(&ek, &k);
                        let kek = mat_mul3(&k, &ek);
                        d.data[r * 3 + c] = da * w[c] * gk + a * inner(&ek) + db * w[c] * gk2 + b * (inner(&ekk) + inner(&kek));
                    }
                }
                acc(*x, d);
            }
            Op::AxisAngleToQuat(x) => {
                let xv = val(*x);
                let mut d = Tensor::zeros(xv.rows, 3);
                for r in 0..xv.rows {
                    let w = xv.row(r);
                    let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
                    let (s, ds) = half_angle_coeffs(theta);
                    let gr = g.row(r);
                    // q0 = cos(θ/2): dq0/dw = -s w / 2;  qv = s w: d/dw = s I + ds w wᵀ
                    let gw = gr[1] * w[0] + gr[2] * w[1] + gr[3] * w[2];
                    for c in 0..3 {
                        d.data[r * 3 + c] = -0.5 * s * w[c] * gr[0] + s * gr[1 + c] + ds * w[c] * gw;
                    }
                }
                acc(*x, d);
            }
            Op::QuatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let mut da = Tensor::zeros(av.rows, 4);
                let mut db = Tensor::zeros(av.rows, 4);
                for r in 0..av.rows {
                    let gr = g.row(r);
                    let (qa, qb) = (av.row(r), bv.row(r));
                    let conj = |q: &[f64]| [q[0], -q[1], -q[2], -q[3]];
                    da.row_mut(r).copy_from_slice(&quat_mul(gr, &conj(qb)));
                    db.row_mut(r).copy_from_slice(&quat_mul(&conj(qa), gr));
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::QuatNormalize(x) => {
                let xv = val(*x);
                let mut d = Tensor::zeros(xv.rows, 4);
                for r in 0..xv.rows {
                    let q = xv.row(r);
                    let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
                    let (yr, gr) = (y.row(r), g.row(r));
                    let yg: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..4 {
                        d.data[r * 4 + c] = (gr[c] - yr[c] * yg) / n;
                    }
                }
                acc(*x, d);
            }
            Op::Mat3MulConstLeft { x, c } => {
                let mut d = Tensor::zeros(g.rows, 9);
                for r in 0..g.rows {
                    let (a, gr) = (c.row(r), g.row(r));
                    let o = d.row_mut(r);
                    // dX = Cᵀ G
                    for i in 0..3 {
                        for j in 0..3 {
                            o[i * 3 + j] = a[i] * gr[j] + a[3 + i] * gr[3 + j] + a[6 + i] * gr[6 + j];
                        }
                    }
                }
                acc(*x, d);
            }
            Op::RowContract { w, d } => {
                let wv = val(*w);
                let k = wv.cols;
                let mut dw = Tensor::zeros(wv.rows, k);
                for r in 0..wv.rows {
                    let (dr, gr) = (d.row(r), g.row(r));
                    for j in 0..k {
                        dw.data[r * k + j] = gr[0] * dr[3 * j] + gr[1] * dr[3 * j + 1] + gr[2] * dr[3 * j + 2];
                    }
                }
                acc(*w, dw);
            }
            Op::Custom { op, inputs } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
                let dins = op.backward(&ins, y, g);
                for (&i, d) in inputs.iter().zip(dins) {
                    if let Some(d) = d {
                        acc(i, d);
                    }
                }
            }
        }
    }
}

/// `s = sin(θ/2)/θ` and `(ds/dθ)/θ`.
fn half_angle_coeffs(theta: f64) -> (f64, f64) {
    if theta < 1e-3 {
        let t2 = theta * theta;
        (0.5 - t2 / 48.0 + t2 * t2 / 3840.0, -1.0 / 24.0 + t2 / 960.0)
    } else {
        let (s, c) = (0.5 * theta).sin_cos();
        (s / theta, (0.5 * theta * c - s) / (theta * theta * theta))
    }
}

/// `c += a · b` for row-major `c` (m×n); `a` (m×k) and `b` (k×n) are given as
/// `(data, row stride, column stride)`.
fn gemm(m: usize, k: usize, n: usize, a: (&[f64], usize, usize), b: (&[f64], usize, usize), c: &mut [f64]) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    assert!(a.0.len() >= m * k && b.0.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_closed_form_values() {
        assert!((softplus(0.0, 10.0) - 2f64.ln() / 10.0).abs() < 1e-15);
        assert!((softplus(0.0, 10.0) - 0.069315).abs() < 1e-6);
        assert!((softplus(10.0, 10.0) - 10.0).abs() < 1e-40);
        assert!(softplus(-50.0, 10.0) >= 0.0);
    }

    #[test]
    fn affine_forward_matches_hand_computation() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = t.constant(Tensor::from_vec(2, 3, vec![1.0, 0.0, -1.0, 0.5, 2.0, 0.0]).unwrap());
        let b = t.constant(Tensor::from_vec(1, 3, vec![0.1, 0.2, 0.3]).unwrap());
        let y = t.affine(x, w, b).unwrap();
        assert_eq!(t.value(y).data, vec![2.1, 4.2, -0.7, 5.1, 8.2, -2.7]);
    }

    #[test]
    fn shape_errors_at_record_time() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::zeros(3, 2));
        assert!(matches!(t.add(a, b), Err(Error::Shape(_))));
        assert!(matches!(t.affine(a, a, a), Err(Error::Shape(_))));
        assert!(matches!(t.quat_mul(a, a), Err(Error::Shape(_))));
        assert!(matches!(t.backward(a), Err(Error::Shape(_))));
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        let mut t = Tape::new();
        let x = t.param(ParamId(0), &Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let z = t.add(y, x).unwrap();
        let g = t.backward(z).unwrap();
        assert_eq!(g.params()[&ParamId(0)].item(), 7.0);
    }

    #[test]
    fn zero_axis_angle_is_identity_with_finite_gradient() {
        let mut t = Tape::new();
        let w = t.param(ParamId(0), &Tensor::zeros(1, 3));
        let q = t.axis_angle_to_quat(w).unwrap();
        assert_eq!(t.value(q).data, vec![1.0, 0.0, 0.0, 0.0]);
        let m = t.axis_angle_to_matrix(w).unwrap();
        assert_eq!(t.value(m).data, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let s = t.sum(q);
        let g = t.backward(s).unwrap();
        assert_eq!(g.params()[&ParamId(0)].data, vec![0.5, 0.5, 0.5]);
    }
}

