//! The rasterizer as a tape op.

use std::any::Any;
use std::cell::RefCell;

use super::{footprint_backward, project_all, render, render_backward, ProjectedSplat};
use crate::autodiff::tape::{CustomOp, Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scene::Camera;

/// Inputs, in order: positions N×3, unit quaternions N×4, log-scales N×3,
/// opacities N×1, colors N×3. Output: (H·W)×3 image.
pub struct RasterOp {
    camera: Camera,
    splats: Vec<ProjectedSplat>,
    grad_norms: RefCell<Vec<f64>>,
}

impl RasterOp {
    pub fn camera(&self) -> &Camera {
        &self.camera
    }

    pub fn splats(&self) -> &[ProjectedSplat] {
        &self.splats
    }

    /// ‖∂L/∂mean2d‖ per input row from the last backward pass, with the mean
    /// in normalized device coordinates (0 for culled rows).
    pub fn mean2d_grad_norms(&self) -> Vec<f64> {
        self.grad_norms.borrow().clone()
    }
}

impl CustomOp for RasterOp {
    fn name(&self) -> &'static str {
        "rasterize"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, out_grad: &Tensor) -> Vec<Option<Tensor>> {
        let (pos, quat, ls) = (inputs[0], inputs[1], inputs[2]);
        let n = pos.rows;
        let sg = render_backward(&self.splats, &self.camera, &out_grad.data);
        let mut dpos = Tensor::zeros(n, 3);
        let mut dquat = Tensor::zeros(n, 4);
        let mut dls = Tensor::zeros(n, 3);
        let mut dop = Tensor::zeros(n, 1);
        let mut dcol = Tensor::zeros(n, 3);
        let mut norms = vec![0.0; n];
        let (hw, hh) = (0.5 * self.camera.width as f64, 0.5 * self.camera.height as f64);
        for (k, s) in self.splats.iter().enumerate() {
            let i = s.source_index;
            let g3 = footprint_backward(
                row3(pos, i),
                [quat.get(i, 0), quat.get(i, 1), quat.get(i, 2), quat.get(i, 3)],
                row3(ls, i),
                &self.camera,
                sg.mean2d[k],
                sg.cov2d[k],
            );
            dpos.row_mut(i).copy_from_slice(&g3.position);
            dquat.row_mut(i).copy_from_slice(&g3.rotation);
            dls.row_mut(i).copy_from_slice(&g3.log_scale);
            dop.data[i] = sg.opacity[k];
            dcol.row_mut(i).copy_from_slice(&sg.color[k]);
            norms[i] = (sg.mean2d[k][0] * hw).hypot(sg.mean2d[k][1] * hh);
        }
        *self.grad_norms.borrow_mut() = norms;
        vec![Some(dpos), Some(dquat), Some(dls), Some(dop), Some(dcol)]
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

fn row3(t: &Tensor, i: usize) -> [f64; 3] {
    [t.get(i, 0), t.get(i, 1), t.get(i, 2)]
}

/// Renders the deformed Gaussians held in `inputs` and records the result.
pub fn rasterize(tape: &mut Tape, camera: &Camera, inputs: [Var; 5]) -> Result<Var> {
    let n = tape.shape(inputs[0]).0;
    let widths = [3, 4, 3, 1, 3];
    for (v, w) in inputs.iter().zip(widths) {
        if tape.shape(*v) != (n, w) {
            let (r, c) = tape.shape(*v);
            return Err(Error::Shape(format!("rasterize input {r}x{c}, expected {n}x{w}")));
        }
    }
    let positions = tape.value(inputs[0]).to_rows::<3>();
    let rotations = tape.value(inputs[1]).to_rows::<4>();
    let log_scales = tape.value(inputs[2]).to_rows::<3>();
    let opacities = tape.value(inputs[3]).data.clone();
    let colors = tape.value(inputs[4]).to_rows::<3>();
    let splats = project_all(&positions, &rotations, &log_scales, &opacities, &colors, camera);
    let out = render(&splats, camera);
    let image = Tensor { rows: camera.width * camera.height, cols: 3, data: out.image.data };
    let op = RasterOp { camera: camera.clone(), splats, grad_norms: RefCell::new(vec![0.0; n]) };
    Ok(tape.custom(Box::new(op), &inputs, image))
}
