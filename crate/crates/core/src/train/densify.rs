//! Adaptive density control: clone, split, prune.

use serde::{Deserialize, Serialize};

use super::{GradStats, TrainState, GAUSS_TENSORS};
use crate::error::{Error, Result};
use crate::mesh::MorphableMesh;
use crate::scene::{quat_to_matrix, GaussianCloud, SourceTag};

pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    pub before: usize,
    pub after: usize,
}

/// Offset of half a standard deviation along the largest axis.
fn major_axis_offset(cloud: &GaussianCloud, i: usize) -> [f64; 3] {
    let ls = cloud.log_scales[i];
    let a = (0..3).max_by(|&x, &y| ls[x].total_cmp(&ls[y])).unwrap_or(0);
    let r = quat_to_matrix(cloud.rotations[i]);
    let s = 0.5 * ls[a].exp();
    [r[(0, a)] * s, r[(1, a)] * s, r[(2, a)] * s]
}

fn push_copy(dst: &mut GaussianCloud, src: &GaussianCloud, i: usize, pos: [f64; 3], log_scale: [f64; 3]) {
    dst.push(pos, src.rotations[i], log_scale, src.opacity_logits[i], src.colors[i], SourceTag::Densified);
}

/// Runs one densification pass on `state` and resets the gradient statistics.
///
/// Rows that survive untouched keep their order, optimiser moments and prior
/// data; clones and split children are appended with zero moments and a
/// freshly built neighbourhood.
pub fn densify_and_prune(state: &mut TrainState, mesh: &MorphableMesh) -> Result<DensifyReport> {
    let cfg = &state.config;
    let cloud = &state.model.cloud;
    let n = cloud.len();
    let split_above = cfg.split_scale_fraction * state.scene_extent;
    let mut report = DensifyReport { before: n, ..Default::default() };

    let pruned: Vec<bool> = (0..n).map(|i| cloud.opacity(i) < cfg.prune_opacity_threshold).collect();
    let keep_all = pruned.iter().all(|&p| p);
    if keep_all {
        log::warn!("pruning would remove every gaussian; skipped");
    }
    let mut budget = cfg.max_gaussians.saturating_sub(n);
    let mut survivors = Vec::with_capacity(n);
    let mut born = GaussianCloud::default();
    for i in 0..n {
        if pruned[i] && !keep_all {
            report.pruned += 1;
            continue;
        }
        let g = state.stats.mean(i);
        if g < cfg.densify_grad_threshold || budget == 0 {
            survivors.push(i);
            continue;
        }
        budget -= 1;
        let ls = cloud.log_scales[i];
        let off = major_axis_offset(cloud, i);
        let p = cloud.positions[i];
        let max_scale = ls.iter().copied().fold(f64::NEG_INFINITY, f64::max).exp();
        if max_scale <= split_above {
            survivors.push(i);
            push_copy(&mut born, cloud, i, [p[0] + off[0], p[1] + off[1], p[2] + off[2]], ls);
            report.cloned += 1;
        } else {
            let d = SPLIT_SCALE_DIVISOR.ln();
            let child = [ls[0] - d, ls[1] - d, ls[2] - d];
            push_copy(&mut born, cloud, i, [p[0] + off[0], p[1] + off[1], p[2] + off[2]], child);
            push_copy(&mut born, cloud, i, [p[0] - off[0], p[1] - off[1], p[2] - off[2]], child);
            report.split += 1;
        }
    }
    born.quantize_f32();
    let mut next = cloud.select(&survivors);
    for j in 0..born.len() {
        next.push(
            born.positions[j],
            born.rotations[j],
            born.log_scales[j],
            born.opacity_logits[j],
            born.colors[j],
            SourceTag::Densified,
        );
    }
    next.quantize_f32();
    if next.is_empty() {
        return Err(Error::Training("densification left no gaussians".into()));
    }

    let mut cache = state.model.cache.select(&survivors);
    cache.extend(mesh, &state.model.field.config, &born.positions)?;

    let source: Vec<Option<usize>> = survivors.iter().map(|&i| Some(i)).chain((0..born.len()).map(|_| None)).collect();
    for (name, width) in GAUSS_TENSORS {
        state.adam.remap_rows(&format!("gauss.{name}"), width, &source);
    }

    report.after = next.len();
    state.model.cloud = next;
    state.model.cache = cache;
    state.stats = GradStats::new(report.after);
    log::debug!("densify: {report:?}");
    Ok(report)
}
