//! Adam and geometric learning-rate decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// `lr(step) = start · (end/start)^(min(step, decay_steps) / decay_steps)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr_start: f64,
    pub lr_end: f64,
    pub decay_steps: u64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule { lr_start: lr, lr_end: lr, decay_steps: 1 }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if self.decay_steps == 0 {
            return self.lr_end;
        }
        let t = step.min(self.decay_steps) as f64 / self.decay_steps as f64;
        if t >= 1.0 {
            return self.lr_end;
        }
        self.lr_start * (self.lr_end / self.lr_start).powf(t)
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moment estimates for one tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// Per-tensor Adam state keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub moments: BTreeMap<String, Moments>,
    /// Steps skipped because the gradient was not finite.
    pub rejected: u64,
}

impl Adam {
    pub fn new() -> Self {
        Adam::default()
    }

    /// One bias-corrected update of `params` in place. Returns `false` (and
    /// leaves everything untouched) when `grads` contains a non-finite value.
    pub fn step(&mut self, name: &str, params: &mut [f64], grads: &[f64], lr: f64) -> bool {
        assert_eq!(params.len(), grads.len(), "adam: {name} gradient length");
        if grads.iter().any(|g| !g.is_finite()) {
            self.rejected += 1;
            log::warn!("adam: non-finite gradient for {name}, step rejected ({} so far)", self.rejected);
            return false;
        }
        let st = self.moments.entry(name.to_string()).or_default();
        if st.m.len() != params.len() {
            st.m.resize(params.len(), 0.0);
            st.v.resize(params.len(), 0.0);
        }
        st.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(st.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(st.step as i32);
        for ((p, &g), (m, v)) in params.iter_mut().zip(grads).zip(st.m.iter_mut().zip(st.v.iter_mut())) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
        true
    }

    /// Reorders/extends the per-row moments of a tensor with `width` columns:
    /// new row `r` takes old row `source[r]`, or zeros when `None`.
    pub fn remap_rows(&mut self, name: &str, width: usize, source: &[Option<usize>]) {
        if let Some(st) = self.moments.get_mut(name) {
            let remap = |old: &[f64]| -> Vec<f64> {
                let mut out = Vec::with_capacity(source.len() * width);
                for s in source {
                    match s {
                        Some(i) if (i + 1) * width <= old.len() => out.extend_from_slice(&old[i * width..(i + 1) * width]),
                        _ => out.extend(std::iter::repeat_n(0.0, width)),
                    }
                }
                out
            };
            st.m = remap(&st.m);
            st.v = remap(&st.v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let pos = LrSchedule { lr_start: 7e-4, lr_end: 8e-6, decay_steps: 20_000 };
        assert!((pos.lr_at(0) - 7e-4).abs() < 1e-18);
        assert!((pos.lr_at(20_000) - 8e-6).abs() < 1e-18);
        assert_eq!(pos.lr_at(50_000), 8e-6);
        let mid = (7e-4f64 * 8e-6).sqrt();
        assert!((pos.lr_at(10_000) - mid).abs() < 1e-15);
        assert!((mid - 7.483e-5).abs() < 1e-8);
        // monotone
        let mut prev = f64::INFINITY;
        for s in (0..=20_000).step_by(500) {
            let lr = pos.lr_at(s);
            assert!(lr < prev);
            prev = lr;
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut adam = Adam::new();
        let mut p = vec![1.0, -2.0, 0.5];
        adam.step("p", &mut p, &[0.0; 3], 0.1);
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        for g in [3.0, -0.02, 1e3] {
            let mut adam = Adam::new();
            let mut p = vec![1.0];
            adam.step("p", &mut p, &[g], 0.01);
            let expected = 1.0 - 0.01 * g.signum();
            assert!((p[0] - expected).abs() < 1e-8, "g={g} p={}", p[0]);
        }
    }

    #[test]
    fn quadratic_descent_is_monotone() {
        let mut adam = Adam::new();
        let mut x = vec![1.0f64];
        let mut prev = x[0].abs();
        for _ in 0..10 {
            let g = 2.0 * x[0];
            adam.step("x", &mut x, &[g], 0.1);
            assert!(x[0].abs() < prev);
            prev = x[0].abs();
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut adam = Adam::new();
        let mut p = vec![1.0, 2.0];
        assert!(!adam.step("p", &mut p, &[f64::NAN, 1.0], 0.1));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(adam.rejected, 1);
    }

    #[test]
    fn remap_rows_moves_and_zero_fills() {
        let mut adam = Adam::new();
        let mut p = vec![0.0; 4];
        adam.step("p", &mut p, &[1.0, 2.0, 3.0, 4.0], 0.1);
        adam.remap_rows("p", 2, &[Some(1), None, Some(0)]);
        let st = &adam.moments["p"];
        assert_eq!(st.m.len(), 6);
        assert_eq!(&st.m[2..4], &[0.0, 0.0]);
        assert!((st.m[0] - 0.3).abs() < 1e-12 && (st.m[4] - 0.1).abs() < 1e-12);
    }
}
