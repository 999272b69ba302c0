//! AdamW with decoupled weight decay, global-norm clipping and the one-cycle
//! learning-rate schedule.

use alloc::vec::Vec;

use crate::autograd::{Mat, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl AdamW {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Mat> = (0..params.len()).map(|p| {
            let s = params.get(p);
            Mat::zeros(s.rows, s.cols)
        }).collect();
        Self { beta1, beta2, eps, weight_decay, t: 0, m: zeros.clone(), v: zeros }
    }

    /// One update. Parameters without a gradient or rejected by `trainable`
    /// are left untouched, moments included.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Mat>], lr: f64, trainable: impl Fn(ParamId) -> bool) {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for (p, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if !trainable(p) {
                continue;
            }
            let w = params.get_mut(p);
            let (m, v) = (&mut self.m[p], &mut self.v[p]);
            for i in 0..w.data.len() {
                let gi = g.data[i];
                w.data[i] *= 1.0 - lr * self.weight_decay;
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                w.data[i] -= lr * mh / (libm::sqrt(vh) + self.eps);
            }
        }
    }
}

/// Scales gradients in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_grad_norm(grads: &mut [Option<Mat>], max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.iter().flatten().map(Mat::sum_sq).sum::<f64>());
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / (norm + 1e-6);
        for g in grads.iter_mut().flatten() {
            g.data.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Linear warmup from `base` to `peak` over the first `warmup_frac` of the
/// steps, then cosine decay back to `base` at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, peak: f64, base: f64, warmup_frac: f64) -> f64 {
    if total_steps == 0 {
        return base;
    }
    let s = step.min(total_steps) as f64;
    let total = total_steps as f64;
    let warm = warmup_frac * total;
    let lr = if s <= warm {
        if warm == 0.0 { peak } else { base + (peak - base) * s / warm }
    } else {
        let progress = (s - warm) / (total - warm);
        base + (peak - base) * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))
    };
    lr.clamp(base, peak)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn schedule_endpoints() {
        let (peak, base) = (1e-5, 1e-5 / 25.0);
        assert!((lr_schedule(0, 100, peak, base, 0.3) - 4e-7).abs() < 1e-18);
        assert!((lr_schedule(30, 100, peak, base, 0.3) - peak).abs() < 1e-18);
        assert!((lr_schedule(100, 100, peak, base, 0.3) - base).abs() < 1e-18);
        for s in 0..=100 {
            let lr = lr_schedule(s, 100, peak, base, 0.3);
            assert!((base..=peak).contains(&lr));
        }
    }

    #[test]
    fn adamw_first_step_matches_closed_form() {
        let mut ps = ParamStore::new();
        ps.add("w", Mat::from_rows(&[vec![1.0, -2.0]]));
        let mut opt = AdamW::new(&ps, 0.9, 0.999, 1e-8, 0.01);
        let g = vec![Some(Mat::from_rows(&[vec![0.5, -0.25]]))];
        opt.step(&mut ps, &g, 0.1, |_| true);
        // Bias-corrected first step moves each weight by lr·sign(g) after decay.
        let w = &ps.get(0).data;
        let expect0 = 1.0 * (1.0 - 0.1 * 0.01) - 0.1 * 0.5 / (0.5 + 1e-8);
        let expect1 = -2.0 * (1.0 - 0.1 * 0.01) + 0.1 * 0.25 / (0.25 + 1e-8);
        assert!((w[0] - expect0).abs() < 1e-12);
        assert!((w[1] - expect1).abs() < 1e-12);
    }

    #[test]
    fn frozen_params_untouched() {
        let mut ps = ParamStore::new();
        ps.add("a", Mat::from_rows(&[vec![1.0]]));
        ps.add("b", Mat::from_rows(&[vec![1.0]]));
        let mut opt = AdamW::new(&ps, 0.9, 0.999, 1e-8, 0.01);
        let g = vec![Some(Mat::scalar(1.0)), Some(Mat::scalar(1.0))];
        opt.step(&mut ps, &g, 0.1, |p| p == 0);
        assert_ne!(ps.get(0).data[0], 1.0);
        assert_eq!(ps.get(1).data[0], 1.0);
        assert_eq!(opt.m[1].data[0], 0.0);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Some(Mat::from_rows(&[vec![3.0, 4.0]])), None];
        let n = clip_grad_norm(&mut g, 1.0);
        assert!((n - 5.0).abs() < 1e-12);
        let after = libm::sqrt(g[0].as_ref().unwrap().sum_sq());
        assert!(after <= 1.0 + 1e-9);
    }
}
