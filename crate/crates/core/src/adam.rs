//! Adam optimizer with bias correction.

use crate::param::{Param, ParamSet};
use crate::scalar::Scalar;
use std::collections::HashMap;

pub struct Adam<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<String, (Vec<S>, Vec<S>)>,
}

impl<S: Scalar> Adam<S> {
    pub fn new() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: HashMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter of `model` using the gradients
    /// currently stored on the parameter tensors. Parameters without a
    /// gradient are treated as having gradient zero (their moments decay but
    /// a zero-initialized state leaves them unchanged).
    pub fn step(&mut self, model: &mut impl ParamSet<S>, lr: f64) {
        self.step += 1;
        let t = self.step;
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let eps = S::from_f64(self.eps);
        let lr = S::from_f64(lr);
        let bc1 = S::from_f64(1.0 - self.beta1.powi(t as i32));
        let bc2 = S::from_f64(1.0 - self.beta2.powi(t as i32));
        let one = S::one();

        let moments = &mut self.moments;
        model.visit_params(&mut |p: &mut Param<S>| {
            let n = p.tensor.numel();
            let (m, v) = moments
                .entry(p.name().to_string())
                .or_insert_with(|| (vec![S::zero(); n], vec![S::zero(); n]));
            assert_eq!(m.len(), n, "optimizer state shape drifted for {}", p.name());
            let Some(grad) = p.tensor.grad() else {
                // zero gradient: m,v decay; update is m_hat/(sqrt(v_hat)+eps),
                // which stays 0 for zero-initialized state
                for (mi, vi) in m.iter_mut().zip(v.iter_mut()) {
                    *mi = b1 * *mi;
                    *vi = b2 * *vi;
                }
                let data = p.tensor.data_mut();
                for i in 0..n {
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    data[i] = data[i] - lr * mh / (vh.sqrt() + eps);
                }
                return;
            };
            let grad = grad.to_vec();
            let data = p.tensor.data_mut();
            for i in 0..n {
                m[i] = b1 * m[i] + (one - b1) * grad[i];
                v[i] = b2 * v[i] + (one - b2) * grad[i] * grad[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] = data[i] - lr * mh / (vh.sqrt() + eps);
            }
        });
    }

    /// State export for checkpointing: (name, first moment, second moment),
    /// sorted by name for a stable file layout.
    pub fn export_state(&self) -> Vec<(String, Vec<S>, Vec<S>)> {
        let mut out: Vec<_> = self
            .moments
            .iter()
            .map(|(k, (m, v))| (k.clone(), m.clone(), v.clone()))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn import_state(&mut self, step: u64, entries: Vec<(String, Vec<S>, Vec<S>)>) {
        self.step = step;
        self.moments = entries.into_iter().map(|(k, m, v)| (k, (m, v))).collect();
    }
}

impl<S: Scalar> Default for Adam<S> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    struct One {
        p: Param<f64>,
    }
    impl ParamSet<f64> for One {
        fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
            f(&mut self.p);
        }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut m = One { p: Param::new("w", Tensor::from_vec(&[2], vec![1.5, -0.5])) };
        let mut opt = Adam::new();
        m.p.tensor.accumulate_grad(&[0.0, 0.0]);
        opt.step(&mut m, 1e-3);
        assert_eq!(m.p.tensor.data(), &[1.5, -0.5]);
        // also when no gradient is stored at all
        m.p.tensor.zero_grad();
        let mut m2 = One { p: Param::new("w", Tensor::from_vec(&[2], vec![1.5, -0.5])) };
        opt.step(&mut m2, 1e-3);
        assert_eq!(m2.p.tensor.data(), &[1.5, -0.5]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        // constant gradient g: bias-corrected first step is lr * g/(|g| + eps),
        // within 1e-9 of lr for unit-scale gradients
        for &g in &[3.0, -2.0] {
            let mut m = One { p: Param::new("w", Tensor::scalar(1.0)) };
            m.p.tensor.accumulate_grad(&[g]);
            let mut opt = Adam::new();
            opt.step(&mut m, 0.1);
            let delta: f64 = m.p.tensor.item() - 1.0;
            assert!((delta.abs() - 0.1).abs() < 1e-9, "step magnitude {delta}");
            assert_eq!(delta.signum(), -g.signum());
        }
    }

    #[test]
    fn quadratic_descent_is_monotone() {
        // f(w) = w^2 from w = 1, lr = 0.1: |w| decreases every step
        let mut m = One { p: Param::new("w", Tensor::scalar(1.0)) };
        let mut opt = Adam::new();
        let mut prev = 1.0f64;
        for _ in 0..10 {
            let w = m.p.tensor.item();
            m.p.tensor.zero_grad();
            m.p.tensor.accumulate_grad(&[2.0 * w]);
            opt.step(&mut m, 0.1);
            let now: f64 = m.p.tensor.item();
            assert!(now.abs() < prev.abs(), "|w| must decrease: {prev} -> {now}");
            prev = now;
        }
    }

    #[test]
    fn state_roundtrip_is_exact() {
        let mut m = One { p: Param::new("w", Tensor::scalar(1.0)) };
        let mut opt = Adam::new();
        m.p.tensor.accumulate_grad(&[0.7]);
        opt.step(&mut m, 0.01);
        let state = opt.export_state();
        let mut opt2 = Adam::new();
        opt2.import_state(opt.step_count(), state);
        // continuing both optimizers gives bit-identical results
        let mut ma = One { p: Param::new("w", m.p.tensor.clone()) };
        let mut mb = One { p: Param::new("w", m.p.tensor.clone()) };
        ma.p.tensor.zero_grad();
        mb.p.tensor.zero_grad();
        ma.p.tensor.accumulate_grad(&[-0.3]);
        mb.p.tensor.accumulate_grad(&[-0.3]);
        opt.step(&mut ma, 0.01);
        opt2.step(&mut mb, 0.01);
        assert_eq!(ma.p.tensor.data(), mb.p.tensor.data());
    }
}
