use serde::{Deserialize, Serialize};

use crate::nn::real::{lit, Real};
use crate::nn::tensor::{Param, Parameters, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam with a constant learning rate.
///
/// Moments are matched to parameters by visit order, so the state must be
/// used with the same set of modules, visited the same way, on every step.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update over every parameter of `modules`, in order.
    pub fn step(&mut self, modules: &mut [&mut dyn Parameters<T>]) {
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let b1 = lit::<T>(c.beta1);
        let b2 = lit::<T>(c.beta2);
        let one = T::one();
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        let lr = lit::<T>(c.lr);
        let eps = lit::<T>(c.eps);
        let mut idx = 0;
        let first = &mut self.first;
        let second = &mut self.second;
        for m in modules.iter_mut() {
            m.visit_mut(&mut |p: &mut Param<T>| {
                if first.len() <= idx {
                    first.push(Tensor::zeros(p.value.dims()));
                    second.push(Tensor::zeros(p.value.dims()));
                }
                assert_eq!(first[idx].dims(), p.value.dims(), "adam state does not match {}", p.name);
                let mv = first[idx].data_mut();
                let vv = second[idx].data_mut();
                let g = p.grad.data();
                for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(mv.iter_mut()).zip(vv.iter_mut()) {
                    *mi = b1 * *mi + (one - b1) * gi;
                    *vi = b2 * *vi + (one - b2) * gi * gi;
                    let mhat = *mi / bc1;
                    let vhat = *vi / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                }
                idx += 1;
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scalar(Param<f64>);

    impl Parameters<f64> for Scalar {
        fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<f64>)) {
            f(&self.0)
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
            f(&mut self.0)
        }
    }

    fn scalar(v: f64, g: f64) -> Scalar {
        let mut p = Param::new("w", Tensor::from_vec(&[1], vec![v]).unwrap());
        p.grad.data_mut()[0] = g;
        Scalar(p)
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut s = scalar(0.75, 0.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut [&mut s]);
        assert_eq!(s.0.value.data()[0], 0.75);
    }

    #[test]
    fn first_step_closed_form() {
        // t = 1: m̂ = g, v̂ = g², so Δ = −lr·g/(|g| + ε).
        let g = 0.3;
        let mut s = scalar(1.0, g);
        let cfg = AdamConfig::with_lr(0.01);
        let mut adam = Adam::new(cfg);
        adam.step(&mut [&mut s]);
        let m = (1.0 - 0.9) * g;
        let v = (1.0 - 0.999) * g * g;
        let want = 1.0 - 0.01 * (m / (1.0 - 0.9)) / ((v / (1.0 - 0.999)).sqrt() + 1e-8);
        assert!((s.0.value.data()[0] - want).abs() < 1e-15);
        assert!((s.0.value.data()[0] - (1.0 - 0.01 * g / (g + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let mut s = scalar(0.5, 0.0);
            let mut adam = Adam::new(AdamConfig::default());
            for i in 0..50 {
                s.0.grad.data_mut()[0] = (i as f64 * 0.37).sin();
                adam.step(&mut [&mut s]);
            }
            s.0.value.data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut s = scalar(-0.25, 4.0);
        let mut adam = Adam::new(AdamConfig::with_lr(0.0));
        adam.step(&mut [&mut s]);
        assert_eq!(s.0.value.data()[0].to_bits(), (-0.25f64).to_bits());
    }
}
