//! Central finite differences, used by tests to audit analytic gradients.

use crate::nn::tensor::Tensor;

/// Relative error with a denominator floor so near-zero gradients compare
/// on an absolute scale.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// `∂f/∂x` by central differences with step `h`.
pub fn numeric_grad(x: &Tensor<f64>, h: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut g = Tensor::zeros(x.dims());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + h;
        let fp = f(&xp);
        xp.data_mut()[i] = orig - h;
        let fm = f(&xp);
        xp.data_mut()[i] = orig;
        g.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    g
}

pub fn assert_grad_close(analytic: &[f64], numeric: &[f64], tol: f64, label: &str) {
    assert_eq!(analytic.len(), numeric.len(), "{label}: length mismatch");
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = rel_err(a, n);
        assert!(e < tol, "{label}[{i}]: analytic {a:e} numeric {n:e} rel err {e:e}");
    }
}
