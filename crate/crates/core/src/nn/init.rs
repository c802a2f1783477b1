use crate::error::{bail, Result};
use crate::nn::prng::Prng;
use crate::nn::real::{lit, Real};
use crate::nn::tensor::Tensor;

/// Normal(0, std²) samples truncated to ±2·std by rejection.
pub fn trunc_normal<T: Real>(dims: &[usize], std: f64, prng: &mut Prng) -> Result<Tensor<T>> {
    if !(std > 0.0) {
        bail!(Domain, "trunc_normal std must be positive, got {std}");
    }
    let len: usize = dims.iter().product();
    let mut data = Vec::with_capacity(len);
    while data.len() < len {
        let z = prng.normal();
        if z.abs() <= 2.0 {
            data.push(lit::<T>(z * std));
        }
    }
    Tensor::from_vec(dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_respect_truncation_bound() {
        let t: Tensor<f32> = trunc_normal(&[1000], 0.02, &mut Prng::new(0)).unwrap();
        assert!(t.data().iter().all(|x| x.abs() <= 0.04));
    }

    #[test]
    fn sample_mean_within_three_sigma() {
        let n = 100_000;
        let t: Tensor<f64> = trunc_normal(&[n], 0.02, &mut Prng::new(11)).unwrap();
        let mean = t.sum() / n as f64;
        // Variance of N(0,1) truncated at ±2 is 1 − 4φ(2)/(Φ(2)−Φ(−2)) ≈ 0.7737.
        let sigma = 0.02 * 0.7737f64.sqrt() / (n as f64).sqrt();
        assert!(mean.abs() < 3.0 * sigma, "mean {mean} vs 3σ {}", 3.0 * sigma);
    }

    #[test]
    fn deterministic_per_seed() {
        let a: Tensor<f32> = trunc_normal(&[64], 0.02, &mut Prng::new(5)).unwrap();
        let b: Tensor<f32> = trunc_normal(&[64], 0.02, &mut Prng::new(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nonpositive_std_rejected() {
        assert!(trunc_normal::<f32>(&[3], 0.0, &mut Prng::new(0)).is_err());
    }
}
