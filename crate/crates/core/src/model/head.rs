use crate::error::{bail, Result};
use crate::nn::layers::NormCache;
use crate::nn::{LayerNorm, Linear, Param, Parameters, Prng, Real, Tensor};

use super::config::HEAD_HIDDEN;

/// Classification head: `d → 256` with ReLU, layer norm, `256 → classes`.
#[derive(Clone, Debug)]
pub struct MlpHead<T> {
    pub fc1: Linear<T>,
    pub norm: LayerNorm<T>,
    pub fc2: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct HeadCache<T> {
    x: Tensor<T>,
    pre: Tensor<T>,
    norm: NormCache<T>,
    normed: Tensor<T>,
}

impl<T: Real> MlpHead<T> {
    pub fn new(embed_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes == 0 {
            bail!(Config, "head needs at least one class");
        }
        let mut prng = Prng::new(seed);
        Ok(Self {
            fc1: Linear::new("head.fc1", embed_dim, HEAD_HIDDEN, &mut prng)?,
            norm: LayerNorm::new("head.norm", HEAD_HIDDEN)?,
            fc2: Linear::new("head.fc2", HEAD_HIDDEN, num_classes, &mut prng)?,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.fc1.fan_in()
    }

    pub fn num_classes(&self) -> usize {
        self.fc2.fan_out()
    }

    /// `emb` is `[batch × d]`; returns logits `[batch × classes]`.
    pub fn forward(&self, emb: &Tensor<T>) -> Result<(Tensor<T>, HeadCache<T>)> {
        if emb.cols() != self.embed_dim() {
            bail!(Shape, "head expects width {}, got {}", self.embed_dim(), emb.cols());
        }
        let pre = self.fc1.forward(emb)?;
        let act = pre.map(|v| v.max(T::zero()));
        let (normed, norm) = self.norm.forward(&act)?;
        let logits = self.fc2.forward(&normed)?;
        Ok((logits, HeadCache { x: emb.clone(), pre, norm, normed }))
    }

    pub fn logits(&self, emb: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(emb)?.0)
    }

    /// Accumulates gradients, returns `∂L/∂emb`.
    pub fn backward(&mut self, c: &HeadCache<T>, d_logits: &Tensor<T>) -> Tensor<T> {
        let dn = self.fc2.backward(&c.normed, d_logits);
        let mut da = self.norm.backward(&c.norm, &dn);
        for (g, &p) in da.data_mut().iter_mut().zip(c.pre.data()) {
            if p <= T::zero() {
                *g = T::zero();
            }
        }
        self.fc1.backward(&c.x, &da)
    }

    pub fn cast<U: Real>(&self) -> MlpHead<U> {
        let mut out = MlpHead::<U>::new(self.embed_dim(), self.num_classes(), 0).expect("valid head");
        let src = self.params();
        let mut i = 0;
        out.visit_mut(&mut |p| {
            p.value = src[i].value.cast();
            i += 1;
        });
        out
    }
}

impl<T: Real> Parameters<T> for MlpHead<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.fc1.visit(f);
        self.norm.visit(f);
        self.fc2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.fc1.visit_mut(f);
        self.norm.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{assert_grad_close, numeric_grad};

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut h = MlpHead::<f64>::new(8, 10, 1).unwrap();
        h.visit_mut(&mut |p| p.value.fill(0.0));
        let emb = Tensor::full(&[1, 8], 3.0);
        let y = h.logits(&emb).unwrap();
        assert_eq!(y.dims(), &[1, 10]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let h = MlpHead::<f32>::new(8, 10, 1).unwrap();
        assert!(matches!(h.forward(&Tensor::zeros(&[1, 7])), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn input_gradient_matches_differences() {
        let mut h = MlpHead::<f64>::new(6, 4, 2).unwrap();
        let mut p = Prng::new(9);
        let x: Vec<f64> = (0..12).map(|_| p.normal()).collect();
        let w: Vec<f64> = (0..8).map(|_| p.normal()).collect();
        let xt = Tensor::from_vec(&[2, 6], x).unwrap();
        let (_, c) = h.forward(&xt).unwrap();
        let dy = Tensor::from_vec(&[2, 4], w.clone()).unwrap();
        let dx = h.backward(&c, &dy);
        let num = numeric_grad(&xt, 1e-5, |v| {
            let y = h.logits(v).unwrap();
            y.data().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        });
        assert_grad_close(dx.data(), num.data(), 1e-5, "head input");
    }
}
