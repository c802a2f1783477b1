//! Linear, layer-norm and activation layers with explicit backward passes.
//!
//! Layers operate on `[rows × features]` matrices. `forward` never mutates
//! the layer; `backward` accumulates parameter gradients and returns the
//! gradient with respect to the layer input.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::nn::prng::Prng;
use crate::nn::real::{gemm, lit, MatRef, Real};
use crate::nn::tensor::{Param, Parameters, Tensor};
use crate::nn::init::trunc_normal;

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;

/// `y = x·Wᵀ + b` with `W` stored `[out × in]`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, prng: &mut Prng) -> Result<Self> {
        Ok(Self {
            weight: Param::new(
                format!("{name}.weight"),
                trunc_normal(&[fan_out, fan_in], INIT_STD, prng)?,
            ),
            bias: Param::zeros(format!("{name}.bias"), &[fan_out]),
        })
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value.dims()[1]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value.dims()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.cols() != self.fan_in() {
            bail!(Shape, "{}: input width {} != {}", self.weight.name, x.cols(), self.fan_in());
        }
        let n = x.rows();
        let out = self.fan_out();
        let mut y = Tensor::zeros(&[n, out]);
        let b = self.bias.value.data();
        for i in 0..n {
            y.row_mut(i).copy_from_slice(b);
        }
        gemm(x.view(), self.weight.value.view().t(), T::one(), y.view_mut());
        Ok(y)
    }

    /// Accumulates `dW += dyᵀ·x`, `db += Σ dy` and returns `dx = dy·W`.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        self.backward_params(x, dy);
        let mut dx = Tensor::zeros(&[x.rows(), self.fan_in()]);
        gemm(dy.view(), self.weight.value.view(), T::zero(), dx.view_mut());
        dx
    }

    /// Parameter gradients only, for layers fed directly by data.
    pub fn backward_params(&mut self, x: &Tensor<T>, dy: &Tensor<T>) {
        gemm(dy.view().t(), x.view(), T::one(), self.weight.grad.view_mut());
        let db = self.bias.grad.data_mut();
        for i in 0..dy.rows() {
            for (g, &d) in db.iter_mut().zip(dy.row(i)) {
                *g += d;
            }
        }
    }
}

impl<T: Real> Parameters<T> for Linear<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Per-row normalisation statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub xhat: Tensor<T>,
    pub rstd: Vec<T>,
}

/// Parameter-free layer normalisation over the last dimension
/// (population variance, `eps` inside the square root).
pub fn normalize_rows<T: Real>(x: &Tensor<T>, eps: f64) -> NormCache<T> {
    let d = x.cols();
    let rows = x.rows();
    let eps = lit::<T>(eps);
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let mut xhat = Tensor::zeros(x.dims());
    let mut rstd = Vec::with_capacity(rows);
    for i in 0..rows {
        let r = x.row(i);
        let mean = r.iter().copied().sum::<T>() * inv_d;
        let var = r.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let s = T::one() / (var + eps).sqrt();
        for (o, &v) in xhat.row_mut(i).iter_mut().zip(r) {
            *o = (v - mean) * s;
        }
        rstd.push(s);
    }
    NormCache { xhat, rstd }
}

/// Backward of [`normalize_rows`]: `dx = rstd·(g − mean(g) − x̂·mean(g·x̂))`.
pub fn normalize_rows_backward<T: Real>(cache: &NormCache<T>, dxhat: &Tensor<T>) -> Tensor<T> {
    let d = dxhat.cols();
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let mut dx = Tensor::zeros(dxhat.dims());
    for i in 0..dxhat.rows() {
        let g = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mg = g.iter().copied().sum::<T>() * inv_d;
        let mgx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
        let s = cache.rstd[i];
        for ((o, &gi), &xi) in dx.row_mut(i).iter_mut().zip(g).zip(xh) {
            *o = s * (gi - mg - xi * mgx);
        }
    }
    dx
}

#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gain: Param<T>,
    pub bias: Param<T>,
    pub eps: f64,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(name: &str, d: usize) -> Result<Self> {
        if d == 0 {
            bail!(Shape, "{name}: layernorm width must be positive");
        }
        Ok(Self {
            gain: Param::new(format!("{name}.weight"), Tensor::full(&[d], T::one())),
            bias: Param::zeros(format!("{name}.bias"), &[d]),
            eps: LN_EPS,
        })
    }

    pub fn width(&self) -> usize {
        self.gain.value.len()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, NormCache<T>)> {
        if x.cols() != self.width() {
            bail!(Shape, "{}: input width {} != {}", self.gain.name, x.cols(), self.width());
        }
        let cache = normalize_rows(x, self.eps);
        let g = self.gain.value.data();
        let b = self.bias.value.data();
        let mut y = cache.xhat.clone();
        for i in 0..y.rows() {
            for ((o, &gi), &bi) in y.row_mut(i).iter_mut().zip(g).zip(b) {
                *o = *o * gi + bi;
            }
        }
        Ok((y, cache))
    }

    pub fn backward(&mut self, cache: &NormCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let d = self.width();
        let mut dxhat = Tensor::zeros(dy.dims());
        {
            let g = self.gain.value.data();
            let gg = self.gain.grad.data_mut();
            for i in 0..dy.rows() {
                let dyr = dy.row(i);
                let xh = cache.xhat.row(i);
                for j in 0..d {
                    gg[j] += dyr[j] * xh[j];
                }
                for (o, (&a, &gj)) in dxhat.row_mut(i).iter_mut().zip(dyr.iter().zip(g)) {
                    *o = a * gj;
                }
            }
        }
        let bg = self.bias.grad.data_mut();
        for i in 0..dy.rows() {
            for (b, &v) in bg.iter_mut().zip(dy.row(i)) {
                *b += v;
            }
        }
        normalize_rows_backward(cache, &dxhat)
    }
}

impl<T: Real> Parameters<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.gain);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gain);
        f(&mut self.bias);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Gelu => {
                let half = lit::<T>(0.5);
                half * x * (T::one() + (x * lit::<T>(std::f64::consts::FRAC_1_SQRT_2)).erf())
            }
        }
    }

    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let half = lit::<T>(0.5);
                let cdf = half * (T::one() + (x * lit::<T>(std::f64::consts::FRAC_1_SQRT_2)).erf());
                let pdf = (-(x * x) * half).exp() * lit::<T>(0.398_942_280_401_432_7);
                cdf + x * pdf
            }
        }
    }

    pub fn forward<T: Real>(self, x: &Tensor<T>) -> Tensor<T> {
        x.map(|v| self.apply(v))
    }

    /// `dx = f'(x) ⊙ dy` where `x` is the pre-activation input.
    pub fn backward<T: Real>(self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let mut dx = dy.clone();
        for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
            *d *= self.derivative(v);
        }
        dx
    }
}

/// Row-wise softmax with the row max subtracted first.
pub fn softmax_rows<T: Real>(x: &mut [T], cols: usize) {
    for row in x.chunks_mut(cols) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
}

/// Multi-head scaled dot-product attention over a batch of equal-length sequences.
///
/// Inputs are `[batch·seq × d]`; heads split the feature dimension evenly.
#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    pub probs: Vec<T>,
}

pub fn check_heads(d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || d % heads != 0 {
        bail!(Config, "embedding dim {d} is not divisible into {heads} heads");
    }
    Ok(d / heads)
}

/// `softmax(QKᵀ/√d_h)·V` per sequence and head, heads concatenated.
pub fn attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    seq: usize,
    heads: usize,
) -> Result<(Tensor<T>, AttentionCache<T>)> {
    let d = q.cols();
    let dh = check_heads(d, heads)?;
    if k.dims() != q.dims() || v.dims() != q.dims() {
        bail!(Shape, "attention q/k/v dims differ: {:?} {:?} {:?}", q.dims(), k.dims(), v.dims());
    }
    if seq == 0 || q.rows() % seq != 0 {
        bail!(Shape, "{} rows do not split into sequences of {seq}", q.rows());
    }
    let batch = q.rows() / seq;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut out = Tensor::zeros(q.dims());
    let mut probs = vec![T::zero(); batch * heads * seq * seq];
    for b in 0..batch {
        let off = b * seq * d;
        for h in 0..heads {
            let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
            let qh = MatRef::cols_of(&q.data()[off..], seq, d, h * dh, dh);
            let kh = MatRef::cols_of(&k.data()[off..], seq, d, h * dh, dh);
            gemm(qh, kh.t(), T::zero(), crate::nn::real::MatMut::new(p, seq, seq));
            p.iter_mut().for_each(|x| *x *= scale);
            softmax_rows(p, seq);
            let vh = MatRef::cols_of(&v.data()[off..], seq, d, h * dh, dh);
            let oh = crate::nn::real::MatMut::cols_of(&mut out.data_mut()[off..], seq, d, h * dh, dh);
            gemm(MatRef::new(p, seq, seq), vh, T::zero(), oh);
        }
    }
    Ok((out, AttentionCache { probs }))
}

/// Gradients of [`attention`] with respect to `q`, `k` and `v`.
pub fn attention_backward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cache: &AttentionCache<T>,
    dout: &Tensor<T>,
    seq: usize,
    heads: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    use crate::nn::real::MatMut;
    let d = q.cols();
    let dh = d / heads;
    let batch = q.rows() / seq;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut dq = Tensor::zeros(q.dims());
    let mut dk = Tensor::zeros(q.dims());
    let mut dv = Tensor::zeros(q.dims());
    let mut dp = vec![T::zero(); seq * seq];
    for b in 0..batch {
        let off = b * seq * d;
        for h in 0..heads {
            let p = &cache.probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
            let doh = MatRef::cols_of(&dout.data()[off..], seq, d, h * dh, dh);
            let vh = MatRef::cols_of(&v.data()[off..], seq, d, h * dh, dh);
            // dV = Pᵀ·dO
            gemm(
                MatRef::new(p, seq, seq).t(),
                doh,
                T::zero(),
                MatMut::cols_of(&mut dv.data_mut()[off..], seq, d, h * dh, dh),
            );
            // dP = dO·Vᵀ
            gemm(doh, vh.t(), T::zero(), MatMut::new(&mut dp, seq, seq));
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the 1/√d_h scale.
            for i in 0..seq {
                let pr = &p[i * seq..(i + 1) * seq];
                let dr = &mut dp[i * seq..(i + 1) * seq];
                let dot = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                for (x, &pi) in dr.iter_mut().zip(pr) {
                    *x = pi * (*x - dot) * scale;
                }
            }
            let qh = MatRef::cols_of(&q.data()[off..], seq, d, h * dh, dh);
            let kh = MatRef::cols_of(&k.data()[off..], seq, d, h * dh, dh);
            gemm(
                MatRef::new(&dp, seq, seq),
                kh,
                T::zero(),
                MatMut::cols_of(&mut dq.data_mut()[off..], seq, d, h * dh, dh),
            );
            gemm(
                MatRef::new(&dp, seq, seq).t(),
                qh,
                T::zero(),
                MatMut::cols_of(&mut dk.data_mut()[off..], seq, d, h * dh, dh),
            );
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{assert_grad_close, numeric_grad};

    fn rand_tensor(dims: &[usize], seed: u64) -> Tensor<f64> {
        let mut p = Prng::new(seed);
        let n = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| p.normal()).collect()).unwrap()
    }

    #[test]
    fn layernorm_constant_row_is_zero() {
        let ln = LayerNorm::<f64>::new("ln", 4).unwrap();
        let (y, _) = ln.forward(&Tensor::full(&[1, 4], 3.5)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layernorm_two_element_row() {
        let ln = LayerNorm::<f64>::new("ln", 2).unwrap();
        let (y, _) = ln.forward(&Tensor::from_rows(&[&[1.0, 3.0]])).unwrap();
        // Population variance is 1, so the only deviation from ±1 is eps.
        let expect = 1.0 / (1.0f64 + 1e-6).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-12);
        assert!((y.data()[1] - expect).abs() < 1e-12);
    }

    #[test]
    fn layernorm_zero_width_rejected() {
        assert!(matches!(LayerNorm::<f32>::new("ln", 0), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn layernorm_gradients_match_finite_differences() {
        let mut ln = LayerNorm::<f64>::new("ln", 5).unwrap();
        ln.gain.value = rand_tensor(&[5], 1);
        ln.bias.value = rand_tensor(&[5], 2);
        let x = rand_tensor(&[3, 5], 3);
        let w = rand_tensor(&[3, 5], 4);
        let loss = |ln: &LayerNorm<f64>, x: &Tensor<f64>| {
            let (y, _) = ln.forward(x).unwrap();
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = ln.forward(&x).unwrap();
        let dx = ln.backward(&cache, &w);
        let num_dx = numeric_grad(&x, 1e-4, |xp| loss(&ln, xp));
        assert_grad_close(dx.data(), num_dx.data(), 1e-4, "ln.x");
        let num_dg = numeric_grad(&ln.gain.value, 1e-4, |g| {
            let mut l2 = ln.clone();
            l2.gain.value = g.clone();
            loss(&l2, &x)
        });
        assert_grad_close(ln.gain.grad.data(), num_dg.data(), 1e-4, "ln.gain");
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut lin = Linear::<f64>::new("fc", 4, 3, &mut Prng::new(9)).unwrap();
        lin.bias.value = rand_tensor(&[3], 10);
        let x = rand_tensor(&[2, 4], 11);
        let w = rand_tensor(&[2, 3], 12);
        let loss = |l: &Linear<f64>, x: &Tensor<f64>| {
            let y = l.forward(x).unwrap();
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let dx = lin.backward(&x, &w);
        let num = numeric_grad(&x, 1e-4, |xp| loss(&lin, xp));
        assert_grad_close(dx.data(), num.data(), 1e-6, "fc.x");
        let num_w = numeric_grad(&lin.weight.value, 1e-4, |wv| {
            let mut l2 = lin.clone();
            l2.weight.value = wv.clone();
            loss(&l2, &x)
        });
        assert_grad_close(lin.weight.grad.data(), num_w.data(), 1e-6, "fc.w");
    }

    #[test]
    fn gelu_derivative_matches_finite_differences() {
        for &x in &[-3.0f64, -1.0, -0.1, 0.0, 0.2, 1.5, 4.0] {
            let h = 1e-5;
            let fd = (Activation::Gelu.apply(x + h) - Activation::Gelu.apply(x - h)) / (2.0 * h);
            assert!((fd - Activation::Gelu.derivative(x)).abs() < 1e-8, "x={x}");
        }
        assert!((Activation::Gelu.apply(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn single_token_attention_returns_value_row() {
        let q = rand_tensor(&[1, 4], 1);
        let k = rand_tensor(&[1, 4], 2);
        let v = rand_tensor(&[1, 4], 3);
        let (o, _) = attention(&q, &k, &v, 1, 2).unwrap();
        for (a, b) in o.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let q = rand_tensor(&[3, 2], 1);
        let k = Tensor::from_rows(&[&[0.5, -1.0], &[0.5, -1.0], &[0.5, -1.0]]);
        let v = rand_tensor(&[3, 2], 3);
        let (_, cache) = attention(&q, &k, &v, 3, 1).unwrap();
        for p in cache.probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_token_attention_brute_force() {
        let q = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 2.0]]);
        let k = Tensor::from_rows(&[&[0.5, 1.0], &[-1.0, 0.25]]);
        let v = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, -1.0]]);
        let (o, _) = attention(&q, &k, &v, 2, 1).unwrap();
        let s = 1.0 / 2.0f64.sqrt();
        for i in 0..2 {
            let scores: Vec<f64> = (0..2)
                .map(|j| (q.row(i)[0] * k.row(j)[0] + q.row(i)[1] * k.row(j)[1]) * s)
                .collect();
            let z: f64 = scores.iter().map(|x| x.exp()).sum();
            let w: Vec<f64> = scores.iter().map(|x| x.exp() / z).collect();
            for c in 0..2 {
                let want = w[0] * v.row(0)[c] + w[1] * v.row(1)[c];
                assert!((o.row(i)[c] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn indivisible_heads_rejected() {
        let t = Tensor::<f64>::zeros(&[2, 6]);
        assert!(matches!(attention(&t, &t, &t, 2, 4), Err(crate::Error::Config(_))));
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let (seq, d, heads) = (3, 4, 2);
        let q = rand_tensor(&[2 * seq, d], 1);
        let k = rand_tensor(&[2 * seq, d], 2);
        let v = rand_tensor(&[2 * seq, d], 3);
        let w = rand_tensor(&[2 * seq, d], 4);
        let f = |q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>| {
            let (o, _) = attention(q, k, v, seq, heads).unwrap();
            o.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = attention(&q, &k, &v, seq, heads).unwrap();
        let (dq, dk, dv) = attention_backward(&q, &k, &v, &cache, &w, seq, heads);
        assert_grad_close(dq.data(), numeric_grad(&q, 1e-4, |x| f(x, &k, &v)).data(), 1e-4, "q");
        assert_grad_close(dk.data(), numeric_grad(&k, 1e-4, |x| f(&q, x, &v)).data(), 1e-4, "k");
        assert_grad_close(dv.data(), numeric_grad(&v, 1e-4, |x| f(&q, &k, x)).data(), 1e-4, "v");
    }

    #[test]
    fn softmax_is_stable_for_extreme_logits() {
        let mut row = vec![1e4f32, -1e4, 0.0, 1e4];
        softmax_rows(&mut row, 4);
        assert!(row.iter().all(|x| x.is_finite()));
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}
