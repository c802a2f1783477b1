use crate::error::{bail, Result};
use crate::nn::init::trunc_normal;
use crate::nn::layers::INIT_STD;
use crate::nn::prng::Prng;
use crate::nn::real::{gemm, MatRef, Real};
use crate::nn::tensor::{Param, Parameters, Tensor};

/// Square-kernel 2-D cross-correlation over a single `[C × H × W]` image.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    /// `[C_out × C_in × k × k]`
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, padding: usize) -> Result<Self> {
        if stride == 0 || k == 0 {
            bail!(Shape, "kernel and stride must be positive");
        }
        let span_h = h + 2 * padding;
        let span_w = w + 2 * padding;
        if span_h < k || span_w < k {
            bail!(Shape, "kernel {k} larger than padded input {span_h}×{span_w}");
        }
        Ok(Self {
            c_in,
            h,
            w,
            k,
            stride,
            padding,
            h_out: (span_h - k) / stride + 1,
            w_out: (span_w - k) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfolds the image into `[C_in·k·k × H'·W']` columns.
fn im2col<T: Real>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let mut cols = vec![T::zero(); g.patch_len() * g.positions()];
    let np = g.positions();
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * np..(row + 1) * np];
                for oi in 0..g.h_out {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    for oj in 0..g.w_out {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        if jj < 0 || jj >= g.w as isize {
                            continue;
                        }
                        dst[oi * g.w_out + oj] = x[(c * g.h + ii as usize) * g.w + jj as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let mut x = vec![T::zero(); g.c_in * g.h * g.w];
    let np = g.positions();
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * np..(row + 1) * np];
                for oi in 0..g.h_out {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    for oj in 0..g.w_out {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        if jj < 0 || jj >= g.w as isize {
                            continue;
                        }
                        x[(c * g.h + ii as usize) * g.w + jj as usize] += src[oi * g.w_out + oj];
                    }
                }
            }
        }
    }
    x
}

/// Saved unfolded input for the backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    geometry: ConvGeometry,
    cols: Vec<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        prng: &mut Prng,
    ) -> Result<Self> {
        Ok(Self {
            weight: Param::new(
                format!("{name}.weight"),
                trunc_normal(&[c_out, c_in, kernel, kernel], INIT_STD, prng)?,
            ),
            bias: Param::zeros(format!("{name}.bias"), &[c_out]),
            stride,
            padding,
        })
    }

    pub fn c_out(&self) -> usize {
        self.weight.value.dims()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.value.dims()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.dims()[2]
    }

    /// `x` is `[C_in × H × W]`; output is `[C_out × H' × W']`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ConvCache<T>)> {
        if x.dims().len() != 3 || x.dims()[0] != self.c_in() {
            bail!(Shape, "{}: expected [{} × H × W] input, got {:?}", self.weight.name, self.c_in(), x.dims());
        }
        let g = ConvGeometry::new(self.c_in(), x.dims()[1], x.dims()[2], self.kernel(), self.stride, self.padding)?;
        let cols = if g.k == 1 && g.stride == 1 && g.padding == 0 {
            x.data().to_vec()
        } else {
            im2col(x.data(), &g)
        };
        let co = self.c_out();
        let np = g.positions();
        let mut y = vec![T::zero(); co * np];
        for (o, &b) in y.chunks_mut(np).zip(self.bias.value.data()) {
            o.iter_mut().for_each(|v| *v = b);
        }
        gemm(
            MatRef::new(self.weight.value.data(), co, g.patch_len()),
            MatRef::new(&cols, g.patch_len(), np),
            T::one(),
            crate::nn::real::MatMut::new(&mut y, co, np),
        );
        Ok((Tensor::from_vec(&[co, g.h_out, g.w_out], y)?, ConvCache { geometry: g, cols }))
    }

    /// Accumulates kernel/bias gradients and returns `dx`.
    pub fn backward(&mut self, cache: &ConvCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let g = &cache.geometry;
        let co = self.c_out();
        let np = g.positions();
        let pl = g.patch_len();
        gemm(
            MatRef::new(dy.data(), co, np),
            MatRef::new(&cache.cols, pl, np).t(),
            T::one(),
            crate::nn::real::MatMut::new(self.weight.grad.data_mut(), co, pl),
        );
        for (b, row) in self.bias.grad.data_mut().iter_mut().zip(dy.data().chunks(np)) {
            *b += row.iter().copied().sum::<T>();
        }
        let mut dcols = vec![T::zero(); pl * np];
        gemm(
            MatRef::new(self.weight.value.data(), co, pl).t(),
            MatRef::new(dy.data(), co, np),
            T::zero(),
            crate::nn::real::MatMut::new(&mut dcols, pl, np),
        );
        let dx = if g.k == 1 && g.stride == 1 && g.padding == 0 {
            dcols
        } else {
            col2im(&dcols, g)
        };
        Tensor::from_vec(&[g.c_in, g.h, g.w], dx).expect("conv input dims")
    }
}

impl<T: Real> Parameters<T> for Conv2d<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
