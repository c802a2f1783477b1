use crate::error::{bail, Result};
use crate::nn::real::{gemm, MatMut, MatRef, Real};

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product();
        Self { dims: dims.to_vec(), data: vec![T::zero(); len] }
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        let len = dims.iter().product();
        Self { dims: dims.to_vec(), data: vec![value; len] }
    }

    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if len != data.len() {
            bail!(Shape, "dims {:?} imply {} elements, got {}", dims, len, data.len());
        }
        Ok(Self { dims: dims.to_vec(), data })
    }

    /// 2-D tensor from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[&[T]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { dims: vec![rows.len(), cols], data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a tensor viewed as a matrix over its last dimension.
    pub fn rows(&self) -> usize {
        let cols = self.cols();
        if cols == 0 {
            0
        } else {
            self.data.len() / cols
        }
    }

    pub fn cols(&self) -> usize {
        self.dims.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let len: usize = dims.iter().product();
        if len != self.data.len() {
            bail!(Shape, "cannot reshape {:?} into {:?}", self.dims, dims);
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn view(&self) -> MatRef<'_, T> {
        MatRef::new(&self.data, self.rows(), self.cols())
    }

    pub fn view_mut(&mut self) -> MatMut<'_, T> {
        let (r, c) = (self.rows(), self.cols());
        MatMut::new(&mut self.data, r, c)
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.dims, other.dims, "add_assign dims");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor { dims: self.dims.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|x| U::from_f64(x.to_f64().unwrap()).unwrap()).collect(),
        }
    }

    /// Matrix transpose of a 2-D tensor.
    pub fn transpose(&self) -> Tensor<T> {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor { dims: vec![c, r], data: out }
    }
}

/// `[m×k]·[k×n]` product.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.dims.len() != 2 || b.dims.len() != 2 {
        bail!(Shape, "matmul expects 2-D operands, got {:?} and {:?}", a.dims, b.dims);
    }
    if a.dims[1] != b.dims[0] {
        bail!(Shape, "matmul inner dims disagree: {:?} · {:?}", a.dims, b.dims);
    }
    let mut c = Tensor::zeros(&[a.dims[0], b.dims[1]]);
    gemm(a.view(), b.view(), T::zero(), c.view_mut());
    Ok(c)
}

/// Gradients of `C = A·B`: `dA = dC·Bᵀ`, `dB = Aᵀ·dC`.
pub fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dc: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    if dc.dims() != [m, n] {
        bail!(Shape, "matmul_backward: upstream {:?}, expected [{m}, {n}]", dc.dims());
    }
    let mut da = Tensor::zeros(&[m, k]);
    gemm(dc.view(), b.view().t(), T::zero(), da.view_mut());
    let mut db = Tensor::zeros(&[k, n]);
    gemm(a.view().t(), dc.view(), T::zero(), db.view_mut());
    Ok((da, db))
}

/// A named trainable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.dims());
        Self { name: name.into(), value, grad }
    }

    pub fn zeros(name: impl Into<String>, dims: &[usize]) -> Self {
        Self::new(name, Tensor::zeros(dims))
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Deterministic traversal over a module's parameters.
///
/// Both visitors must yield parameters in the same order; optimizers and
/// checkpoints rely on it.
pub trait Parameters<T: Real> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.numel());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }

    /// Adds `other`'s gradients into ours; both must share one structure.
    fn accumulate_grads(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let theirs = other.params();
        let mut i = 0;
        self.visit_mut(&mut |p| {
            assert_eq!(p.name, theirs[i].name, "parameter structure mismatch");
            p.grad.add_assign(&theirs[i].grad);
            i += 1;
        });
    }

    /// Copies values (not gradients) from a structurally identical module.
    fn copy_values_from(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let theirs = other.params();
        let mut i = 0;
        self.visit_mut(&mut |p| {
            assert_eq!(p.name, theirs[i].name, "parameter structure mismatch");
            p.value.data_mut().copy_from_slice(theirs[i].value.data());
            i += 1;
        });
    }

    /// Raw little-endian bytes of every parameter value, in visit order.
    fn value_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.visit(&mut |p| {
            for x in p.value.data() {
                out.extend_from_slice(&x.to_f64().unwrap().to_le_bytes());
            }
        });
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_product() {
        let a = Tensor::from_rows(&[&[1.0f64, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(matmul(&a, &eye).unwrap(), a);
    }

    #[test]
    fn two_by_two_product() {
        let a = Tensor::from_rows(&[&[1.0f64, 2.0], &[3.0, 4.0]]);
        let b = Tensor::from_rows(&[&[5.0f64, 6.0], &[7.0, 8.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn inner_dim_mismatch_is_shape_error() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn sum_gradient_matches_finite_differences() {
        let a = Tensor::from_rows(&[&[0.3f64, -1.2, 0.5], &[2.0, 0.1, -0.7]]);
        let b = Tensor::from_rows(&[&[1.1f64, -0.4], &[0.2, 0.9], &[-1.5, 0.6]]);
        let dc = Tensor::full(&[2, 2], 1.0);
        let (da, db) = matmul_backward(&a, &b, &dc).unwrap();
        let h = 1e-4;
        for i in 0..a.len() {
            let mut ap = a.clone();
            ap.data_mut()[i] += h;
            let mut am = a.clone();
            am.data_mut()[i] -= h;
            let fd = (matmul(&ap, &b).unwrap().sum() - matmul(&am, &b).unwrap().sum()) / (2.0 * h);
            assert!((fd - da.data()[i]).abs() < 1e-6);
        }
        for i in 0..b.len() {
            let mut bp = b.clone();
            bp.data_mut()[i] += h;
            let mut bm = b.clone();
            bm.data_mut()[i] -= h;
            let fd = (matmul(&a, &bp).unwrap().sum() - matmul(&a, &bm).unwrap().sum()) / (2.0 * h);
            assert!((fd - db.data()[i]).abs() < 1e-6);
        }
    }
}
