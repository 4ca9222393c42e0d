//! Dense row-major tensors and the forward kernels the autodiff tape is built on.
//!
//! Every kernel here is a pure function of its inputs. The differentiable
//! versions in [`crate::graph`] call into the same kernels for their forward
//! values so there is exactly one implementation of each numeric routine.

use crate::error::{Result, WeakTrError};
use crate::scalar::Scalar;

/// Rank-n dense array. `shape.iter().product() == data.len()` always holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(WeakTrError::shape(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        if numel(&shape) != data.len() {
            return Err(WeakTrError::shape(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Builds from `f64` literals, converting each element.
    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(!shape.is_empty() && !shape.contains(&0), "bad shape {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// Number of slices along the last axis.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
                acc * d + i
            })
    }

    /// Metadata-only reshape.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) || numel(shape) != self.data.len() {
            return Err(WeakTrError::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        self.clone().reshape(shape)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        same_shape(self, other, "zip")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize_lossy(self.data.len())
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

pub(crate) fn same_shape<T>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(WeakTrError::shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape, b.shape
        )));
    }
    Ok(())
}

fn as_matrix<T>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        [r, c] => Ok((*r, *c)),
        s => Err(WeakTrError::shape(format!("{what}: expected a matrix, got {s:?}"))),
    }
}

/// `out += a · b` for row-major `a: m×k`, `b: k×n`.
pub(crate) fn gemm_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    T::gemm_acc(m, k, n, (a, k, 1), (b, n, 1), out);
}

/// `out += a · bᵀ` for row-major `a: m×k`, `b: n×k`, `out: m×n`.
pub(crate) fn gemm_a_bt_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    T::gemm_acc(m, k, n, (a, k, 1), (b, 1, k), out);
}

/// `out += aᵀ · c` for `a: m×k`, `c: m×n`, `out: k×n`.
pub(crate) fn gemm_at_b_acc<T: Scalar>(
    a: &[T],
    c: &[T],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
) {
    T::gemm_acc(k, m, n, (a, 1, k), (c, n, 1), out);
}

pub(crate) fn transpose_raw<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Matrix product of `a: m×k` and `b: k×n`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = as_matrix(a, "matmul")?;
    let (k2, n) = as_matrix(b, "matmul")?;
    if k != k2 {
        return Err(WeakTrError::shape(format!(
            "matmul: inner dimensions differ for {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_acc(&a.data, &b.data, m, k, n, &mut out);
    Tensor::new(vec![m, n], out)
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = as_matrix(a, "transpose")?;
    Tensor::new(vec![c, r], transpose_raw(&a.data, r, c))
}

/// Softmax over the last axis with max-subtraction.
pub fn softmax_last<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let n = t.cols();
    let mut out = t.data.clone();
    for row in out.chunks_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor {
        shape: t.shape.clone(),
        data: out,
    }
}

/// Per-row standardization statistics: `(x̂, 1/σ)` where σ = sqrt(var + eps).
pub(crate) fn layer_norm_stats<T: Scalar>(x: &[T], n: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(x.len() / n);
    let nf = T::from_usize_lossy(n);
    for (row, out) in x.chunks(n).zip(xhat.chunks_mut(n)) {
        let mean = row.iter().copied().sum::<T>() / nf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let r = T::one() / (var + eps).sqrt();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - mean) * r;
        }
        rstd.push(r);
    }
    (xhat, rstd)
}

/// Layer normalization over the last axis followed by `γ ⊙ x̂ + β`.
pub fn layer_norm<T: Scalar>(
    t: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let n = t.cols();
    if gamma.len() != n || beta.len() != n {
        return Err(WeakTrError::shape(format!(
            "layer_norm: gamma {:?} / beta {:?} do not match last dim of {:?}",
            gamma.shape, beta.shape, t.shape
        )));
    }
    if eps <= T::zero() {
        return Err(WeakTrError::domain("layer_norm: eps must be positive"));
    }
    let (mut xhat, _) = layer_norm_stats(&t.data, n, eps);
    for row in xhat.chunks_mut(n) {
        for ((v, &g), &b) in row.iter_mut().zip(&gamma.data).zip(&beta.data) {
            *v = *v * g + b;
        }
    }
    Ok(Tensor {
        shape: t.shape.clone(),
        data: xhat,
    })
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.map(sigmoid_scalar)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// tanh-form GELU.
#[inline]
pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let inner = T::lit(GELU_K) * (x + T::lit(GELU_C) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
pub(crate) fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let inner = k * (x + c * x * x * x);
    let th = inner.tanh();
    let half = T::lit(0.5);
    half * (T::one() + th) + half * x * (T::one() - th * th) * k * (T::one() + T::lit(3.0) * c * x * x)
}

pub fn gelu<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.map(gelu_scalar)
}

/// Mean over every non-leading axis; one value per leading index.
pub fn global_avg_pool<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    if t.rank() < 2 {
        return Err(WeakTrError::domain(format!(
            "global_avg_pool: no axes to pool in shape {:?}",
            t.shape
        )));
    }
    let lead = t.shape[0];
    let inner = t.len() / lead;
    let denom = T::from_usize_lossy(inner);
    let data = t
        .data
        .chunks(inner)
        .map(|c| c.iter().copied().sum::<T>() / denom)
        .collect();
    Tensor::new(vec![lead], data)
}

/// Source taps of align-corners bilinear resampling along one axis:
/// `(i0, i1, w1)` with value `(1-w1)·src[i0] + w1·src[i1]`.
pub(crate) fn bilinear_taps<T: Scalar>(src: usize, dst: usize) -> Vec<(usize, usize, T)> {
    (0..dst)
        .map(|o| {
            if dst == 1 || src == 1 {
                return (0, 0, T::zero());
            }
            let pos = o as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, T::lit(pos - i0 as f64))
        })
        .collect()
}

pub(crate) fn check_upsample(shape: &[usize], out_h: usize, out_w: usize) -> Result<(usize, usize, usize)> {
    let [h, w, c] = shape else {
        return Err(WeakTrError::shape(format!(
            "upsample_bilinear: expected h×w×c, got {shape:?}"
        )));
    };
    if out_h < *h || out_w < *w {
        return Err(WeakTrError::domain(format!(
            "upsample_bilinear: cannot downscale {h}×{w} to {out_h}×{out_w}"
        )));
    }
    Ok((*h, *w, *c))
}

/// Align-corners bilinear upsampling of an `h×w×c` map.
pub fn upsample_bilinear<T: Scalar>(t: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (h, w, c) = check_upsample(&t.shape, out_h, out_w)?;
    let ty = bilinear_taps::<T>(h, out_h);
    let tx = bilinear_taps::<T>(w, out_w);
    let mut out = vec![T::zero(); out_h * out_w * c];
    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
            let dst = &mut out[(oy * out_w + ox) * c..(oy * out_w + ox + 1) * c];
            let taps = [
                (y0, x0, (T::one() - wy) * (T::one() - wx)),
                (y0, x1, (T::one() - wy) * wx),
                (y1, x0, wy * (T::one() - wx)),
                (y1, x1, wy * wx),
            ];
            for (sy, sx, wt) in taps {
                if wt == T::zero() {
                    continue;
                }
                let src = &t.data[(sy * w + sx) * c..(sy * w + sx + 1) * c];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += wt * s;
                }
            }
        }
    }
    Tensor::new(vec![out_h, out_w, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f32> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn matmul_examples() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(matmul(&a, &Tensor::eye(2)).unwrap(), a);
        let b = t(&[2, 2], &[5., 6., 7., 8.]);
        // 1·5+2·7, 1·6+2·8, 3·5+4·7, 3·6+4·8
        assert_eq!(matmul(&a, &b).unwrap(), t(&[2, 2], &[19., 22., 43., 50.]));
        let z = Tensor::<f32>::zeros(&[2, 2]);
        let any = t(&[2, 3], &[1., -2., 3., 4., 5., 6.]);
        assert_eq!(matmul(&z, &any).unwrap(), Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::<f32>::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_last(&t(&[3], &[0., 0., 0.]));
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let s = softmax_last(&t(&[2], &[2f64.ln(), 0.]));
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-6);
        let s = softmax_last(&t(&[2], &[1000., 0.]));
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-6 && s.data()[1] < 1e-6);
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::<f32>::ones(&[3]);
        let zero = Tensor::<f32>::zeros(&[3]);
        let out = layer_norm(&t(&[1, 3], &[5., 5., 5.]), &one, &zero, 1e-6).unwrap();
        assert!(out.data().iter().all(|v| v.abs() < 1e-6));

        let one2 = Tensor::<f64>::ones(&[2]);
        let zero2 = Tensor::<f64>::zeros(&[2]);
        let x = Tensor::<f64>::from_f64(&[1, 2], &[1., 3.]).unwrap();
        let out = layer_norm(&x, &one2, &zero2, 1e-12).unwrap();
        assert!((out.data()[0] + 1.0).abs() < 1e-9 && (out.data()[1] - 1.0).abs() < 1e-9);

        let g = Tensor::<f32>::zeros(&[3]);
        let b = Tensor::<f32>::full(&[3], 7.0);
        let out = layer_norm(&t(&[2, 3], &[1., -4., 9., 0., 2., 2.]), &g, &b, 1e-6).unwrap();
        assert!(out.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn sigmoid_examples() {
        let s = sigmoid(&t(&[3], &[0., 100., 3f64.ln()]));
        assert_eq!(s.data()[0], 0.5);
        assert!((s.data()[1] - 1.0).abs() < 1e-6);
        assert!((s.data()[2] - 0.75).abs() < 1e-6);
        let lo = sigmoid(&t(&[1], &[-100.]));
        assert!(lo.data()[0] >= 0.0 && lo.data()[0] < 1e-6);
    }

    #[test]
    fn global_avg_pool_examples() {
        let p = global_avg_pool(&t(&[1, 2, 2], &[1., 3., 5., 7.])).unwrap();
        assert_eq!(p.data(), &[4.0]);
        let p = global_avg_pool(&Tensor::<f32>::full(&[3, 4, 4], 2.5)).unwrap();
        assert_eq!(p.data(), &[2.5, 2.5, 2.5]);
        let p = global_avg_pool(&Tensor::<f32>::zeros(&[1, 2, 2])).unwrap();
        assert_eq!(p.data(), &[0.0]);
        assert!(global_avg_pool(&Tensor::<f32>::zeros(&[4])).is_err());
    }

    #[test]
    fn upsample_examples() {
        let c = Tensor::<f32>::full(&[3, 2, 2], 0.25);
        let u = upsample_bilinear(&c, 7, 5).unwrap();
        assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));

        let one = t(&[1, 1, 1], &[4.5]);
        let u = upsample_bilinear(&one, 4, 4).unwrap();
        assert!(u.data().iter().all(|&v| v == 4.5));

        let src = t(&[2, 2, 1], &[0., 1., 2., 3.]);
        let u = upsample_bilinear(&src, 3, 3).unwrap();
        assert_eq!(u.at(&[1, 1, 0]), 1.5);
        assert_eq!(u.at(&[0, 0, 0]), 0.0);
        assert_eq!(u.at(&[2, 2, 0]), 3.0);
        assert_eq!(u.at(&[0, 1, 0]), 0.5);

        assert!(upsample_bilinear(&src, 1, 1).is_err());
    }
}
