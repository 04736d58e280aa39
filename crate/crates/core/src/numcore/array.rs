//! Dense row-major arrays and the handful of kernels the policy needs.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point element type. Training runs in `f32`; `f64` is used by
/// the gradient and streaming oracles.
pub trait Scalar: Float + Default + Debug + Sum + Send + Sync + 'static {
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Array<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Array<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension {
                op: "array",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension {
                op: "array",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Validation("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
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

    /// Rows and columns when viewed as a matrix (leading dims collapsed).
    pub fn dims2(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap_or(&1);
        (self.data.len() / cols.max(1), cols)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let (_, c) = self.dims2();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> T {
        let (_, c) = self.dims2();
        self.data[i * c + j]
    }

    pub fn cast<U: Scalar>(&self) -> Array<U> {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Array<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Matrix product of two 2-D arrays.
pub fn matmul<T: Scalar>(a: &Array<T>, b: &Array<T>) -> Result<Array<T>> {
    let (m, k) = a.dims2();
    let (k2, n) = b.dims2();
    if a.shape.len() != 2 || b.shape.len() != 2 || k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    gemm_nn(&a.data, &b.data, &mut out, m, k, n);
    Ok(Array {
        shape: vec![m, n],
        data: out,
    })
}

/// Row-wise softmax along the last axis, max-subtracted. NaN inputs propagate.
pub fn softmax<T: Scalar>(x: &Array<T>) -> Array<T> {
    let (r, c) = x.dims2();
    let mut out = x.data.clone();
    for i in 0..r {
        softmax_in_place(&mut out[i * c..(i + 1) * c], None);
    }
    Array {
        shape: x.shape.clone(),
        data: out,
    }
}

/// Row-wise layer normalization over the last axis.
pub fn layer_norm<T: Scalar>(
    x: &Array<T>,
    gain: &Array<T>,
    bias: &Array<T>,
    eps: T,
) -> Result<Array<T>> {
    let (r, c) = x.dims2();
    if gain.len() != c || bias.len() != c {
        return Err(Error::Dimension {
            op: "layer_norm",
            lhs: x.shape.clone(),
            rhs: gain.shape.clone(),
        });
    }
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        let row = &x.data[i * c..(i + 1) * c];
        let (mean, rstd) = row_stats(row, eps);
        for j in 0..c {
            out[i * c + j] = (row[j] - mean) * rstd * gain.data[j] + bias.data[j];
        }
    }
    Ok(Array {
        shape: x.shape.clone(),
        data: out,
    })
}

pub(crate) fn row_stats<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::from_f64(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

/// Softmax over `row`, restricted to entries where `allowed` is true.
/// Masked entries become exactly zero.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T], allowed: Option<&[bool]>) {
    let mut max = T::neg_infinity();
    let mut any_nan = false;
    for (j, &v) in row.iter().enumerate() {
        if allowed.map_or(true, |m| m[j]) {
            if v.is_nan() {
                any_nan = true;
            }
            if v > max {
                max = v;
            }
        }
    }
    if any_nan {
        row.iter_mut().for_each(|v| *v = T::nan());
        return;
    }
    let mut total = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if allowed.map_or(true, |m| m[j]) {
            *v = (*v - max).exp();
            total = total + *v;
        } else {
            *v = T::zero();
        }
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let mut acc = [T::zero(); 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let base = c * 8;
        for l in 0..8 {
            acc[l] = acc[l] + a[base + l] * b[base + l];
        }
    }
    let mut s = T::zero();
    for v in acc {
        s = s + v;
    }
    for i in chunks * 8..n {
        s = s + a[i] * b[i];
    }
    s
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + alpha * xv;
    }
}

/// `out += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != T::zero() {
                axpy(av, &b[p * n..(p + 1) * n], orow);
            }
        }
    }
}

/// `out += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = out[i * n + j] + dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av != T::zero() {
                axpy(av, brow, &mut out[i * n..(i + 1) * n]);
            }
        }
    }
}

#[inline]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (T::one() + (-x.abs()).exp()).ln()
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn triple_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_identity_and_selector() {
        let id = Array::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Array::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&id, &m).unwrap(), m);
        let sel = Array::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let col = Array::new(vec![2, 1], vec![7.5, -2.0]).unwrap();
        assert_eq!(matmul(&sel, &col).unwrap().data(), &[7.5]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let want = triple_loop(&a, &b, 3, 4, 2);
            let got = matmul(
                &Array::new(vec![3, 4], a).unwrap(),
                &Array::new(vec![4, 2], b).unwrap(),
            )
            .unwrap();
            for (g, w) in got.data().iter().zip(&want) {
                assert!((g - w).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Array::<f32>::zeros(&[2, 3]);
        let b = Array::<f32>::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn transposed_kernels_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let want = triple_loop(&a, &b, m, k, n);
        // bᵀ stored as n×k
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c1 = vec![0.0; m * n];
        gemm_nt(&a, &bt, &mut c1, m, k, n);
        let mut c2 = vec![0.0; m * n];
        gemm_tn(&at, &b, &mut c2, m, k, n);
        for i in 0..m * n {
            assert!((c1[i] - want[i]).abs() < 1e-12);
            assert!((c2[i] - want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&Array::new(vec![1, 3], vec![0.0f64, 0.0, 0.0]).unwrap());
        for &v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let big = softmax(&Array::new(vec![1, 2], vec![1000.0f32, 0.0]).unwrap());
        assert!(big.is_finite());
        assert!((big.data()[0] - 1.0).abs() < 1e-6 && big.data()[1] < 1e-30);

        let s = softmax(&Array::new(vec![1, 3], vec![1.0f64, 2.0, 3.0]).unwrap());
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, &v) in s.data().iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() <= 1e-7);
        }
    }

    #[test]
    fn softmax_nan_propagates() {
        let s = softmax(&Array::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap());
        assert!(s.data().iter().all(|v| v.is_nan()));
    }

    #[test]
    fn layer_norm_examples() {
        let g = Array::full(&[4], 1.0f64);
        let b = Array::zeros(&[4]);
        let c = layer_norm(&Array::full(&[1, 4], 3.0), &g, &b, 1e-5).unwrap();
        assert!(c.data().iter().all(|v| v.abs() < 1e-12));

        let std = Array::new(vec![1, 2], vec![1.0f64, -1.0]).unwrap();
        let y = layer_norm(&std, &Array::full(&[2], 1.0), &Array::zeros(&[2]), 0.0).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-6 && (y.data()[1] + 1.0).abs() < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let row: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let gain: Vec<f64> = (0..6).map(|_| rng.gen_range(0.5..1.5)).collect();
        let bias: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let mean = row.iter().sum::<f64>() / 6.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        let out = layer_norm(
            &Array::new(vec![1, 6], row.clone()).unwrap(),
            &Array::new(vec![6], gain.clone()).unwrap(),
            &Array::new(vec![6], bias.clone()).unwrap(),
            1e-5,
        )
        .unwrap();
        for j in 0..6 {
            let want = (row[j] - mean) / (var + 1e-5).sqrt() * gain[j] + bias[j];
            assert!((out.data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn array_rejects_bad_shapes() {
        assert!(Array::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Array::<f32>::new(vec![0, 2], vec![]).is_err());
    }
}
