//! Dense row-major tensors and the handful of kernels the encoder needs.
//!
//! Everything is generic over [`Scalar`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Send + Sync + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Lossy conversion from an `f64` constant.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite constant")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// A named, shaped, row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn zeros_like(other: &Tensor<T>) -> Self {
        Self::zeros(other.name.clone(), &other.shape)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Shape and name of a parameter, independent of its values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub fn zeros_like_all<T: Scalar>(tensors: &[Tensor<T>]) -> Vec<Tensor<T>> {
    tensors.iter().map(Tensor::zeros_like).collect()
}

/// `y[n, o] = b[o] + Σ_i x[n, i] · w[i, o]` with `w` stored `[d_in, d_out]`.
pub fn linear_forward<T: Scalar>(
    x: &[T],
    rows: usize,
    d_in: usize,
    w: &[T],
    b: &[T],
    d_out: usize,
) -> Vec<T> {
    debug_assert_eq!(x.len(), rows * d_in);
    debug_assert_eq!(w.len(), d_in * d_out);
    let mut y = Vec::with_capacity(rows * d_out);
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    for r in 0..rows {
        let xr = &x[r * d_in..(r + 1) * d_in];
        let yr = &mut y[r * d_out..(r + 1) * d_out];
        for (i, &xi) in xr.iter().enumerate() {
            if xi == T::zero() {
                continue;
            }
            let wi = &w[i * d_out..(i + 1) * d_out];
            for (yo, &wio) in yr.iter_mut().zip(wi) {
                *yo = *yo + xi * wio;
            }
        }
    }
    y
}

/// Accumulates `dw`, `db` and returns `dx` for [`linear_forward`].
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    rows: usize,
    d_in: usize,
    d_out: usize,
    w: &[T],
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let mut dx = vec![T::zero(); rows * d_in];
    for r in 0..rows {
        let dyr = &dy[r * d_out..(r + 1) * d_out];
        for (g, &d) in db.iter_mut().zip(dyr) {
            *g = *g + d;
        }
        let xr = &x[r * d_in..(r + 1) * d_in];
        let dxr = &mut dx[r * d_in..(r + 1) * d_in];
        for i in 0..d_in {
            let wi = &w[i * d_out..(i + 1) * d_out];
            dxr[i] = dot(wi, dyr);
            let xi = xr[i];
            if xi != T::zero() {
                let dwi = &mut dw[i * d_out..(i + 1) * d_out];
                for (g, &d) in dwi.iter_mut().zip(dyr) {
                    *g = *g + xi * d;
                }
            }
        }
    }
    dx
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

/// Normalized activations and inverse standard deviations kept for backward.
#[derive(Debug, Clone)]
pub struct LnCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm_forward<T: Scalar>(
    x: &[T],
    rows: usize,
    dim: usize,
    gain: &[T],
    bias: &[T],
    eps: T,
) -> (Vec<T>, LnCache<T>) {
    let mut y = vec![T::zero(); rows * dim];
    let mut xhat = vec![T::zero(); rows * dim];
    let mut rstd = Vec::with_capacity(rows);
    let inv_dim = T::one() / T::from_usize(dim).unwrap();
    for r in 0..rows {
        let xr = &x[r * dim..(r + 1) * dim];
        let mean = xr.iter().copied().sum::<T>() * inv_dim;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_dim;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        for i in 0..dim {
            let h = (xr[i] - mean) * rs;
            xhat[r * dim + i] = h;
            y[r * dim + i] = h * gain[i] + bias[i];
        }
    }
    (y, LnCache { xhat, rstd })
}

pub fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    cache: &LnCache<T>,
    dim: usize,
    gain: &[T],
    dgain: &mut [T],
    dbias: &mut [T],
) -> Vec<T> {
    let rows = cache.rstd.len();
    let mut dx = vec![T::zero(); rows * dim];
    let inv_dim = T::one() / T::from_usize(dim).unwrap();
    let mut dxhat = vec![T::zero(); dim];
    for r in 0..rows {
        let dyr = &dy[r * dim..(r + 1) * dim];
        let xh = &cache.xhat[r * dim..(r + 1) * dim];
        for i in 0..dim {
            dgain[i] = dgain[i] + dyr[i] * xh[i];
            dbias[i] = dbias[i] + dyr[i];
            dxhat[i] = dyr[i] * gain[i];
        }
        let mean_d = dxhat.iter().copied().sum::<T>() * inv_dim;
        let mean_dx = dot(&dxhat, xh) * inv_dim;
        let rs = cache.rstd[r];
        for i in 0..dim {
            dx[r * dim + i] = rs * (dxhat[i] - mean_d - xh[i] * mean_dx);
        }
    }
    dx
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf) GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let v = x.as_f64();
    T::of(0.5 * v * (1.0 + libm::erf(v / SQRT_2)))
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let v = x.as_f64();
    T::of(0.5 * (1.0 + libm::erf(v / SQRT_2)) + v * INV_SQRT_2PI * (-0.5 * v * v).exp())
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// `log Σ exp(row)` computed stably.
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn linear_matches_definition() {
        let x = [1.0, 2.0, -1.0, 0.5];
        let w = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let b = [1.0, -1.0, 0.0];
        let y = linear_forward(&x, 2, 2, &w, &b, 3);
        assert_eq!(y.len(), 6);
        assert!((y[0] - (1.0 + 0.1 + 0.8)).abs() < 1e-12);
        assert!((y[5] - (-0.3 + 0.3)).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_backward_matches_differences() {
        let x = [0.3, -1.2, 2.0, 0.7, 0.1, 0.9, -0.4, 1.1];
        let g = [1.1, 0.9, 1.3, 0.7];
        let b = [0.1, 0.2, -0.3, 0.0];
        let w = [0.5, -1.0, 2.0, 0.3, 1.5, -0.7, 0.2, 0.9];
        let loss = |x: &[f64]| {
            let (y, _) = layer_norm_forward(x, 2, 4, &g, &b, 1e-5);
            y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = layer_norm_forward(&x, 2, 4, &g, &b, 1e-5);
        let mut dg = [0.0; 4];
        let mut db = [0.0; 4];
        let dx = layer_norm_backward(&w, &cache, 4, &g, &mut dg, &mut db);
        let num = numeric_grad(loss, &x, 1e-5);
        for (a, n) in dx.iter().zip(&num) {
            assert!((a - n).abs() < 1e-8, "{a} vs {n}");
        }
    }

    #[test]
    fn gelu_grad_matches_differences() {
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let n = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((gelu_grad(x) - n).abs() < 1e-8);
        }
        assert!((gelu(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut row = [1000.0f32, 999.0, -5.0];
        softmax_in_place(&mut row);
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert!((log_sum_exp(&[0.0f64, 0.0]) - 2f64.ln()).abs() < 1e-12);
    }
}
