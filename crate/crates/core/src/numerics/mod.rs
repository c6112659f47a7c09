//! Deterministic dense kernels.
//!
//! Every kernel is a pure function of its inputs. The slice-level helpers
//! (`gemm_*`, `conv2d_backward`, ...) are shared with the differentiation
//! tape so forward and backward use the same arithmetic.

pub(crate) mod conv;
mod resize;
mod spectrum;

pub use conv::{conv2d, depthwise_conv2d};
pub(crate) use conv::{conv2d_backward, conv2d_into, depthwise_backward, depthwise_into};
pub use resize::{bicubic_resize, cubic_weight};
pub use spectrum::fft2_magnitude;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Element-wise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Sin,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Sin => x.sin(),
        }
    }

    /// Derivative given the pre-activation `x` and the output `y`.
    #[inline]
    pub fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
            Activation::Sin => x.cos(),
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn activation<T: Scalar>(x: &Tensor<T>, f: Activation) -> Tensor<T> {
    let y = x.map(|v| f.apply(v));
    y.debug_check_finite("activation");
    y
}

/// `c = a·b` for row-major `a[m×k]`, `b[k×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0) {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    let mut out = vec![T::zero(); m * n];
    gemm_nn(a.data(), b.data(), &mut out, m, k, n);
    let c = Tensor::from_vec(&[m, n], out);
    c.debug_check_finite("matmul");
    Ok(c)
}

/// `out += a[m×k] · b[k×n]`.
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (t, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += aᵀ · b` for `a[k×m]`, `b[k×n]`.
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for t in 0..k {
        let arow = &a[t * m..(t + 1) * m];
        let brow = &b[t * n..(t + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` for `a[m×k]`, `b[n×k]`.
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.ndim() {
        return Err(Error::contract(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    let n = x.dim(axis);
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();
    let mut out = x.data().to_vec();
    let mut buf = vec![T::zero(); n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = out[base + j * inner];
            }
            softmax_in_place(&mut buf);
            for (j, b) in buf.iter().enumerate() {
                out[base + j * inner] = *b;
            }
        }
    }
    let y = Tensor::from_vec(x.shape(), out);
    y.debug_check_finite("softmax");
    Ok(y)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Normalizes over the last axis then applies `gamma`, `beta`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let c = *x.shape().last().expect("non-empty shape");
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.data().chunks(c).zip(out.chunks_mut(c)) {
        let (mean, inv) = moments(src, eps);
        for j in 0..c {
            dst[j] = (src[j] - mean) * inv * gamma.data()[j] + beta.data()[j];
        }
    }
    let y = Tensor::from_vec(x.shape(), out);
    y.debug_check_finite("layer_norm");
    Ok(y)
}

/// Mean and `1/sqrt(var + eps)` of one row (population variance).
pub(crate) fn moments<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::from_usize_lossy(row.len());
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let denom = (var + eps).sqrt();
    let inv = if denom > T::zero() {
        T::one() / denom
    } else {
        T::zero()
    };
    (mean, inv)
}
