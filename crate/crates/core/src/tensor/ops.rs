//! Neural-network primitives over [`Tensor`].
//!
//! Every reduction accumulates in f32 regardless of the storage type of the
//! inputs. F16 operands are widened exactly before use.

use half::f16;
use rayon::prelude::*;

use super::{Dtype, Tensor, TensorData};
use crate::error::{Error, Result};

pub const LAYERNORM_EPS: f32 = 1e-6;

/// Work size (multiply-adds) above which matmul rows are split across threads.
const PARALLEL_THRESHOLD: usize = 1 << 16;

fn widen_float<'a>(t: &'a Tensor, what: &str) -> Result<std::borrow::Cow<'a, [f32]>> {
    match t.data() {
        TensorData::F32(v) => Ok(std::borrow::Cow::Borrowed(v)),
        TensorData::F16(v) => Ok(std::borrow::Cow::Owned(v.iter().map(|x| x.to_f32()).collect())),
        TensorData::I8(_) => Err(Error::PrecisionState(format!(
            "{what} is an i8 tensor; integer operands go through the quantized linear path"
        ))),
    }
}

/// Row-major `[m, k] x [k, n]`. Each output element is accumulated as
/// `((0 + a0*b0) + a1*b1) + ...` in ascending `k`, the same order as a naive
/// triple loop, so results are reproducible bit for bit.
pub(crate) fn gemm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0f32; m * n];
    let row = |(i, out_row): (usize, &mut [f32])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PARALLEL_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

fn transpose(w: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut t = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = w[r * cols + c];
        }
    }
    t
}

/// `a[M,K] x b[K,N] -> [M,N]` in f32.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(Error::Dimension(format!(
            "matmul expects rank-2 operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    };
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let av = widen_float(a, "left matmul operand")?;
    let bv = widen_float(b, "right matmul operand")?;
    Tensor::from_f32(vec![m, n], gemm(&av, &bv, m, k, n))
}

/// `x[..., in] * weight[out, in]^T (+ bias[out]) -> [..., out]` in f32.
///
/// The bias is added after the full dot product.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let &[out_dim, in_dim] = weight.shape() else {
        return Err(Error::Dimension(format!(
            "linear weight must be rank 2, got {:?}",
            weight.shape()
        )));
    };
    if x.last_dim() != in_dim {
        return Err(Error::Dimension(format!(
            "linear input last dim {} does not match weight {:?}",
            x.last_dim(),
            weight.shape()
        )));
    }
    let xv = widen_float(x, "linear input")?;
    let wv = widen_float(weight, "linear weight")?;
    let wt = transpose(&wv, out_dim, in_dim);
    let rows = x.rows();
    let mut out = gemm(&xv, &wt, rows, in_dim, out_dim);
    if let Some(b) = bias {
        if b.shape() != [out_dim] {
            return Err(Error::Dimension(format!(
                "bias shape {:?} does not match {out_dim} outputs",
                b.shape()
            )));
        }
        add_bias(&mut out, &widen_float(b, "linear bias")?);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out_dim;
    Tensor::from_f32(shape, out)
}

/// Adds `bias` to every row of a row-major buffer whose row length is `bias.len()`.
pub fn add_bias(out: &mut [f32], bias: &[f32]) {
    for row in out.chunks_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

/// Normalizes over the last axis. Statistics are plain f32 sums in index order.
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let h = x.last_dim();
    if gamma.shape() != [h] || beta.shape() != [h] {
        return Err(Error::Dimension(format!(
            "layernorm over {h} features got gamma {:?} and beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let g = gamma.as_f32()?;
    let b = beta.as_f32()?;
    let xv = widen_float(x, "layernorm input")?;
    let mut out = vec![0.0f32; xv.len()];
    let inv_h = 1.0 / h as f32;
    for (row, dst) in xv.chunks(h).zip(out.chunks_mut(h)) {
        let mean = row.iter().sum::<f32>() * inv_h;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() * inv_h;
        let inv_std = 1.0 / (var + eps).sqrt();
        for i in 0..h {
            dst[i] = (row[i] - mean) * inv_std * g[i] + b[i];
        }
    }
    Tensor::from_f32(x.shape().to_vec(), out)
}

/// GELU with the exact error function: `0.5 x (1 + erf(x / sqrt 2))`.
pub fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2))
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let xv = widen_float(x, "gelu input")?;
    Tensor::from_f32(x.shape().to_vec(), xv.iter().map(|&v| gelu_scalar(v)).collect())
}

/// Max-shifted softmax along `axis`, in f32.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::Dimension(format!(
            "softmax axis {axis} out of range for shape {shape:?}"
        )));
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = widen_float(x, "softmax input")?.into_owned();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let idx = |j: usize| base + j * inner;
            let max = (0..len).map(|j| out[idx(j)]).fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for j in 0..len {
                let e = (out[idx(j)] - max).exp();
                out[idx(j)] = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for j in 0..len {
                out[idx(j)] *= inv;
            }
        }
    }
    Tensor::from_f32(shape.to_vec(), out)
}

/// Converts between float storage types. F32 -> F16 rounds to nearest even
/// and saturates to infinity; F16 -> F32 is exact.
pub fn cast(x: &Tensor, to: Dtype) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    match (x.data(), to) {
        (_, Dtype::I8) => Err(Error::UnsupportedCast(Dtype::I8)),
        (TensorData::F32(_), Dtype::F32) | (TensorData::F16(_), Dtype::F16) => Ok(x.clone()),
        (TensorData::F32(v), Dtype::F16) => {
            Tensor::from_f16(shape, v.iter().map(|&f| f16::from_f32(f)).collect())
        }
        (_, Dtype::F32) => Tensor::from_f32(shape, x.to_f32_vec()),
        (TensorData::I8(v), Dtype::F16) => {
            Tensor::from_f16(shape, v.iter().map(|&i| f16::from_f32(f32::from(i))).collect())
        }
    }
}
