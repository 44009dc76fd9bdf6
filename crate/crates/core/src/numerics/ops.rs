//! Forward kernels shared by the tape, the streaming path and callers that
//! only need plain tensor math.

use crate::error::{Error, Result};

use super::tensor::check_finite;
use super::{gemm, Scalar, Tensor};

/// Default epsilon for `rmsnorm`, `layernorm` and `l2_normalize`.
pub const NORM_EPS: f64 = 1e-6;

#[inline]
pub fn sigmoid_scalar<F: Scalar>(x: F) -> F {
    // Branch-free; exp overflow for very negative x yields 1/inf = 0.
    F::one() / (F::one() + (-x).exp())
}

#[inline]
pub fn silu_scalar<F: Scalar>(x: F) -> F {
    x * sigmoid_scalar(x)
}

/// d/dx [x * sigma(x)] = sigma(x) * (1 + x * (1 - sigma(x)))
#[inline]
pub fn silu_grad_scalar<F: Scalar>(x: F) -> F {
    let s = sigmoid_scalar(x);
    s * (F::one() + x * (F::one() - s))
}

pub fn silu<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    x.check_finite("silu")?;
    Ok(x.map(silu_scalar))
}

pub fn relu<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    x.check_finite("relu")?;
    Ok(x.map(|v| v.max(F::zero())))
}

pub fn sigmoid<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    x.check_finite("sigmoid")?;
    Ok(x.map(sigmoid_scalar))
}

/// Row-wise RMS normalization into `out`; writes `1/sqrt(mean(x^2)+eps)`
/// per row into `inv_rms`.
pub(crate) fn rmsnorm_rows<F: Scalar>(
    x: &[F],
    cols: usize,
    gain: Option<&[F]>,
    eps: F,
    out: &mut [F],
    inv_rms: &mut [F],
) {
    let n = F::lit(cols as f64);
    for (r, (xr, or)) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)).enumerate() {
        let ms = xr.iter().map(|&v| v * v).sum::<F>() / n;
        let inv = F::one() / (ms + eps).sqrt();
        inv_rms[r] = inv;
        match gain {
            Some(g) => {
                for ((o, &xv), &gv) in or.iter_mut().zip(xr).zip(g) {
                    *o = gv * xv * inv;
                }
            }
            None => {
                for (o, &xv) in or.iter_mut().zip(xr) {
                    *o = xv * inv;
                }
            }
        }
    }
}

/// `gain * x / sqrt(mean(x^2) + eps)` over the last dimension.
pub fn rmsnorm<F: Scalar>(x: &Tensor<F>, gain: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
    let cols = x.cols();
    if cols == 0 || x.rank() == 0 {
        return Err(Error::invalid("rmsnorm: zero-length last dimension"));
    }
    if gain.numel() != cols {
        return Err(Error::shape("rmsnorm", x.shape(), gain.shape()));
    }
    x.check_finite("rmsnorm")?;
    let mut out = Tensor::zeros(x.shape().to_vec());
    let mut inv = vec![F::zero(); x.rows()];
    rmsnorm_rows(x.data(), cols, Some(gain.data()), eps, out.data_mut(), &mut inv);
    out.check_finite("rmsnorm")?;
    Ok(out)
}

/// Row-wise layer normalization; `inv_std` receives `1/sqrt(var+eps)`.
pub(crate) fn layernorm_rows<F: Scalar>(
    x: &[F],
    cols: usize,
    gain: &[F],
    bias: &[F],
    eps: F,
    out: &mut [F],
    inv_std: &mut [F],
) {
    let n = F::lit(cols as f64);
    for (r, (xr, or)) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)).enumerate() {
        let mean = xr.iter().copied().sum::<F>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let inv = F::one() / (var + eps).sqrt();
        inv_std[r] = inv;
        for (j, o) in or.iter_mut().enumerate() {
            *o = gain[j] * (xr[j] - mean) * inv + bias[j];
        }
    }
}

pub fn layernorm<F: Scalar>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    bias: &Tensor<F>,
    eps: F,
) -> Result<Tensor<F>> {
    let cols = x.cols();
    if cols == 0 {
        return Err(Error::invalid("layernorm: zero-length last dimension"));
    }
    if gain.numel() != cols || bias.numel() != cols {
        return Err(Error::shape("layernorm", x.shape(), gain.shape()));
    }
    x.check_finite("layernorm")?;
    let mut out = Tensor::zeros(x.shape().to_vec());
    let mut inv = vec![F::zero(); x.rows()];
    layernorm_rows(
        x.data(),
        cols,
        gain.data(),
        bias.data(),
        eps,
        out.data_mut(),
        &mut inv,
    );
    Ok(out)
}

/// Row-wise `x / max(||x||_2, eps)`; `norms` receives the clamped norms.
pub(crate) fn l2_normalize_rows<F: Scalar>(
    x: &[F],
    cols: usize,
    eps: F,
    out: &mut [F],
    norms: &mut [F],
) {
    for (r, (xr, or)) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)).enumerate() {
        let n = xr.iter().map(|&v| v * v).sum::<F>().sqrt().max(eps);
        norms[r] = n;
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = v / n;
        }
    }
}

pub fn l2_normalize<F: Scalar>(x: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
    let cols = x.cols();
    if cols == 0 {
        return Err(Error::invalid("l2_normalize: zero-length last dimension"));
    }
    x.check_finite("l2_normalize")?;
    let mut out = Tensor::zeros(x.shape().to_vec());
    let mut norms = vec![F::zero(); x.rows()];
    l2_normalize_rows(x.data(), cols, eps, out.data_mut(), &mut norms);
    Ok(out)
}

/// `[m,k] x [k,n] -> [m,n]`.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(vec![m, n]);
    gemm(false, false, m, k, n, a.data(), b.data(), out.data_mut(), false);
    check_finite(out.data(), "matmul")?;
    Ok(out)
}

fn zip_same<F: Scalar>(
    op: &'static str,
    a: &Tensor<F>,
    b: &Tensor<F>,
    f: impl Fn(F, F) -> F,
) -> Result<Tensor<F>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    let out = Tensor::new(a.shape().to_vec(), data)?;
    out.check_finite(op)?;
    Ok(out)
}

pub fn add<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    zip_same("add", a, b, |x, y| x + y)
}

pub fn sub<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    zip_same("sub", a, b, |x, y| x - y)
}

pub fn mul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    zip_same("mul", a, b, |x, y| x * y)
}

/// Concatenates along the last dimension. All parts must agree on the
/// leading dimensions.
pub fn concat<F: Scalar>(parts: &[&Tensor<F>]) -> Result<Tensor<F>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat: no inputs"))?;
    let lead = &first.shape()[..first.rank().saturating_sub(1)];
    let rows = first.rows();
    for p in parts {
        if p.rows() != rows || &p.shape()[..p.rank().saturating_sub(1)] != lead {
            return Err(Error::shape("concat", first.shape(), p.shape()));
        }
    }
    let width: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows * width);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    let mut shape = lead.to_vec();
    shape.push(width);
    Tensor::new(shape, data)
}

/// Vector-matrix product `x[k] * w[k,n]` into `out[n]`; used by the
/// per-token streaming path.
pub(crate) fn vecmat<F: Scalar>(x: &[F], w: &[F], n: usize, out: &mut [F]) {
    gemm(false, false, 1, x.len(), n, x, w, out, false);
}
