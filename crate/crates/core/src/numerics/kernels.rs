//! Forward kernels shared by the tape and by value-level helpers.

use crate::error::{Error, Result};
use crate::numerics::tensor::{shape_str, Tensor};
use crate::scalar::{cst, Scalar};

/// Strided view of a matrix inside a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatRef {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl MatRef {
    pub fn dense(cols: usize) -> Self {
        MatRef {
            offset: 0,
            rs: cols,
            cs: 1,
        }
    }

    pub fn at(offset: usize, rs: usize, cs: usize) -> Self {
        MatRef { offset, rs, cs }
    }

    pub fn t(self) -> Self {
        MatRef {
            offset: self.offset,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `c <- alpha * a·b + beta * c` where `a` is m×k and `b` is k×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    ar: MatRef,
    b: &[T],
    br: MatRef,
    beta: T,
    c: &mut [T],
    cr: MatRef,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || ar.last_index(m, k) < a.len(), "gemm: lhs out of bounds");
    assert!(k == 0 || br.last_index(k, n) < b.len(), "gemm: rhs out of bounds");
    assert!(cr.last_index(m, n) < c.len(), "gemm: output out of bounds");
    // SAFETY: bounds of every reachable element were asserted above, and `c`
    // is exclusively borrowed so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(ar.offset),
            ar.rs as isize,
            ar.cs as isize,
            b.as_ptr().add(br.offset),
            br.rs as isize,
            br.cs as isize,
            beta,
            c.as_mut_ptr().add(cr.offset),
            cr.rs as isize,
            cr.cs as isize,
        );
    }
}

/// Matrix product of rank-2 tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dimension {k}"),
            format!("{} · {}", shape_str(a.shape()), shape_str(b.shape())),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(
        m,
        k,
        n,
        T::one(),
        a.data(),
        MatRef::dense(k),
        b.data(),
        MatRef::dense(n),
        T::zero(),
        &mut out,
        MatRef::dense(n),
    );
    Tensor::new(vec![m, n], out)
}

/// Splits a shape around `axis` into (outer, axis length, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::invalid(format!(
            "axis {axis} out of range for {}",
            shape_str(shape)
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).fold(T::neg_infinity(), |m, j| m.max(src[idx(j)]));
            let mut total = T::zero();
            for j in 0..n {
                let e = (src[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..n {
                out[idx(j)] /= total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// In-place row softmax over a contiguous `rows × n` block.
pub(crate) fn softmax_rows_in_place<T: Scalar>(buf: &mut [T], n: usize) {
    for row in buf.chunks_mut(n) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

/// Layer normalization along `axis` with population variance and no affine
/// terms. Returns the normalized tensor and per-slice reciprocal std.
pub fn layer_norm_with_stats<T: Scalar>(x: &Tensor<T>, axis: usize, eps: T) -> Result<(Tensor<T>, Vec<T>)> {
    let (outer, n, inner) = axis_split(x.shape(), axis)?;
    if n < 2 {
        return Err(Error::invalid("layer_norm needs an axis of length >= 2"));
    }
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    let mut rstds = Vec::with_capacity(outer * inner);
    let nf = T::from_usize(n).unwrap();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let mean = (0..n).map(|j| src[idx(j)]).sum::<T>() / nf;
            let var = (0..n)
                .map(|j| {
                    let d = src[idx(j)] - mean;
                    d * d
                })
                .sum::<T>()
                / nf;
            let rstd = (var + eps).sqrt().recip();
            for j in 0..n {
                out[idx(j)] = (src[idx(j)] - mean) * rstd;
            }
            rstds.push(rstd);
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, rstds))
}

pub fn layer_norm<T: Scalar>(x: &Tensor<T>, axis: usize, eps: T) -> Result<Tensor<T>> {
    layer_norm_with_stats(x, axis, eps).map(|(y, _)| y)
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation, evaluated as `x·σ(2u)` (equal to
/// `x·(1 + tanh u)/2`) with one exponential.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    x * sigmoid(gelu_inner(x) * cst::<T>(2.0))
}

#[inline]
fn gelu_inner<T: Scalar>(x: T) -> T {
    cst::<T>((2.0 / std::f64::consts::PI).sqrt()) * (x + cst::<T>(GELU_C) * x * x * x)
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = cst::<T>((2.0 / std::f64::consts::PI).sqrt());
    let s = sigmoid(gelu_inner(x) * cst::<T>(2.0));
    let du = k * (T::one() + cst::<T>(3.0 * GELU_C) * x * x);
    s + x * s * (T::one() - s) * cst::<T>(2.0) * du
}
