use super::activation::axis_layout;
use super::tensor::{expect_rank, expect_same_shape};
use super::{sentinel, OpResult, Scalar, Tensor};

/// Elementwise sum; used for residual connections. Its gradient passes the
/// upstream gradient unchanged to both operands.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> OpResult<Tensor<T>> {
    expect_same_shape("add", a.shape(), b.shape())?;
    let mut out = a.clone();
    out.add_assign(b)?;
    sentinel("add", &out)?;
    Ok(out)
}

/// Mean along `axis`; the axis is removed from the output shape.
pub fn mean_over_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> OpResult<Tensor<T>> {
    let (outer, len, inner) = axis_layout(x.shape(), axis)?;
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    let scale = T::one() / T::from_usize(len.max(1)).unwrap();
    let src = x.data();
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for t in 0..len {
            let row = &src[(o * len + t) * inner..(o * len + t + 1) * inner];
            for (d, &v) in dst.iter_mut().zip(row) {
                *d += v;
            }
        }
        dst.iter_mut().for_each(|v| *v *= scale);
    }
    let out = Tensor::from_vec(&shape, out)?;
    sentinel("mean_over_axis", &out)?;
    Ok(out)
}

/// Spreads the upstream gradient evenly over the reduced axis.
pub fn mean_over_axis_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
    axis: usize,
) -> OpResult<Tensor<T>> {
    let (outer, len, inner) = axis_layout(input_shape, axis)?;
    let mut expect = input_shape.to_vec();
    expect.remove(axis);
    expect_same_shape("mean backward", &expect, grad_out.shape())?;
    let scale = T::one() / T::from_usize(len.max(1)).unwrap();
    let g = grad_out.data();
    let mut dx = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        for t in 0..len {
            let row = &mut dx[(o * len + t) * inner..(o * len + t + 1) * inner];
            for (d, &v) in row.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                *d = v * scale;
            }
        }
    }
    Tensor::from_vec(input_shape, dx)
}

/// `[..., M, N] -> [..., N, M]`. Applying it twice is the identity, so it
/// is also its own gradient.
pub fn swap_last_axes<T: Scalar>(x: &Tensor<T>) -> OpResult<Tensor<T>> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(super::OpError::Shape(format!("swap_last_axes needs rank >= 2, got {s:?}")));
    }
    let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
    let outer = x.len() / (m * n).max(1);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        let base = o * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = src[base + i * n + j];
            }
        }
    }
    let mut shape = s.to_vec();
    let r = shape.len();
    shape.swap(r - 2, r - 1);
    Tensor::from_vec(&shape, out)
}

/// `[B, C, 1, T] -> [B, 1, C, T]`: the channel axis becomes the image height.
///
/// Element `(b, c, 0, t)` moves to `(b, 0, c, t)`. Both have flat index
/// `(b * C + c) * T + t`, so the data buffer is reused as is.
pub fn transpose_c1t_to_1ct<T: Scalar>(x: Tensor<T>) -> OpResult<Tensor<T>> {
    expect_rank("transpose_c1t_to_1ct", x.shape(), 4)?;
    let s = x.shape().to_vec();
    if s[2] != 1 {
        return Err(super::OpError::Shape(format!(
            "transpose_c1t_to_1ct expects a unit height axis, got {s:?}"
        )));
    }
    x.reshape(&[s[0], 1, s[1], s[3]])
}

/// Inverse of [`transpose_c1t_to_1ct`]; also its gradient.
pub fn transpose_1ct_to_c1t<T: Scalar>(x: Tensor<T>) -> OpResult<Tensor<T>> {
    expect_rank("transpose_1ct_to_c1t", x.shape(), 4)?;
    let s = x.shape().to_vec();
    if s[1] != 1 {
        return Err(super::OpError::Shape(format!(
            "transpose_1ct_to_c1t expects a unit channel axis, got {s:?}"
        )));
    }
    x.reshape(&[s[0], s[2], 1, s[3]])
}
