use super::tensor::{expect_rank, gemm, Trans};
use super::{sentinel, OpError, OpResult, Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct LinearGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn dims<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>) -> OpResult<(usize, usize, usize)> {
    expect_rank("linear input", input.shape(), 2)?;
    expect_rank("linear weight", weight.shape(), 2)?;
    let (rows, din) = (input.shape()[0], input.shape()[1]);
    let (dout, wdin) = (weight.shape()[0], weight.shape()[1]);
    if din != wdin {
        return Err(OpError::Shape(format!(
            "linear: input width {din} but weight expects {wdin}"
        )));
    }
    Ok((rows, din, dout))
}

/// `input [B, Din] x weight[Dout, Din]^T + bias[Dout] -> [B, Dout]`.
pub fn linear<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> OpResult<Tensor<T>> {
    let (rows, din, dout) = dims(input, weight)?;
    if bias.shape() != [dout] {
        return Err(OpError::Shape(format!("linear: bias shape {:?}", bias.shape())));
    }
    let mut out = vec![T::zero(); rows * dout];
    for r in 0..rows {
        out[r * dout..(r + 1) * dout].copy_from_slice(bias.data());
    }
    gemm(rows, din, dout, input.data(), Trans::No, weight.data(), Trans::Yes, &mut out, true);
    let out = Tensor::from_vec(&[rows, dout], out)?;
    sentinel("linear", &out)?;
    Ok(out)
}

pub fn linear_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> OpResult<LinearGrads<T>> {
    let (rows, din, dout) = dims(input, weight)?;
    if grad_out.shape() != [rows, dout] {
        return Err(OpError::Shape(format!(
            "linear backward: upstream {:?}",
            grad_out.shape()
        )));
    }
    let mut d_in = vec![T::zero(); rows * din];
    gemm(rows, dout, din, grad_out.data(), Trans::No, weight.data(), Trans::No, &mut d_in, false);
    let mut d_w = vec![T::zero(); dout * din];
    gemm(dout, rows, din, grad_out.data(), Trans::Yes, input.data(), Trans::No, &mut d_w, false);
    let mut d_b = vec![T::zero(); dout];
    for r in 0..rows {
        for (acc, &g) in d_b.iter_mut().zip(&grad_out.data()[r * dout..(r + 1) * dout]) {
            *acc += g;
        }
    }
    Ok(LinearGrads {
        input: Tensor::from_vec(&[rows, din], d_in)?,
        weight: Tensor::from_vec(&[dout, din], d_w)?,
        bias: Tensor::from_vec(&[dout], d_b)?,
    })
}
