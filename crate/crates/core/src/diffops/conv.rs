//! Convolutions as im2col followed by GEMM. Cross-correlation convention:
//! kernels are not flipped.

use super::tensor::{expect_rank, gemm, Trans};
use super::{sentinel, OpError, OpResult, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl Conv2dSpec {
    pub fn square(stride: usize, pad: usize) -> Self {
        Self {
            stride_h: stride,
            stride_w: stride,
            pad_h: pad,
            pad_w: pad,
        }
    }
}

/// Output extent of a strided window op: `floor((len + 2 pad - k) / stride) + 1`.
pub fn window_out(len: usize, k: usize, stride: usize, pad: usize) -> OpResult<usize> {
    if stride == 0 {
        return Err(OpError::Invalid("stride must be at least 1".into()));
    }
    if len + 2 * pad < k {
        return Err(OpError::Shape(format!(
            "window {k} larger than padded extent {}",
            len + 2 * pad
        )));
    }
    Ok((len + 2 * pad - k) / stride + 1)
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Copy)]
struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: Conv2dSpec,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.spec.stride_h == 1
            && self.spec.stride_w == 1
            && self.spec.pad_h == 0
            && self.spec.pad_w == 0
    }

    fn new(in_shape: [usize; 4], w_shape: [usize; 4], spec: Conv2dSpec) -> OpResult<Self> {
        let [batch, cin, h, w] = in_shape;
        let [cout, wcin, kh, kw] = w_shape;
        if wcin != cin {
            return Err(OpError::Shape(format!(
                "conv: input has {cin} channels but weight expects {wcin}"
            )));
        }
        let ho = window_out(h, kh, spec.stride_h, spec.pad_h)?;
        let wo = window_out(w, kw, spec.stride_w, spec.pad_w)?;
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho,
            wo,
            spec,
        })
    }
}

fn im2col<T: Scalar>(g: &Geometry, input: &[T], col: &mut [T]) {
    let s = g.spec;
    let plane = g.ho * g.wo;
    for c in 0..g.cin {
        let src = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oh in 0..g.ho {
                    let ih = (oh * s.stride_h + ki) as isize - s.pad_h as isize;
                    let out_row = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih as usize >= g.h {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &src[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, v) in out_row.iter_mut().enumerate() {
                        let iw = (ow * s.stride_w + kj) as isize - s.pad_w as isize;
                        *v = if iw < 0 || iw as usize >= g.w {
                            T::zero()
                        } else {
                            src_row[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &Geometry, col: &[T], grad_in: &mut [T]) {
    let s = g.spec;
    let plane = g.ho * g.wo;
    for c in 0..g.cin {
        let dst = &mut grad_in[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oh in 0..g.ho {
                    let ih = (oh * s.stride_h + ki) as isize - s.pad_h as isize;
                    if ih < 0 || ih as usize >= g.h {
                        continue;
                    }
                    let dst_row = &mut dst[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let src_row = &src[oh * g.wo..(oh + 1) * g.wo];
                    for (ow, &v) in src_row.iter().enumerate() {
                        let iw = (ow * s.stride_w + kj) as isize - s.pad_w as isize;
                        if iw >= 0 && (iw as usize) < g.w {
                            dst_row[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<T: Scalar>(bias: Option<&Tensor<T>>, cout: usize) -> OpResult<()> {
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(OpError::Shape(format!(
                "conv: bias shape {:?}, expected [{cout}]",
                b.shape()
            )));
        }
    }
    Ok(())
}

fn conv_forward_raw<T: Scalar>(
    g: &Geometry,
    input: &[T],
    weight: &[T],
    bias: Option<&Tensor<T>>,
) -> Vec<T> {
    let rows = g.col_rows();
    let cols = g.col_cols();
    let in_stride = g.cin * g.h * g.w;
    let out_stride = g.cout * cols;
    let mut out = vec![T::zero(); g.batch * out_stride];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * cols]
    };
    for b in 0..g.batch {
        let x = &input[b * in_stride..(b + 1) * in_stride];
        let y = &mut out[b * out_stride..(b + 1) * out_stride];
        let col_ref: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(g, x, &mut col);
            &col
        };
        gemm(g.cout, rows, cols, weight, Trans::No, col_ref, Trans::No, y, false);
        if let Some(bias) = bias {
            for (o, &bv) in bias.data().iter().enumerate() {
                y[o * cols..(o + 1) * cols].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

fn conv_backward_raw<T: Scalar>(
    g: &Geometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = g.col_rows();
    let cols = g.col_cols();
    let in_stride = g.cin * g.h * g.w;
    let out_stride = g.cout * cols;
    let mut d_in = vec![T::zero(); g.batch * in_stride];
    let mut d_w = vec![T::zero(); g.cout * rows];
    let mut d_b = vec![T::zero(); g.cout];
    let pointwise = g.is_pointwise();
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); rows * cols]
    };
    let mut d_col = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); rows * cols]
    };
    for b in 0..g.batch {
        let x = &input[b * in_stride..(b + 1) * in_stride];
        let dy = &grad_out[b * out_stride..(b + 1) * out_stride];
        for (o, db) in d_b.iter_mut().enumerate() {
            *db += dy[o * cols..(o + 1) * cols].iter().copied().sum::<T>();
        }
        let dx = &mut d_in[b * in_stride..(b + 1) * in_stride];
        if pointwise {
            gemm(g.cout, cols, rows, dy, Trans::No, x, Trans::Yes, &mut d_w, true);
            gemm(rows, g.cout, cols, weight, Trans::Yes, dy, Trans::No, dx, false);
        } else {
            im2col(g, x, &mut col);
            gemm(g.cout, cols, rows, dy, Trans::No, &col, Trans::Yes, &mut d_w, true);
            gemm(rows, g.cout, cols, weight, Trans::Yes, dy, Trans::No, &mut d_col, false);
            col2im_add(g, &d_col, dx);
        }
    }
    (d_in, d_w, d_b)
}

fn shape4(op: &str, t: &[usize]) -> OpResult<[usize; 4]> {
    expect_rank(op, t, 4)?;
    Ok([t[0], t[1], t[2], t[3]])
}

fn shape3_as4(op: &str, t: &[usize]) -> OpResult<[usize; 4]> {
    expect_rank(op, t, 3)?;
    Ok([t[0], t[1], 1, t[2]])
}

fn spec_1d(spec: Conv1dSpec) -> Conv2dSpec {
    Conv2dSpec {
        stride_h: 1,
        stride_w: spec.stride,
        pad_h: 0,
        pad_w: spec.pad,
    }
}

/// `input [B,Cin,L] * weight [Cout,Cin,K] + bias [Cout] -> [B,Cout,Lout]`.
pub fn conv1d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv1dSpec,
) -> OpResult<Tensor<T>> {
    let g = Geometry::new(
        shape3_as4("conv1d input", input.shape())?,
        shape3_as4("conv1d weight", weight.shape())?,
        spec_1d(spec),
    )?;
    check_bias(bias, g.cout)?;
    let out = conv_forward_raw(&g, input.data(), weight.data(), bias);
    let out = Tensor::from_vec(&[g.batch, g.cout, g.wo], out)?;
    sentinel("conv1d", &out)?;
    Ok(out)
}

pub fn conv1d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: Conv1dSpec,
) -> OpResult<ConvGrads<T>> {
    let g = Geometry::new(
        shape3_as4("conv1d input", input.shape())?,
        shape3_as4("conv1d weight", weight.shape())?,
        spec_1d(spec),
    )?;
    if grad_out.shape() != [g.batch, g.cout, g.wo] {
        return Err(OpError::Shape(format!(
            "conv1d backward: upstream gradient {:?}",
            grad_out.shape()
        )));
    }
    let (d_in, d_w, d_b) = conv_backward_raw(&g, input.data(), weight.data(), grad_out.data());
    Ok(ConvGrads {
        input: Tensor::from_vec(input.shape(), d_in)?,
        weight: Tensor::from_vec(weight.shape(), d_w)?,
        bias: Tensor::from_vec(&[g.cout], d_b)?,
    })
}

/// `input [B,Cin,H,W] * weight [Cout,Cin,Kh,Kw] + bias [Cout] -> [B,Cout,Hout,Wout]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> OpResult<Tensor<T>> {
    let g = Geometry::new(
        shape4("conv2d input", input.shape())?,
        shape4("conv2d weight", weight.shape())?,
        spec,
    )?;
    check_bias(bias, g.cout)?;
    let out = conv_forward_raw(&g, input.data(), weight.data(), bias);
    let out = Tensor::from_vec(&[g.batch, g.cout, g.ho, g.wo], out)?;
    sentinel("conv2d", &out)?;
    Ok(out)
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: Conv2dSpec,
) -> OpResult<ConvGrads<T>> {
    let g = Geometry::new(
        shape4("conv2d input", input.shape())?,
        shape4("conv2d weight", weight.shape())?,
        spec,
    )?;
    if grad_out.shape() != [g.batch, g.cout, g.ho, g.wo] {
        return Err(OpError::Shape(format!(
            "conv2d backward: upstream gradient {:?}",
            grad_out.shape()
        )));
    }
    let (d_in, d_w, d_b) = conv_backward_raw(&g, input.data(), weight.data(), grad_out.data());
    Ok(ConvGrads {
        input: Tensor::from_vec(input.shape(), d_in)?,
        weight: Tensor::from_vec(weight.shape(), d_w)?,
        bias: Tensor::from_vec(&[g.cout], d_b)?,
    })
}
