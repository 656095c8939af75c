use super::conv::window_out;
use super::tensor::expect_rank;
use super::{sentinel, OpError, OpResult, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool2dSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl Pool2dSpec {
    pub fn square(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel_h: kernel,
            kernel_w: kernel,
            stride_h: stride,
            stride_w: stride,
            pad_h: pad,
            pad_w: pad,
        }
    }
}

/// Pooled values plus, for every output element, the flat input index it
/// was taken from.
#[derive(Debug, Clone)]
pub struct MaxPoolOutput<T: Scalar> {
    pub output: Tensor<T>,
    pub argmax: Vec<usize>,
    pub input_shape: Vec<usize>,
}

fn pool_raw<T: Scalar>(
    input: &[T],
    planes: usize,
    h: usize,
    w: usize,
    spec: Pool2dSpec,
) -> OpResult<(Vec<T>, Vec<usize>, usize, usize)> {
    if spec.pad_h >= spec.kernel_h.max(1) || spec.pad_w >= spec.kernel_w.max(1) {
        return Err(OpError::Invalid("pool padding must be smaller than the window".into()));
    }
    let ho = window_out(h, spec.kernel_h, spec.stride_h, spec.pad_h)?;
    let wo = window_out(w, spec.kernel_w, spec.stride_w, spec.pad_w)?;
    let mut out = vec![T::zero(); planes * ho * wo];
    let mut arg = vec![0usize; planes * ho * wo];
    for p in 0..planes {
        let base = p * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for ki in 0..spec.kernel_h {
                    let ih = (oh * spec.stride_h + ki) as isize - spec.pad_h as isize;
                    if ih < 0 || ih as usize >= h {
                        continue;
                    }
                    for kj in 0..spec.kernel_w {
                        let iw = (ow * spec.stride_w + kj) as isize - spec.pad_w as isize;
                        if iw < 0 || iw as usize >= w {
                            continue;
                        }
                        let idx = base + ih as usize * w + iw as usize;
                        // strict comparison keeps the lowest index on ties
                        if best_idx == usize::MAX || input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (p * ho + oh) * wo + ow;
                out[o] = best;
                arg[o] = best_idx;
            }
        }
    }
    Ok((out, arg, ho, wo))
}

/// Max pooling over `[B, C, L]` with window `kernel` and step `stride`.
pub fn maxpool1d<T: Scalar>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> OpResult<MaxPoolOutput<T>> {
    expect_rank("maxpool1d", input.shape(), 3)?;
    let s = input.shape();
    let spec = Pool2dSpec {
        kernel_h: 1,
        kernel_w: kernel,
        stride_h: 1,
        stride_w: stride,
        pad_h: 0,
        pad_w: pad,
    };
    let (out, argmax, _, wo) = pool_raw(input.data(), s[0] * s[1], 1, s[2], spec)?;
    let output = Tensor::from_vec(&[s[0], s[1], wo], out)?;
    sentinel("maxpool1d", &output)?;
    Ok(MaxPoolOutput {
        output,
        argmax,
        input_shape: s.to_vec(),
    })
}

/// Max pooling over `[B, C, H, W]`. Padded positions never win.
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>, spec: Pool2dSpec) -> OpResult<MaxPoolOutput<T>> {
    expect_rank("maxpool2d", input.shape(), 4)?;
    let s = input.shape();
    let (out, argmax, ho, wo) = pool_raw(input.data(), s[0] * s[1], s[2], s[3], spec)?;
    let output = Tensor::from_vec(&[s[0], s[1], ho, wo], out)?;
    sentinel("maxpool2d", &output)?;
    Ok(MaxPoolOutput {
        output,
        argmax,
        input_shape: s.to_vec(),
    })
}

/// Routes each upstream gradient to the input element selected in the forward pass.
pub fn maxpool_backward<T: Scalar>(
    pooled: &MaxPoolOutput<T>,
    grad_out: &Tensor<T>,
) -> OpResult<Tensor<T>> {
    if grad_out.shape() != pooled.output.shape() {
        return Err(OpError::Shape(format!(
            "maxpool backward: upstream {:?} vs output {:?}",
            grad_out.shape(),
            pooled.output.shape()
        )));
    }
    let mut dx = Tensor::zeros(&pooled.input_shape);
    let d = dx.data_mut();
    for (&i, &g) in pooled.argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_maximum() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 4], &[1.0, 3.0, 2.0, 0.0]).unwrap();
        let p = maxpool1d(&x, 2, 2, 0).unwrap();
        assert_eq!(p.output.data(), &[3.0, 2.0]);
        let c = Tensor::<f64>::full(&[1, 2, 8], 4.0);
        let pc = maxpool1d(&c, 4, 4, 0).unwrap();
        assert!(pc.output.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn ties_route_to_lowest_index() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 4], &[5.0, 5.0, 1.0, 1.0]).unwrap();
        let p = maxpool1d(&x, 2, 2, 0).unwrap();
        assert_eq!(p.argmax, vec![0, 2]);
        let g = Tensor::from_f64(&[1, 1, 2], &[1.0, 1.0]).unwrap();
        let dx = maxpool_backward(&p, &g).unwrap();
        assert_eq!(dx.data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn padded_2d_pool_shapes() {
        let x = Tensor::<f32>::zeros(&[1, 1, 64, 1250]);
        let p = maxpool2d(&x, Pool2dSpec::square(3, 2, 1)).unwrap();
        assert_eq!(p.output.shape(), &[1, 1, 32, 625]);
    }

    #[test]
    fn negative_inputs_with_padding_pick_real_values() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[-3.0, -1.0, -4.0, -2.0]).unwrap();
        let p = maxpool2d(&x, Pool2dSpec::square(3, 2, 1)).unwrap();
        assert_eq!(p.output.data(), &[-1.0]);
    }
}
