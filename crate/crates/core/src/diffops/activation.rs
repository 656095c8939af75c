use super::tensor::expect_same_shape;
use super::{sentinel, OpError, OpResult, Scalar, Tensor};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of `relu` given its input. The subgradient at 0 is 0.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> OpResult<Tensor<T>> {
    expect_same_shape("relu backward", input.shape(), grad_out.shape())?;
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    // Branch on sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Gradient of `sigmoid` given its output `y`.
pub fn sigmoid_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> OpResult<Tensor<T>> {
    expect_same_shape("sigmoid backward", output.shape(), grad_out.shape())?;
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| g * y * (T::one() - y))
        .collect();
    Tensor::from_vec(output.shape(), data)
}

/// (outer, axis length, inner) decomposition for reducing along `axis`.
pub(crate) fn axis_layout(shape: &[usize], axis: usize) -> OpResult<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(OpError::Shape(format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Softmax along `axis`, independently for every other index.
pub fn softmax_over_time<T: Scalar>(x: &Tensor<T>, axis: usize) -> OpResult<Tensor<T>> {
    let (outer, len, inner) = axis_layout(x.shape(), axis)?;
    if len == 0 {
        return Err(OpError::Shape("softmax over an empty axis".into()));
    }
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |t: usize| (o * len + t) * inner + i;
            let mut max = T::neg_infinity();
            for t in 0..len {
                max = max.max(src[idx(t)]);
            }
            let mut total = T::zero();
            for t in 0..len {
                let e = (src[idx(t)] - max).exp();
                out[idx(t)] = e;
                total += e;
            }
            for t in 0..len {
                out[idx(t)] = out[idx(t)] / total;
            }
        }
    }
    let out = Tensor::from_vec(x.shape(), out)?;
    sentinel("softmax_over_time", &out)?;
    Ok(out)
}

/// Gradient of the softmax given its output: `y * (g - sum_t y g)`.
pub fn softmax_over_time_backward<T: Scalar>(
    output: &Tensor<T>,
    grad_out: &Tensor<T>,
    axis: usize,
) -> OpResult<Tensor<T>> {
    expect_same_shape("softmax backward", output.shape(), grad_out.shape())?;
    let (outer, len, inner) = axis_layout(output.shape(), axis)?;
    let y = output.data();
    let g = grad_out.data();
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |t: usize| (o * len + t) * inner + i;
            let dot: T = (0..len).map(|t| y[idx(t)] * g[idx(t)]).sum();
            for t in 0..len {
                dx[idx(t)] = y[idx(t)] * (g[idx(t)] - dot);
            }
        }
    }
    Tensor::from_vec(output.shape(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_values_and_stability() {
        let x = Tensor::<f64>::from_f64(&[4], &[0.0, 800.0, -800.0, 2.0]).unwrap();
        let y = sigmoid(&x);
        assert_eq!(y.data()[0], 0.5);
        assert_eq!(y.data()[1], 1.0);
        assert_eq!(y.data()[2], 0.0);
        assert!((y.data()[3] - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
        assert!(y.is_finite());
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let x = Tensor::<f64>::full(&[2, 5, 3], 0.7);
        let y = softmax_over_time(&x, 1).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn softmax_sums_to_one_along_axis() {
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 1.7).sin() * 30.0).collect();
        let x = Tensor::<f64>::from_f64(&[2, 4, 3], &data).unwrap();
        let y = softmax_over_time(&x, 1).unwrap();
        for b in 0..2 {
            for n in 0..3 {
                let s: f64 = (0..4).map(|t| y.data()[(b * 4 + t) * 3 + n]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert!(y.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn relu_is_idempotent() {
        let x = Tensor::<f32>::from_f64(&[5], &[-1.0, 0.0, 2.0, -0.5, 3.0]).unwrap();
        let once = relu(&x);
        assert_eq!(relu(&once), once);
        assert_eq!(once.data(), &[0.0, 0.0, 2.0, 0.0, 3.0]);
    }
}
