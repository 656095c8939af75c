use super::tensor::{expect_rank, expect_same_shape};
use super::{OpResult, Scalar, Tensor};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

fn clamp<T: Scalar>(p: T) -> T {
    let lo = T::from_f64_lossy(PROB_CLAMP);
    let hi = T::one() - lo;
    p.max(lo).min(hi)
}

/// Binary cross entropy on probabilities `t [B, N]` against targets `y [B, N]`:
///
/// `L = -(1/B) * sum_{k,n} [(1 - y) ln(1 - t) + y ln t]`
///
/// Summed over classes, averaged over the batch only. Targets may be
/// fractional (the mixup comparison arm uses ratio labels).
pub fn bce_from_probability<T: Scalar>(t: &Tensor<T>, y: &Tensor<T>) -> OpResult<T> {
    expect_rank("bce", t.shape(), 2)?;
    expect_same_shape("bce", t.shape(), y.shape())?;
    let batch = T::from_usize(t.shape()[0].max(1)).unwrap();
    let mut total = T::zero();
    for (&p, &label) in t.data().iter().zip(y.data()) {
        let p = clamp(p);
        total += (T::one() - label) * (T::one() - p).ln() + label * p.ln();
    }
    Ok(-total / batch)
}

/// `dL/dt`, evaluated at the clamped probability.
pub fn bce_from_probability_backward<T: Scalar>(t: &Tensor<T>, y: &Tensor<T>) -> OpResult<Tensor<T>> {
    expect_rank("bce", t.shape(), 2)?;
    expect_same_shape("bce", t.shape(), y.shape())?;
    let batch = T::from_usize(t.shape()[0].max(1)).unwrap();
    let data = t
        .data()
        .iter()
        .zip(y.data())
        .map(|(&p, &label)| {
            let p = clamp(p);
            ((T::one() - label) / (T::one() - p) - label / p) / batch
        })
        .collect();
    Tensor::from_vec(t.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_probability_on_positive_is_ln2() {
        let t = Tensor::<f64>::from_f64(&[1, 1], &[0.5]).unwrap();
        let y = Tensor::from_f64(&[1, 1], &[1.0]).unwrap();
        let l = bce_from_probability(&t, &y).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn hand_evaluated_two_by_two() {
        // -1/2 [ln 0.9 + ln 0.9 + ln 0.5 + ln 0.5]
        let t = Tensor::<f64>::from_f64(&[2, 2], &[0.9, 0.1, 0.5, 0.5]).unwrap();
        let y = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = bce_from_probability(&t, &y).unwrap();
        let expect = -0.5 * (2.0 * 0.9f64.ln() + 2.0 * 0.5f64.ln());
        assert!((l - expect).abs() < 1e-12);
        assert!((l - 0.798508).abs() < 1e-6);
    }

    #[test]
    fn exact_targets_are_near_zero_after_clamping() {
        let t = Tensor::<f64>::from_f64(&[1, 3], &[1.0, 0.0, 1.0]).unwrap();
        let l = bce_from_probability(&t, &t).unwrap();
        let bound = 3.0 * (1.0 / (1.0 - 1e-7f64)).ln();
        assert!(l >= 0.0 && l <= bound + 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let t = Tensor::<f32>::zeros(&[2, 2]);
        let y = Tensor::<f32>::zeros(&[2, 3]);
        assert!(bce_from_probability(&t, &y).is_err());
    }
}
