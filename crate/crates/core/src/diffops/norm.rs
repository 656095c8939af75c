use super::{sentinel, Mode, OpError, OpResult, Scalar, Tensor};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

/// Saved forward state needed by [`batchnorm_backward`].
#[derive(Debug, Clone)]
pub struct BatchNormCache<T: Scalar> {
    /// Normalized input before the affine transform.
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mode: Mode,
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

fn layout(shape: &[usize]) -> OpResult<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(OpError::Shape(format!(
            "batchnorm expects [B, C, ...], got {shape:?}"
        )));
    }
    let spatial: usize = shape[2..].iter().product();
    Ok((shape[0], shape[1], spatial))
}

/// Per-channel normalization over batch and spatial axes (channel axis 1).
///
/// Train mode normalizes by the biased batch variance and folds the batch
/// statistics into the running ones as
/// `running = momentum * running + (1 - momentum) * batch`, using the unbiased
/// variance for the running estimate. Eval mode normalizes by the running
/// statistics and leaves them untouched.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    mode: Mode,
    momentum: f64,
    eps: f64,
) -> OpResult<(Tensor<T>, BatchNormCache<T>)> {
    let (batch, channels, spatial) = layout(input.shape())?;
    for (what, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", &*running_mean),
        ("running_var", &*running_var),
    ] {
        if t.shape() != [channels] {
            return Err(OpError::Shape(format!(
                "batchnorm {what} has shape {:?}, expected [{channels}]",
                t.shape()
            )));
        }
    }
    let count = batch * spatial;
    if mode == Mode::Train && count < 2 {
        return Err(OpError::Invalid(format!(
            "batchnorm in train mode needs at least 2 values per channel, got {count}"
        )));
    }
    let eps_t = T::from_f64_lossy(eps);
    let mom = T::from_f64_lossy(momentum);
    let x = input.data();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); channels];
    let n = T::from_usize(count).unwrap();

    for c in 0..channels {
        let (mean, var) = match mode {
            Mode::Train => {
                let mut sum = T::zero();
                for b in 0..batch {
                    let off = (b * channels + c) * spatial;
                    sum += x[off..off + spatial].iter().copied().sum::<T>();
                }
                let mean = sum / n;
                let mut sq = T::zero();
                for b in 0..batch {
                    let off = (b * channels + c) * spatial;
                    sq += x[off..off + spatial]
                        .iter()
                        .map(|&v| (v - mean) * (v - mean))
                        .sum::<T>();
                }
                let var = sq / n;
                let unbiased = sq / (n - T::one());
                let rm = &mut running_mean.data_mut()[c];
                *rm = mom * *rm + (T::one() - mom) * mean;
                let rv = &mut running_var.data_mut()[c];
                *rv = mom * *rv + (T::one() - mom) * unbiased;
                (mean, var)
            }
            Mode::Eval => (running_mean.data()[c], running_var.data()[c]),
        };
        let istd = T::one() / (var + eps_t).sqrt();
        inv_std[c] = istd;
        let g = gamma.data()[c];
        let bt = beta.data()[c];
        for b in 0..batch {
            let off = (b * channels + c) * spatial;
            for i in off..off + spatial {
                let h = (x[i] - mean) * istd;
                xhat[i] = h;
                out[i] = g * h + bt;
            }
        }
    }
    let out = Tensor::from_vec(input.shape(), out)?;
    sentinel("batchnorm", &out)?;
    Ok((
        out,
        BatchNormCache {
            xhat: Tensor::from_vec(input.shape(), xhat)?,
            inv_std,
            mode,
        },
    ))
}

pub fn batchnorm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &BatchNormCache<T>,
) -> OpResult<BatchNormGrads<T>> {
    if grad_out.shape() != cache.xhat.shape() {
        return Err(OpError::Shape(format!(
            "batchnorm backward: upstream {:?} vs cached {:?}",
            grad_out.shape(),
            cache.xhat.shape()
        )));
    }
    let (batch, channels, spatial) = layout(grad_out.shape())?;
    let dy = grad_out.data();
    let xh = cache.xhat.data();
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    let n = T::from_usize(batch * spatial).unwrap();
    for c in 0..channels {
        let mut sum_dy = T::zero();
        let mut sum_dy_xh = T::zero();
        for b in 0..batch {
            let off = (b * channels + c) * spatial;
            for i in off..off + spatial {
                sum_dy += dy[i];
                sum_dy_xh += dy[i] * xh[i];
            }
        }
        dgamma[c] = sum_dy_xh;
        dbeta[c] = sum_dy;
        let g = gamma.data()[c];
        let istd = cache.inv_std[c];
        for b in 0..batch {
            let off = (b * channels + c) * spatial;
            for i in off..off + spatial {
                dx[i] = match cache.mode {
                    Mode::Eval => dy[i] * g * istd,
                    Mode::Train => {
                        g * istd * (n * dy[i] - sum_dy - xh[i] * sum_dy_xh) / n
                    }
                };
            }
        }
    }
    Ok(BatchNormGrads {
        input: Tensor::from_vec(grad_out.shape(), dx)?,
        gamma: Tensor::from_vec(&[channels], dgamma)?,
        beta: Tensor::from_vec(&[channels], dbeta)?,
    })
}
