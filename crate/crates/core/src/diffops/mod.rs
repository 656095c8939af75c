//! Differentiable numeric substrate.
//!
//! Every forward operator has a matching `*_backward` function that maps the
//! upstream gradient of a scalar loss to gradients of the operator's inputs
//! and parameters. There is no tape: the model composes these explicitly.

mod activation;
mod adam;
mod conv;
mod linear;
mod loss;
mod norm;
mod pool;
mod reshape;
mod tensor;

use std::sync::atomic::{AtomicBool, Ordering};

use thiserror::Error;

pub use activation::{
    relu, relu_backward, sigmoid, sigmoid_backward, softmax_over_time, softmax_over_time_backward,
};
pub use adam::{adam_step, AdamHyper, AdamState, MomentBuffers};
pub use conv::{window_out as conv_out_len, conv1d, conv1d_backward, conv2d, conv2d_backward, Conv1dSpec, Conv2dSpec, ConvGrads};
pub use linear::{linear, linear_backward, LinearGrads};
pub use loss::{bce_from_probability, bce_from_probability_backward, PROB_CLAMP};
pub use norm::{
    batchnorm, batchnorm_backward, BatchNormCache, BatchNormGrads, BN_EPS, BN_MOMENTUM,
};
pub use pool::{maxpool1d, maxpool2d, maxpool_backward, MaxPoolOutput, Pool2dSpec};
pub use reshape::{
    add, mean_over_axis, mean_over_axis_backward, swap_last_axes, transpose_1ct_to_c1t,
    transpose_c1t_to_1ct,
};
pub use tensor::{gemm, ParamTensor, Scalar, Tensor, Trans};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },
    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },
}

pub type OpResult<T> = Result<T, OpError>;

/// Train mode uses batch statistics; eval mode uses running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

static DEBUG_CHECKS: AtomicBool = AtomicBool::new(false);

/// Enables NaN/Inf sentinels after every forward operator.
pub fn set_debug_checks(enabled: bool) {
    DEBUG_CHECKS.store(enabled, Ordering::Relaxed);
}

pub fn debug_checks_enabled() -> bool {
    DEBUG_CHECKS.load(Ordering::Relaxed)
}

pub(crate) fn sentinel<T: Scalar>(op: &str, t: &Tensor<T>) -> OpResult<()> {
    if debug_checks_enabled() && !t.is_finite() {
        return Err(OpError::NonFinite { op: op.to_string() });
    }
    Ok(())
}
