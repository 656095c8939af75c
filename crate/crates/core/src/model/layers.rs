//! Stateful wrappers around the substrate ops. Each layer keeps what its
//! backward pass needs from the most recent train-mode forward.

use crate::diffops::{
    self, BatchNormCache, Conv1dSpec, Conv2dSpec, MaxPoolOutput, Mode, Pool2dSpec, Scalar, Tensor,
};

use super::params::{BufferId, InitKind, ModelParams, ParamId};
use super::{ModelError, ModelResult};

fn missing(layer: &str) -> ModelError {
    ModelError::State(format!("{layer}: backward called without a train-mode forward"))
}

pub(crate) struct Conv1d<T: Scalar> {
    weight: ParamId,
    spec: Conv1dSpec,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv1d<T> {
    /// Bias-free: every convolution in the network is followed by batch norm.
    pub fn new(
        store: &mut ModelParams<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: Conv1dSpec,
    ) -> Self {
        let weight = store.add_param(
            format!("{name}.weight"),
            &[cout, cin, kernel],
            InitKind::HeUniform { fan_in: cin * kernel },
        );
        Self {
            weight,
            spec,
            input: None,
        }
    }

    pub fn forward(&mut self, store: &ModelParams<T>, x: &Tensor<T>, mode: Mode) -> ModelResult<Tensor<T>> {
        let y = diffops::conv1d(x, store.value(self.weight), None, self.spec)?;
        self.input = (mode == Mode::Train).then(|| x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, store: &mut ModelParams<T>, grad: &Tensor<T>) -> ModelResult<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| missing("conv1d"))?;
        let g = diffops::conv1d_backward(&x, store.value(self.weight), grad, self.spec)?;
        store.accumulate(self.weight, &g.weight);
        Ok(g.input)
    }
}

pub(crate) struct Conv2d<T: Scalar> {
    weight: ParamId,
    spec: Conv2dSpec,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        store: &mut ModelParams<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: Conv2dSpec,
    ) -> Self {
        let weight = store.add_param(
            format!("{name}.weight"),
            &[cout, cin, kernel, kernel],
            InitKind::HeUniform {
                fan_in: cin * kernel * kernel,
            },
        );
        Self {
            weight,
            spec,
            input: None,
        }
    }

    pub fn forward(&mut self, store: &ModelParams<T>, x: &Tensor<T>, mode: Mode) -> ModelResult<Tensor<T>> {
        let y = diffops::conv2d(x, store.value(self.weight), None, self.spec)?;
        self.input = (mode == Mode::Train).then(|| x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, store: &mut ModelParams<T>, grad: &Tensor<T>) -> ModelResult<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| missing("conv2d"))?;
        let g = diffops::conv2d_backward(&x, store.value(self.weight), grad, self.spec)?;
        store.accumulate(self.weight, &g.weight);
        Ok(g.input)
    }
}

pub(crate) struct BatchNorm<T: Scalar> {
    gamma: ParamId,
    beta: ParamId,
    running_mean: BufferId,
    running_var: BufferId,
    cache: Option<BatchNormCache<T>>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(store: &mut ModelParams<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add_param(format!("{name}.gamma"), &[channels], InitKind::Ones);
        let beta = store.add_param(format!("{name}.beta"), &[channels], InitKind::Zeros);
        let running_mean = store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        let running_var =
            store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], T::one()));
        Self {
            gamma,
            beta,
            running_mean,
            running_var,
            cache: None,
        }
    }

    pub fn forward(&mut self, store: &mut ModelParams<T>, x: &Tensor<T>, mode: Mode) -> ModelResult<Tensor<T>> {
        let (gamma, beta, rm, rv) =
            store.split_for_norm(self.gamma, self.beta, self.running_mean, self.running_var);
        let (y, cache) = diffops::batchnorm(
            x,
            gamma,
            beta,
            rm,
            rv,
            mode,
            diffops::BN_MOMENTUM,
            diffops::BN_EPS,
        )?;
        self.cache = (mode == Mode::Train).then_some(cache);
        Ok(y)
    }

    pub fn backward(&mut self, store: &mut ModelParams<T>, grad: &Tensor<T>) -> ModelResult<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(|| missing("batchnorm"))?;
        let g = diffops::batchnorm_backward(grad, store.value(self.gamma), &cache)?;
        store.accumulate(self.gamma, &g.gamma);
        store.accumulate(self.beta, &g.beta);
        Ok(g.input)
    }
}

/// Rectifier that remembers its output for the backward mask.
#[derive(Default)]
pub(crate) struct Relu<T: Scalar> {
    output: Option<Tensor<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Self { output: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let y = diffops::relu(x);
        self.output = (mode == Mode::Train).then(|| y.clone());
        y
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> ModelResult<Tensor<T>> {
        let y = self.output.take().ok_or_else(|| missing("relu"))?;
        Ok(diffops::relu_backward(&y, grad)?)
    }
}

pub(crate) struct Linear<T: Scalar> {
    weight: ParamId,
    bias: ParamId,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(store: &mut ModelParams<T>, name: &str, din: usize, dout: usize, init: InitKind) -> Self {
        Self::with_bias(store, name, din, dout, init, InitKind::Zeros)
    }

    pub fn with_bias(
        store: &mut ModelParams<T>,
        name: &str,
        din: usize,
        dout: usize,
        init: InitKind,
        bias_init: InitKind,
    ) -> Self {
        let weight = store.add_param(format!("{name}.weight"), &[dout, din], init);
        let bias = store.add_param(format!("{name}.bias"), &[dout], bias_init);
        Self {
            weight,
            bias,
            input: None,
        }
    }

    pub fn forward(&mut self, store: &ModelParams<T>, x: &Tensor<T>, mode: Mode) -> ModelResult<Tensor<T>> {
        let y = diffops::linear(x, store.value(self.weight), store.value(self.bias))?;
        self.input = (mode == Mode::Train).then(|| x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, store: &mut ModelParams<T>, grad: &Tensor<T>) -> ModelResult<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| missing("linear"))?;
        let g = diffops::linear_backward(&x, store.value(self.weight), grad)?;
        store.accumulate(self.weight, &g.weight);
        store.accumulate(self.bias, &g.bias);
        Ok(g.input)
    }
}

pub(crate) enum PoolKind {
    OneD { kernel: usize, stride: usize },
    TwoD(Pool2dSpec),
}

pub(crate) struct MaxPool<T: Scalar> {
    kind: PoolKind,
    cache: Option<MaxPoolOutput<T>>,
}

impl<T: Scalar> MaxPool<T> {
    pub fn new(kind: PoolKind) -> Self {
        Self { kind, cache: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> ModelResult<Tensor<T>> {
        let pooled = match self.kind {
            PoolKind::OneD { kernel, stride } => diffops::maxpool1d(x, kernel, stride, 0)?,
            PoolKind::TwoD(spec) => diffops::maxpool2d(x, spec)?,
        };
        let y = pooled.output.clone();
        self.cache = (mode == Mode::Train).then_some(pooled);
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> ModelResult<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(|| missing("maxpool"))?;
        Ok(diffops::maxpool_backward(&cache, grad)?)
    }
}
