use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffops::{ParamTensor, Scalar, Tensor};

/// Index of a trainable tensor in [`ModelParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Index of a non-trainable tensor (batch-norm running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferId(usize);

/// How a parameter is filled by [`ModelParams::init`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitKind {
    /// `U(-b, b)` with `b = sqrt(6 / fan_in)`, for layers followed by ReLU.
    HeUniform { fan_in: usize },
    /// `U(-b, b)` with `b = sqrt(3 / fan_in)`, unit-gain fan-in scaling for
    /// layers feeding a sigmoid or softmax.
    LecunUniform { fan_in: usize },
    /// Lecun-uniform noise on an `[N, 2N]` weight plus `gain` at `(n, n)`
    /// and `(n, N + n)`, so each output starts as the scaled sum of its two
    /// matching inputs.
    PairSum { fan_in: usize, gain: f64 },
    Constant(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct NamedBuffer<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
}

/// All named tensors of a model: trainable parameters with gradients, and
/// buffers. Order is construction order and is stable.
#[derive(Debug, Clone)]
pub struct ModelParams<T: Scalar> {
    params: Vec<ParamTensor<T>>,
    inits: Vec<InitKind>,
    buffers: Vec<NamedBuffer<T>>,
}

impl<T: Scalar> Default for ModelParams<T> {
    fn default() -> Self {
        Self {
            params: Vec::new(),
            inits: Vec::new(),
            buffers: Vec::new(),
        }
    }
}

impl<T: Scalar> ModelParams<T> {
    pub fn add_param(&mut self, name: impl Into<String>, shape: &[usize], init: InitKind) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter {name}"
        );
        let mut value = Tensor::zeros(shape);
        if init == InitKind::Ones {
            value.fill(T::one());
        }
        self.params.push(ParamTensor::new(name, value));
        self.inits.push(init);
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        self.buffers.push(NamedBuffer {
            name: name.into(),
            value,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].value
    }

    /// Adds `grad` into the accumulated gradient of `id`.
    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor<T>) {
        self.params[id.0]
            .grad
            .add_assign(grad)
            .expect("gradient shape matches its parameter");
    }

    /// Gamma and beta values alongside mutable running mean and variance.
    pub fn split_for_norm(
        &mut self,
        gamma: ParamId,
        beta: ParamId,
        mean: BufferId,
        var: BufferId,
    ) -> (&Tensor<T>, &Tensor<T>, &mut Tensor<T>, &mut Tensor<T>) {
        assert_ne!(mean.0, var.0);
        let params = &self.params;
        let (lo, hi) = if mean.0 < var.0 { (mean.0, var.0) } else { (var.0, mean.0) };
        let (left, right) = self.buffers.split_at_mut(hi);
        let (a, b) = (&mut left[lo].value, &mut right[0].value);
        let (m, v) = if mean.0 < var.0 { (a, b) } else { (b, a) };
        (&params[gamma.0].value, &params[beta.0].value, m, v)
    }

    pub fn params(&self) -> &[ParamTensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamTensor<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[NamedBuffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [NamedBuffer<T>] {
        &mut self.buffers
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.zero_grad());
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Fills every parameter according to its [`InitKind`] from one seeded
    /// stream, in construction order. Running statistics are reset to
    /// mean 0, variance 1.
    pub fn init(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (p, kind) in self.params.iter_mut().zip(&self.inits) {
            let bound = match *kind {
                InitKind::HeUniform { fan_in } => (6.0 / fan_in.max(1) as f64).sqrt(),
                InitKind::LecunUniform { fan_in } | InitKind::PairSum { fan_in, .. } => (3.0 / fan_in.max(1) as f64).sqrt(),
                InitKind::Constant(c) => {
                    p.value.fill(T::from_f64_lossy(c));
                    continue;
                }
                InitKind::Zeros => {
                    p.value.fill(T::zero());
                    continue;
                }
                InitKind::Ones => {
                    p.value.fill(T::one());
                    continue;
                }
            };
            for v in p.value.data_mut() {
                *v = T::from_f64_lossy(rng.random_range(-bound..bound));
            }
            if let InitKind::PairSum { gain, .. } = *kind {
                let (rows, cols) = (p.value.shape()[0], p.value.shape()[1]);
                debug_assert_eq!(cols, 2 * rows);
                let g = T::from_f64_lossy(gain);
                let w = p.value.data_mut();
                for n in 0..rows {
                    w[n * cols + n] += g;
                    w[n * cols + rows + n] += g;
                }
            }
        }
        for b in &mut self.buffers {
            let fill = if b.name.ends_with("running_var") {
                T::one()
            } else {
                T::zero()
            };
            b.value.fill(fill);
        }
        self.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_sum_adds_gain_on_both_diagonals() {
        let mut store = ModelParams::<f64>::default();
        let w = store.add_param("w", &[3, 6], InitKind::PairSum { fan_in: 6, gain: 5.0 });
        let b = store.add_param("b", &[3], InitKind::Constant(-5.0));
        store.init(9);
        let bound = 0.5_f64.sqrt();
        let v = store.value(w).data();
        for r in 0..3 {
            for c in 0..6 {
                let x = v[r * 6 + c];
                if c == r || c == r + 3 {
                    assert!((x - 5.0).abs() < bound);
                } else {
                    assert!(x.abs() < bound);
                }
            }
        }
        assert!(store.value(b).data().iter().all(|&x| x == -5.0));
    }
}
