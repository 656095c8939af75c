//! End-to-end tagging network: a 1D residual front-end over the raw
//! waveform, a relabeling of its `C x 1 x T` output into a single-channel
//! `1 x C x T` map, a 2D residual back-end, and one attention head on each
//! of the last three back-end stages. The network output is the mean of
//! the three level predictions.

mod attention;
mod backend;
pub mod config;
mod frontend;
mod layers;
pub mod params;

use thiserror::Error;

use crate::diffops::{self, Mode, OpError, Scalar, Tensor};

use attention::AttentionHead;
use backend::BackEnd;
use frontend::FrontEnd;

pub use config::{
    scale_channels, AttentionHeadConfig, BackEndConfig, FrontEndConfig, ModelConfig, ShapePlan,
    BACKEND_STAGES,
};
pub use params::{BufferId, InitKind, ModelParams, NamedBuffer, ParamId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Op(#[from] OpError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid layer state: {0}")]
    State(String),
}

pub type ModelResult<T> = Result<T, ModelError>;

/// Per-level probabilities `[B, N]` and their mean.
#[derive(Debug, Clone)]
pub struct LevelPredictions<T: Scalar> {
    pub p2: Tensor<T>,
    pub p3: Tensor<T>,
    pub p4: Tensor<T>,
    pub fused: Tensor<T>,
}

impl<T: Scalar> LevelPredictions<T> {
    pub fn levels(&self) -> [&Tensor<T>; 3] {
        [&self.p2, &self.p3, &self.p4]
    }
}

/// Arithmetic mean of the three level predictions.
pub fn fuse<T: Scalar>(p2: &Tensor<T>, p3: &Tensor<T>, p4: &Tensor<T>) -> ModelResult<Tensor<T>> {
    let mut sum = diffops::add(p2, p3)?;
    sum.add_assign(p4)?;
    let third = T::from_f64_lossy(3.0);
    Ok(sum.map(|v| v / third))
}

pub struct Model<T: Scalar> {
    config: ModelConfig,
    plan: ShapePlan,
    frontend: FrontEnd<T>,
    backend: BackEnd<T>,
    heads: Vec<AttentionHead<T>>,
    params: ModelParams<T>,
}

impl<T: Scalar> Model<T> {
    /// Builds the network and initializes its parameters from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> ModelResult<Self> {
        let plan = config.plan()?;
        let mut params = ModelParams::default();
        let frontend = FrontEnd::new(&mut params, &config.frontend);
        let backend = BackEnd::new(&mut params, &config.backend);
        let heads = plan.stages[1..]
            .iter()
            .enumerate()
            .map(|(i, &(c, _, _))| {
                AttentionHead::new(
                    &mut params,
                    &format!("head{}", i + 2),
                    c,
                    config.attention.hidden,
                    config.n_classes,
                    config.attention.fusion_gain,
                )
            })
            .collect();
        params.init(seed);
        Ok(Self {
            config,
            plan,
            frontend,
            backend,
            heads,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn plan(&self) -> &ShapePlan {
        &self.plan
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<T> {
        &mut self.params
    }

    /// Re-draws every parameter from `seed` and resets running statistics.
    pub fn init_params(&mut self, seed: u64) {
        self.params.init(seed);
    }

    /// Front-end only: `[B, 1, clip_len] -> [B, C, 1, T]`.
    pub fn frontend_forward(&mut self, x: &Tensor<T>, mode: Mode) -> ModelResult<Tensor<T>> {
        self.check_input(x)?;
        let f = self.frontend.forward(&mut self.params, x, mode)?;
        let (c, t) = self.plan.frontend;
        expect_shape("front-end output", f.shape(), &[x.shape()[0], c, 1, t])?;
        Ok(f)
    }

    /// `[B, 1, clip_len]` waveforms to level and fused predictions.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> ModelResult<LevelPredictions<T>> {
        let b = x.shape().first().copied().unwrap_or(0);
        let f = self.frontend_forward(x, mode)?;
        let f = diffops::transpose_c1t_to_1ct(f)?;
        let maps = self.backend.forward(&mut self.params, &f, mode)?;
        let mut preds = Vec::with_capacity(3);
        for (i, (head, map)) in self.heads.iter_mut().zip(&maps).enumerate() {
            let (c, h, w) = self.plan.stages[i + 1];
            expect_shape(&format!("stage {} output", i + 2), map.shape(), &[b, c, h, w])?;
            let p = head.forward(&self.params, map, mode)?;
            expect_shape("level prediction", p.shape(), &[b, self.config.n_classes])?;
            preds.push(p);
        }
        let p4 = preds.pop().expect("three heads");
        let p3 = preds.pop().expect("three heads");
        let p2 = preds.pop().expect("three heads");
        let fused = fuse(&p2, &p3, &p4)?;
        Ok(LevelPredictions { p2, p3, p4, fused })
    }

    /// Accumulates parameter gradients given the loss gradients w.r.t. the
    /// three level predictions of the last train-mode forward.
    pub fn backward(&mut self, grads: [&Tensor<T>; 3]) -> ModelResult<()> {
        let mut stage_grads = Vec::with_capacity(3);
        for (head, g) in self.heads.iter_mut().zip(grads) {
            stage_grads.push(head.backward(&mut self.params, g)?);
        }
        let stage_grads: [Tensor<T>; 3] = stage_grads
            .try_into()
            .map_err(|_| ModelError::State("expected three head gradients".into()))?;
        let g = self.backend.backward(&mut self.params, stage_grads)?;
        let g = diffops::transpose_1ct_to_c1t(g)?;
        self.frontend.backward(&mut self.params, &g)
    }

    fn check_input(&self, x: &Tensor<T>) -> ModelResult<()> {
        if x.rank() != 3 || x.shape()[1] != 1 || x.shape()[2] != self.config.clip_len || x.shape()[0] == 0 {
            return Err(ModelError::Shape(format!(
                "model expects [B, 1, {}], got {:?}",
                self.config.clip_len,
                x.shape()
            )));
        }
        Ok(())
    }
}

fn expect_shape(what: &str, got: &[usize], want: &[usize]) -> ModelResult<()> {
    if got != want {
        return Err(ModelError::Shape(format!("{what}: expected {want:?}, got {got:?}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        let mut cfg = ModelConfig::desk(3);
        cfg.clip_len = 512;
        cfg.frontend.width_scale = 0.125;
        cfg.backend.width_scale = 1.0 / 64.0;
        cfg.attention.hidden = 8;
        cfg
    }

    fn noise(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn fused_is_the_mean_of_levels() {
        let mut m = Model::<f32>::new(tiny(), 1).unwrap();
        let p = m.forward(&noise(&[2, 1, 512], 2), Mode::Eval).unwrap();
        for i in 0..p.fused.len() {
            let mean = (p.p2.data()[i] + p.p3.data()[i] + p.p4.data()[i]) / 3.0;
            assert!((p.fused.data()[i] - mean).abs() <= 1e-6);
        }
        for t in p.levels() {
            assert!(t.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn desk_forward_yields_class_probabilities() {
        let mut m = Model::<f32>::new(ModelConfig::desk(5), 3).unwrap();
        let p = m.forward(&noise(&[2, 1, 16_000], 4), Mode::Eval).unwrap();
        assert_eq!(p.fused.shape(), &[2, 5]);
    }

    #[test]
    fn desk_frontend_shape() {
        let mut m = Model::<f32>::new(ModelConfig::desk(5), 3).unwrap();
        let f = m.frontend_forward(&Tensor::zeros(&[1, 1, 16_000]), Mode::Eval).unwrap();
        assert_eq!(f.shape(), &[1, 32, 1, 250]);
        assert!(f.is_finite());
    }

    #[test]
    fn train_and_eval_differ_but_are_finite() {
        let mut m = Model::<f32>::new(tiny(), 5).unwrap();
        let x = noise(&[2, 1, 512], 6);
        let a = m.forward(&x, Mode::Train).unwrap();
        m.init_params(5);
        let b = m.forward(&x, Mode::Eval).unwrap();
        assert!(a.fused.is_finite() && b.fused.is_finite());
        assert_ne!(a.fused.data(), b.fused.data());
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let a = Model::<f32>::new(tiny(), 11).unwrap();
        let b = Model::<f32>::new(tiny(), 11).unwrap();
        for (p, q) in a.params().params().iter().zip(b.params().params()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value.data(), q.value.data());
        }
        let c = Model::<f32>::new(tiny(), 12).unwrap();
        assert!(a.params().params().iter().zip(c.params().params()).any(|(p, q)| p.value.data() != q.value.data()));
    }

    #[test]
    fn gammas_start_at_one_and_names_are_unique() {
        let m = Model::<f32>::new(tiny(), 7).unwrap();
        let mut names = std::collections::HashSet::new();
        for p in m.params().params() {
            assert!(names.insert(p.name.clone()), "duplicate {}", p.name);
            if p.name.ends_with(".gamma") {
                assert!(p.value.data().iter().all(|&v| v == 1.0));
            }
        }
    }

    #[test]
    fn initial_predictions_are_not_saturated() {
        let mut m = Model::<f32>::new(ModelConfig::desk(10), 21).unwrap();
        let p = m.forward(&noise(&[2, 1, 16_000], 22), Mode::Train).unwrap();
        assert!(p.fused.data().iter().all(|&v| (0.02..=0.98).contains(&v)), "{:?}", p.fused.data());
    }

    #[test]
    fn wrong_clip_length_is_rejected() {
        let mut m = Model::<f32>::new(tiny(), 1).unwrap();
        assert!(matches!(m.forward(&Tensor::zeros(&[1, 1, 500]), Mode::Eval), Err(ModelError::Shape(_))));
    }

    #[test]
    fn backward_without_forward_is_a_state_error() {
        let mut m = Model::<f32>::new(tiny(), 1).unwrap();
        let g = Tensor::zeros(&[1, 3]);
        assert!(matches!(m.backward([&g, &g, &g]), Err(ModelError::State(_))));
    }

    #[test]
    #[ignore = "full-scale forward; slow on one core"]
    fn full_scale_frontend_is_128_by_2500() {
        let mut m = Model::<f32>::new(ModelConfig::default(), 0).unwrap();
        let f = m.frontend_forward(&Tensor::zeros(&[1, 1, 160_000]), Mode::Eval).unwrap();
        assert_eq!(f.shape(), &[1, 128, 1, 2500]);
    }
}
