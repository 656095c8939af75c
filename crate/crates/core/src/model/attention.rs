use crate::diffops::{self, Mode, Scalar, Tensor};

use super::layers::{Linear, Relu};
use super::params::{InitKind, ModelParams};
use super::{ModelError, ModelResult};

struct ModuleCache<T: Scalar> {
    values: Tensor<T>,
    weights: Tensor<T>,
}

/// Attention pooling over time.
///
/// For frame embeddings `h_t` this computes per-frame class probabilities
/// `v_t = sigmoid(W_v h_t + b_v)` and per-class frame weights
/// `a_t = softmax_t(W_z h_t + b_z)`, and returns `sum_t a_t * v_t`.
pub(crate) struct AttentionModule<T: Scalar> {
    value: Linear<T>,
    weight: Linear<T>,
    cache: Option<ModuleCache<T>>,
}

impl<T: Scalar> AttentionModule<T> {
    pub fn new(store: &mut ModelParams<T>, name: &str, dim: usize, classes: usize) -> Self {
        Self {
            value: Linear::new(store, &format!("{name}.value"), dim, classes, InitKind::LecunUniform { fan_in: dim }),
            weight: Linear::new(store, &format!("{name}.weight"), dim, classes, InitKind::LecunUniform { fan_in: dim }),
            cache: None,
        }
    }

    /// `h [B, T, D] -> [B, N]`.
    pub fn forward(&mut self, store: &ModelParams<T>, h: &Tensor<T>, mode: Mode) -> ModelResult<Tensor<T>> {
        if h.rank() != 3 || h.shape()[1] == 0 {
            return Err(ModelError::Shape(format!(
                "attention expects [B, T >= 1, D], got {:?}",
                h.shape()
            )));
        }
        let (b, t, d) = (h.shape()[0], h.shape()[1], h.shape()[2]);
        let flat = h.clone().reshape(&[b * t, d])?;
        let v = diffops::sigmoid(&self.value.forward(store, &flat, mode)?);
        let n = v.shape()[1];
        let v = v.reshape(&[b, t, n])?;
        let z = self.weight.forward(store, &flat, mode)?.reshape(&[b, t, n])?;
        let a = diffops::softmax_over_time(&z, 1)?;
        let mut y = vec![T::zero(); b * n];
        for bi in 0..b {
            for ti in 0..t {
                let off = (bi * t + ti) * n;
                for ni in 0..n {
                    y[bi * n + ni] += a.data()[off + ni] * v.data()[off + ni];
                }
            }
        }
        self.cache = (mode == Mode::Train).then_some(ModuleCache { values: v, weights: a });
        Ok(Tensor::from_vec(&[b, n], y)?)
    }

    /// Gradient w.r.t. `h [B, T, D]`.
    pub fn backward(&mut self, store: &mut ModelParams<T>, grad: &Tensor<T>) -> ModelResult<Tensor<T>> {
        let ModuleCache { values, weights } = self
            .cache
            .take()
            .ok_or_else(|| ModelError::State("attention: backward without forward".into()))?;
        let (b, t, n) = (values.shape()[0], values.shape()[1], values.shape()[2]);
        let mut dv = Tensor::zeros(values.shape());
        let mut da = Tensor::zeros(values.shape());
        for bi in 0..b {
            for ti in 0..t {
                let off = (bi * t + ti) * n;
                for ni in 0..n {
                    let g = grad.data()[bi * n + ni];
                    dv.data_mut()[off + ni] = g * weights.data()[off + ni];
                    da.data_mut()[off + ni] = g * values.data()[off + ni];
                }
            }
        }
        let dz = diffops::softmax_over_time_backward(&weights, &da, 1)?.reshape(&[b * t, n])?;
        let dvl = diffops::sigmoid_backward(&values, &dv)?.reshape(&[b * t, n])?;
        let mut dh = self.weight.backward(store, &dz)?;
        dh.add_assign(&self.value.backward(store, &dvl)?)?;
        let d = dh.shape()[1];
        Ok(dh.reshape(&[b, t, d])?)
    }
}

struct HeadCache {
    map_shape: Vec<usize>,
    frames: usize,
    prob: Vec<usize>,
}

/// One level of the multi-level prediction: two attention modules (one on
/// the frame embeddings, one after two fully connected layers), their
/// outputs concatenated and mapped to class probabilities.
pub(crate) struct AttentionHead<T: Scalar> {
    direct: AttentionModule<T>,
    fc1: Linear<T>,
    relu1: Relu<T>,
    fc2: Linear<T>,
    relu2: Relu<T>,
    deep: AttentionModule<T>,
    out: Linear<T>,
    cache: Option<(HeadCache, Tensor<T>)>,
}

impl<T: Scalar> AttentionHead<T> {
    pub fn new(
        store: &mut ModelParams<T>,
        name: &str,
        channels: usize,
        hidden: usize,
        classes: usize,
        fusion_gain: f64,
    ) -> Self {
        let fan_in = 2 * classes;
        let (out_init, bias_init) = if fusion_gain == 0.0 {
            (InitKind::LecunUniform { fan_in }, InitKind::Zeros)
        } else {
            (InitKind::PairSum { fan_in, gain: fusion_gain }, InitKind::Constant(-fusion_gain))
        };
        Self {
            direct: AttentionModule::new(store, &format!("{name}.att1"), channels, classes),
            fc1: Linear::new(store, &format!("{name}.fc1"), channels, hidden, InitKind::HeUniform { fan_in: channels }),
            relu1: Relu::new(),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, hidden, InitKind::HeUniform { fan_in: hidden }),
            relu2: Relu::new(),
            deep: AttentionModule::new(store, &format!("{name}.att2"), hidden, classes),
            out: Linear::with_bias(store, &format!("{name}.out"), fan_in, classes, out_init, bias_init),
            cache: None,
        }
    }

    /// `[B, Cs, H, W] -> [B, N]` probabilities. Frames are the `W` columns,
    /// each embedded as its mean over `H`.
    pub fn forward(&mut self, store: &ModelParams<T>, map: &Tensor<T>, mode: Mode) -> ModelResult<Tensor<T>> {
        if map.rank() != 4 {
            return Err(ModelError::Shape(format!("head expects a 4D map, got {:?}", map.shape())));
        }
        let (b, c, w) = (map.shape()[0], map.shape()[1], map.shape()[3]);
        let pooled = diffops::mean_over_axis(map, 2)?;
        let frames = diffops::swap_last_axes(&pooled)?;
        let y1 = self.direct.forward(store, &frames, mode)?;

        let flat = frames.reshape(&[b * w, c])?;
        let g = self.fc1.forward(store, &flat, mode)?;
        let g = self.relu1.forward(&g, mode);
        let g = self.fc2.forward(store, &g, mode)?;
        let g = self.relu2.forward(&g, mode);
        let hidden = g.shape()[1];
        let y2 = self.deep.forward(store, &g.reshape(&[b, w, hidden])?, mode)?;

        let n = y1.shape()[1];
        let mut cat = Vec::with_capacity(b * 2 * n);
        for bi in 0..b {
            cat.extend_from_slice(y1.outer(bi));
            cat.extend_from_slice(y2.outer(bi));
        }
        let cat = Tensor::from_vec(&[b, 2 * n], cat)?;
        let p = diffops::sigmoid(&self.out.forward(store, &cat, mode)?);
        if mode == Mode::Train {
            self.cache = Some((
                HeadCache {
                    map_shape: map.shape().to_vec(),
                    frames: w,
                    prob: vec![b, n],
                },
                p.clone(),
            ));
        }
        Ok(p)
    }

    /// Gradient w.r.t. the stage map.
    pub fn backward(&mut self, store: &mut ModelParams<T>, grad: &Tensor<T>) -> ModelResult<Tensor<T>> {
        let (meta, p) = self
            .cache
            .take()
            .ok_or_else(|| ModelError::State("head: backward without forward".into()))?;
        let (b, n) = (meta.prob[0], meta.prob[1]);
        let dlogit = diffops::sigmoid_backward(&p, grad)?;
        let dcat = self.out.backward(store, &dlogit)?;
        let mut dy1 = Vec::with_capacity(b * n);
        let mut dy2 = Vec::with_capacity(b * n);
        for bi in 0..b {
            let row = dcat.outer(bi);
            dy1.extend_from_slice(&row[..n]);
            dy2.extend_from_slice(&row[n..]);
        }
        let dy1 = Tensor::from_vec(&[b, n], dy1)?;
        let dy2 = Tensor::from_vec(&[b, n], dy2)?;

        let dg = self.deep.backward(store, &dy2)?;
        let hidden = dg.shape()[2];
        let dg = dg.reshape(&[b * meta.frames, hidden])?;
        let dg = self.relu2.backward(&dg)?;
        let dg = self.fc2.backward(store, &dg)?;
        let dg = self.relu1.backward(&dg)?;
        let dflat = self.fc1.backward(store, &dg)?;

        let mut dframes = self.direct.backward(store, &dy1)?;
        let c = dframes.shape()[2];
        dframes.add_assign(&dflat.reshape(&[b, meta.frames, c])?)?;
        let dpooled = diffops::swap_last_axes(&dframes)?;
        Ok(diffops::mean_over_axis_backward(&meta.map_shape, &dpooled, 2)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn module(dim: usize, classes: usize, seed: u64) -> (AttentionModule<f64>, ModelParams<f64>) {
        let mut store = ModelParams::default();
        let m = AttentionModule::new(&mut store, "att", dim, classes);
        store.init(seed);
        // non-zero biases so the degenerate cases are not trivially symmetric
        for p in store.params_mut() {
            if p.name.ends_with("bias") {
                for (i, v) in p.value.data_mut().iter_mut().enumerate() {
                    *v = 0.1 * i as f64 - 0.05;
                }
            }
        }
        (m, store)
    }

    fn frames(b: usize, t: usize, d: usize) -> Tensor<f64> {
        let data: Vec<f64> = (0..b * t * d).map(|i| ((i * 31 % 17) as f64 - 8.0) / 5.0).collect();
        Tensor::from_f64(&[b, t, d], &data).unwrap()
    }

    fn values_of(m: &mut AttentionModule<f64>, store: &ModelParams<f64>, h: &Tensor<f64>) -> Tensor<f64> {
        let (b, t, d) = (h.shape()[0], h.shape()[1], h.shape()[2]);
        let flat = h.clone().reshape(&[b * t, d]).unwrap();
        diffops::sigmoid(&m.value.forward(store, &flat, Mode::Eval).unwrap())
    }

    #[test]
    fn single_frame_returns_its_value_branch() {
        let (mut m, store) = module(4, 3, 1);
        let h = frames(2, 1, 4);
        let y = m.forward(&store, &h, Mode::Eval).unwrap();
        let v = values_of(&mut m, &store, &h);
        assert_eq!(y.data(), v.data());
    }

    #[test]
    fn identical_frames_return_the_shared_value() {
        let (mut m, store) = module(4, 3, 2);
        let one = frames(1, 1, 4);
        let mut rep = Vec::new();
        for _ in 0..5 {
            rep.extend_from_slice(one.data());
        }
        let h = Tensor::from_vec(&[1, 5, 4], rep).unwrap();
        let y = m.forward(&store, &h, Mode::Eval).unwrap();
        let v = values_of(&mut m, &store, &one);
        for (a, b) in y.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn frame_order_does_not_matter() {
        let (mut m, store) = module(3, 2, 3);
        let h = frames(1, 4, 3);
        let perm = [2usize, 0, 3, 1];
        let mut shuffled = Vec::new();
        for &p in &perm {
            shuffled.extend_from_slice(&h.data()[p * 3..(p + 1) * 3]);
        }
        let hs = Tensor::from_vec(&[1, 4, 3], shuffled).unwrap();
        let y = m.forward(&store, &h, Mode::Eval).unwrap();
        let ys = m.forward(&store, &hs, Mode::Eval).unwrap();
        for (a, b) in y.data().iter().zip(ys.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn head_outputs_are_probabilities_even_for_one_column() {
        let mut store = ModelParams::<f64>::default();
        let mut head = AttentionHead::new(&mut store, "head", 6, 8, 3, 5.0);
        store.init(9);
        let data: Vec<f64> = (0..2 * 6 * 3).map(|i| (i as f64 * 0.37).cos()).collect();
        let map = Tensor::from_f64(&[2, 6, 3, 1], &data).unwrap();
        let p = head.forward(&store, &map, Mode::Eval).unwrap();
        assert_eq!(p.shape(), &[2, 3]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn head_ignores_the_order_of_time_columns() {
        let mut store = ModelParams::<f64>::default();
        let mut head = AttentionHead::new(&mut store, "head", 4, 8, 3, 10.0);
        store.init(5);
        let (c, h, w) = (4, 2, 5);
        let data: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.71).sin()).collect();
        let perm = [3usize, 0, 4, 2, 1];
        let mut shuffled = vec![0.0; data.len()];
        for row in 0..c * h {
            for (dst, &src) in perm.iter().enumerate() {
                shuffled[row * w + dst] = data[row * w + src];
            }
        }
        let a = head.forward(&store, &Tensor::from_f64(&[1, c, h, w], &data).unwrap(), Mode::Eval).unwrap();
        let b = head.forward(&store, &Tensor::from_f64(&[1, c, h, w], &shuffled).unwrap(), Mode::Eval).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
