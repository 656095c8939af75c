//! Central finite-difference checks of every differentiable op in 64-bit.
//!
//! Each op is wrapped as `f(inputs) -> output` plus its analytic backward;
//! the scalar objective is `sum(w * output)` for a fixed random `w`. The
//! error measure is the norm-wise relative error
//! `|g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wavetag::diffops::{self, Conv1dSpec, Conv2dSpec, Mode, Pool2dSpec, Tensor};
use wavetag::model::{Model, ModelConfig};

pub const STEP: f64 = 1e-5;
pub const TOL_SMOOTH: f64 = 1e-6;
pub const TOL_PIECEWISE: f64 = 1e-4;
pub const TOL_END_TO_END: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub rel_err: f64,
    pub tol: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.rel_err < self.tol
    }
}

pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, for ReLU inputs.
fn away_from_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = random(shape, r);
    for v in t.data_mut() {
        *v = v.signum() * (0.05 + v.abs());
    }
    t
}

/// A shuffled grid with spacing 0.01, so no two entries tie within `STEP`.
fn distinct(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    for i in (1..n).rev() {
        v.swap(i, r.random_range(0..=i));
    }
    Tensor::from_vec(shape, v).unwrap()
}

/// Checks gradients w.r.t. each of `inputs`. `forward` maps inputs to the
/// op output; `backward` maps inputs and upstream gradient to one gradient
/// per input.
pub fn check<F, B>(name: &str, tol: f64, inputs: Vec<Tensor<f64>>, seed: u64, forward: F, backward: B) -> Check
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
    B: Fn(&[Tensor<f64>], &Tensor<f64>) -> Vec<Tensor<f64>>,
{
    let out = forward(&inputs);
    let w = random(out.shape(), &mut rng(seed ^ 0xABCD));
    let objective = |xs: &[Tensor<f64>]| -> f64 {
        forward(xs).data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };
    let analytic = backward(&inputs, &w);
    assert_eq!(analytic.len(), inputs.len(), "{name}: one gradient per input");
    let mut a_all = Vec::new();
    let mut n_all = Vec::new();
    for (k, g) in analytic.iter().enumerate() {
        assert_eq!(g.shape(), inputs[k].shape(), "{name}: gradient {k} shape");
        for i in 0..inputs[k].len() {
            let mut xs = inputs.clone();
            xs[k].data_mut()[i] += STEP;
            let up = objective(&xs);
            xs[k].data_mut()[i] -= 2.0 * STEP;
            let down = objective(&xs);
            n_all.push((up - down) / (2.0 * STEP));
            a_all.push(g.data()[i]);
        }
    }
    Check {
        name: name.to_string(),
        rel_err: rel_err(&a_all, &n_all),
        tol,
    }
}

pub fn op_checks() -> Vec<Check> {
    let mut r = rng(42);
    let mut out = Vec::new();

    out.push(check(
        "linear",
        TOL_SMOOTH,
        vec![random(&[3, 5], &mut r), random(&[4, 5], &mut r), random(&[4], &mut r)],
        1,
        |x| diffops::linear(&x[0], &x[1], &x[2]).unwrap(),
        |x, g| {
            let d = diffops::linear_backward(&x[0], &x[1], g).unwrap();
            vec![d.input, d.weight, d.bias]
        },
    ));

    for (stride, pad) in [(1, 0), (2, 3), (3, 1)] {
        let spec = Conv1dSpec { stride, pad };
        out.push(check(
            &format!("conv1d stride {stride} pad {pad}"),
            TOL_SMOOTH,
            vec![random(&[2, 3, 11], &mut r), random(&[4, 3, 3], &mut r), random(&[4], &mut r)],
            2,
            move |x| diffops::conv1d(&x[0], &x[1], Some(&x[2]), spec).unwrap(),
            move |x, g| {
                let d = diffops::conv1d_backward(&x[0], &x[1], g, spec).unwrap();
                vec![d.input, d.weight, d.bias]
            },
        ));
    }

    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1)] {
        let spec = Conv2dSpec::square(stride, pad);
        out.push(check(
            &format!("conv2d {k}x{k} stride {stride} pad {pad}"),
            TOL_SMOOTH,
            vec![random(&[2, 3, 5, 6], &mut r), random(&[2, 3, k, k], &mut r), random(&[2], &mut r)],
            3,
            move |x| diffops::conv2d(&x[0], &x[1], Some(&x[2]), spec).unwrap(),
            move |x, g| {
                let d = diffops::conv2d_backward(&x[0], &x[1], g, spec).unwrap();
                vec![d.input, d.weight, d.bias]
            },
        ));
    }

    for (mode, shape) in [
        (Mode::Train, vec![3, 2, 4]),
        (Mode::Train, vec![2, 3, 2, 3]),
        (Mode::Eval, vec![2, 3, 2, 3]),
    ] {
        let c = shape[1];
        let rm = random(&[c], &mut r);
        let rv = random(&[c], &mut r).map(|v| 0.5 + v.abs());
        let bn = move |x: &[Tensor<f64>]| {
            let (mut m, mut v) = (rm.clone(), rv.clone());
            diffops::batchnorm(&x[0], &x[1], &x[2], &mut m, &mut v, mode, diffops::BN_MOMENTUM, diffops::BN_EPS)
                .unwrap()
        };
        let bn2 = bn.clone();
        out.push(check(
            &format!("batchnorm {mode:?} {shape:?}"),
            TOL_SMOOTH,
            vec![random(&shape, &mut r), random(&[c], &mut r), random(&[c], &mut r)],
            4,
            move |x| bn(x).0,
            move |x, g| {
                let (_, cache) = bn2(x);
                let d = diffops::batchnorm_backward(g, &x[1], &cache).unwrap();
                vec![d.input, d.gamma, d.beta]
            },
        ));
    }

    out.push(check(
        "relu",
        TOL_PIECEWISE,
        vec![away_from_zero(&[4, 7], &mut r)],
        5,
        |x| diffops::relu(&x[0]),
        |x, g| vec![diffops::relu_backward(&x[0], g).unwrap()],
    ));

    out.push(check(
        "sigmoid",
        TOL_SMOOTH,
        vec![random(&[4, 7], &mut r).map(|v| 3.0 * v)],
        6,
        |x| diffops::sigmoid(&x[0]),
        |x, g| vec![diffops::sigmoid_backward(&diffops::sigmoid(&x[0]), g).unwrap()],
    ));

    for axis in [0, 1, 2] {
        out.push(check(
            &format!("softmax axis {axis}"),
            TOL_SMOOTH,
            vec![random(&[2, 5, 3], &mut r).map(|v| 2.0 * v)],
            7,
            move |x| diffops::softmax_over_time(&x[0], axis).unwrap(),
            move |x, g| {
                let y = diffops::softmax_over_time(&x[0], axis).unwrap();
                vec![diffops::softmax_over_time_backward(&y, g, axis).unwrap()]
            },
        ));
    }

    out.push(check(
        "maxpool1d k3 s2 p1",
        TOL_PIECEWISE,
        vec![distinct(&[2, 3, 12], &mut r)],
        8,
        |x| diffops::maxpool1d(&x[0], 3, 2, 1).unwrap().output,
        |x, g| vec![diffops::maxpool_backward(&diffops::maxpool1d(&x[0], 3, 2, 1).unwrap(), g).unwrap()],
    ));

    let pool = Pool2dSpec::square(3, 2, 1);
    out.push(check(
        "maxpool2d k3 s2 p1",
        TOL_PIECEWISE,
        vec![distinct(&[2, 2, 7, 6], &mut r)],
        9,
        move |x| diffops::maxpool2d(&x[0], pool).unwrap().output,
        move |x, g| vec![diffops::maxpool_backward(&diffops::maxpool2d(&x[0], pool).unwrap(), g).unwrap()],
    ));

    out.push(check(
        "add",
        TOL_SMOOTH,
        vec![random(&[3, 4], &mut r), random(&[3, 4], &mut r)],
        10,
        |x| diffops::add(&x[0], &x[1]).unwrap(),
        |_, g| vec![g.clone(), g.clone()],
    ));

    for axis in [1, 2] {
        let shape = [2, 3, 4, 5];
        out.push(check(
            &format!("mean over axis {axis}"),
            TOL_SMOOTH,
            vec![random(&shape, &mut r)],
            11,
            move |x| diffops::mean_over_axis(&x[0], axis).unwrap(),
            move |_, g| vec![diffops::mean_over_axis_backward(&shape, g, axis).unwrap()],
        ));
    }

    out.push(check(
        "swap last axes",
        TOL_SMOOTH,
        vec![random(&[2, 3, 4], &mut r)],
        12,
        |x| diffops::swap_last_axes(&x[0]).unwrap(),
        |_, g| vec![diffops::swap_last_axes(g).unwrap()],
    ));

    out.push(check(
        "transpose C1T to 1CT",
        TOL_SMOOTH,
        vec![random(&[2, 3, 1, 5], &mut r)],
        13,
        |x| diffops::transpose_c1t_to_1ct(x[0].clone()).unwrap(),
        |_, g| vec![diffops::transpose_1ct_to_c1t(g.clone()).unwrap()],
    ));

    let y = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 1.0, 0.0, 0.5, 1.0]).unwrap();
    let y2 = y.clone();
    out.push(check(
        "binary cross entropy",
        TOL_SMOOTH,
        vec![random(&[2, 3], &mut r).map(|v| 0.5 + 0.4 * v)],
        14,
        move |x| Tensor::from_vec(&[1], vec![diffops::bce_from_probability(&x[0], &y).unwrap()]).unwrap(),
        move |x, g| vec![diffops::bce_from_probability_backward(&x[0], &y2).unwrap().map(|v| v * g.data()[0])],
    ));

    out
}

/// Smallest model the configuration allows: 512-sample clips, 3 classes.
pub fn tiny_config() -> ModelConfig {
    let mut cfg = ModelConfig::desk(3);
    cfg.clip_len = 512;
    cfg.frontend.width_scale = 0.125;
    cfg.backend.width_scale = 1.0 / 64.0;
    cfg.attention.hidden = 8;
    cfg
}

fn level_loss(model: &mut Model<f64>, x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
    let p = model.forward(x, Mode::Train).unwrap();
    p.levels().iter().map(|l| diffops::bce_from_probability(l, y).unwrap()).sum::<f64>() / 3.0
}

/// End-to-end check of the mean multi-level loss of a tiny model at batch
/// 2 against finite differences on `n_params` randomly chosen scalars.
pub fn end_to_end_check(n_params: usize, seed: u64) -> Check {
    let mut model = Model::<f64>::new(tiny_config(), seed).unwrap();
    let mut r = rng(seed);
    let x = random(&[2, 1, 512], &mut r);
    let y = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();

    model.params_mut().zero_grad();
    let p = model.forward(&x, Mode::Train).unwrap();
    let grads: Vec<Tensor<f64>> = p
        .levels()
        .iter()
        .map(|l| diffops::bce_from_probability_backward(l, &y).unwrap().map(|v| v / 3.0))
        .collect();
    model.backward([&grads[0], &grads[1], &grads[2]]).unwrap();

    let n_tensors = model.params().params().len();
    let picks: Vec<(usize, usize)> = (0..n_params)
        .map(|_| {
            let t = r.random_range(0..n_tensors);
            (t, r.random_range(0..model.params().params()[t].value.len()))
        })
        .collect();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for &(t, i) in &picks {
        analytic.push(model.params().params()[t].grad.data()[i]);
        let orig = model.params().params()[t].value.data()[i];
        model.params_mut().params_mut()[t].value.data_mut()[i] = orig + STEP;
        let up = level_loss(&mut model, &x, &y);
        model.params_mut().params_mut()[t].value.data_mut()[i] = orig - STEP;
        let down = level_loss(&mut model, &x, &y);
        model.params_mut().params_mut()[t].value.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * STEP));
    }
    Check {
        name: format!("end-to-end tiny model ({n_params} parameters)"),
        rel_err: rel_err(&analytic, &numeric),
        tol: TOL_END_TO_END,
    }
}
