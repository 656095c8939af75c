use crate::diffops::{self, Conv1dSpec, Mode, Scalar, Tensor};

use super::config::FrontEndConfig;
use super::layers::{BatchNorm, Conv1d, MaxPool, PoolKind, Relu};
use super::params::ModelParams;
use super::{ModelError, ModelResult};

/// conv3-BN-ReLU-conv3-BN plus shortcut, ReLU after the sum.
pub(crate) struct BasicBlock1d<T: Scalar> {
    conv1: Conv1d<T>,
    bn1: BatchNorm<T>,
    relu1: Relu<T>,
    conv2: Conv1d<T>,
    bn2: BatchNorm<T>,
    /// Strided 1x1 projection when the width or length changes.
    shortcut: Option<(Conv1d<T>, BatchNorm<T>)>,
    out: Relu<T>,
}

impl<T: Scalar> BasicBlock1d<T> {
    fn new(store: &mut ModelParams<T>, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (
                Conv1d::new(store, &format!("{name}.shortcut.conv"), cin, cout, 1, Conv1dSpec { stride, pad: 0 }),
                BatchNorm::new(store, &format!("{name}.shortcut.bn"), cout),
            )
        });
        Self {
            conv1: Conv1d::new(store, &format!("{name}.conv1"), cin, cout, 3, Conv1dSpec { stride, pad: 1 }),
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), cout),
            relu1: Relu::new(),
            conv2: Conv1d::new(store, &format!("{name}.conv2"), cout, cout, 3, Conv1dSpec { stride: 1, pad: 1 }),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), cout),
            shortcut,
            out: Relu::new(),
        }
    }

    fn forward(&mut self, store: &mut ModelParams<T>, x: &Tensor<T>, mode: Mode) -> ModelResult<Tensor<T>> {
        let h = self.conv1.forward(store, x, mode)?;
        let h = self.bn1.forward(store, &h, mode)?;
        let h = self.relu1.forward(&h, mode);
        let h = self.conv2.forward(store, &h, mode)?;
        let h = self.bn2.forward(store, &h, mode)?;
        let skip = match &mut self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(store, x, mode)?;
                bn.forward(store, &s, mode)?
            }
            None => x.clone(),
        };
        let sum = diffops::add(&h, &skip)?;
        Ok(self.out.forward(&sum, mode))
    }

    fn backward(&mut self, store: &mut ModelParams<T>, grad: &Tensor<T>) -> ModelResult<Tensor<T>> {
        let g_sum = self.out.backward(grad)?;
        let g = self.bn2.backward(store, &g_sum)?;
        let g = self.conv2.backward(store, &g)?;
        let g = self.relu1.backward(&g)?;
        let g = self.bn1.backward(store, &g)?;
        let mut g_in = self.conv1.backward(store, &g)?;
        let g_skip = match &mut self.shortcut {
            Some((conv, bn)) => {
                let g = bn.backward(store, &g_sum)?;
                conv.backward(store, &g)?
            }
            None => g_sum,
        };
        g_in.add_assign(&g_skip)?;
        Ok(g_in)
    }
}

/// 1D residual network mapping `[B, 1, clip_len]` to `[B, C, 1, T]`.
pub(crate) struct FrontEnd<T: Scalar> {
    stem_conv: Conv1d<T>,
    stem_bn: BatchNorm<T>,
    stem_relu: Relu<T>,
    pool: MaxPool<T>,
    blocks: Vec<BasicBlock1d<T>>,
}

impl<T: Scalar> FrontEnd<T> {
    pub fn new(store: &mut ModelParams<T>, cfg: &FrontEndConfig) -> Self {
        let stem_w = cfg.stem_width();
        let stem_conv = Conv1d::new(
            store,
            "frontend.stem.conv",
            1,
            stem_w,
            cfg.stem_kernel,
            Conv1dSpec {
                stride: cfg.stem_stride,
                pad: cfg.stem_pad(),
            },
        );
        let stem_bn = BatchNorm::new(store, "frontend.stem.bn", stem_w);
        let mut blocks = Vec::new();
        let mut cin = stem_w;
        for (si, (&cout, &stride)) in cfg.stage_widths().iter().zip(&cfg.stage_strides).enumerate() {
            for bi in 0..cfg.blocks_per_stage {
                let s = if bi == 0 { stride } else { 1 };
                let name = format!("frontend.stage{}.block{}", si + 1, bi + 1);
                blocks.push(BasicBlock1d::new(store, &name, cin, cout, s));
                cin = cout;
            }
        }
        Self {
            stem_conv,
            stem_bn,
            stem_relu: Relu::new(),
            pool: MaxPool::new(PoolKind::OneD {
                kernel: cfg.pool_kernel,
                stride: cfg.pool_stride,
            }),
            blocks,
        }
    }

    pub fn forward(&mut self, store: &mut ModelParams<T>, x: &Tensor<T>, mode: Mode) -> ModelResult<Tensor<T>> {
        if x.rank() != 3 || x.shape()[1] != 1 {
            return Err(ModelError::Shape(format!(
                "front-end expects [B, 1, samples], got {:?}",
                x.shape()
            )));
        }
        let h = self.stem_conv.forward(store, x, mode)?;
        let h = self.stem_bn.forward(store, &h, mode)?;
        let h = self.stem_relu.forward(&h, mode);
        let mut h = self.pool.forward(&h, mode)?;
        for block in &mut self.blocks {
            h = block.forward(store, &h, mode)?;
        }
        let s = h.shape().to_vec();
        Ok(h.reshape(&[s[0], s[1], 1, s[2]])?)
    }

    /// Takes the gradient w.r.t. the `[B, C, 1, T]` output.
    pub fn backward(&mut self, store: &mut ModelParams<T>, grad: &Tensor<T>) -> ModelResult<()> {
        let s = grad.shape().to_vec();
        let mut g = grad.clone().reshape(&[s[0], s[1], s[3]])?;
        for block in self.blocks.iter_mut().rev() {
            g = block.backward(store, &g)?;
        }
        let g = self.pool.backward(&g)?;
        let g = self.stem_relu.backward(&g)?;
        let g = self.stem_bn.backward(store, &g)?;
        // The waveform itself is not trainable; its gradient is dropped.
        self.stem_conv.backward(store, &g)?;
        Ok(())
    }
}
