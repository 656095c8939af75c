use crate::diffops::{self, Conv2dSpec, Mode, Pool2dSpec, Scalar, Tensor};

use super::config::BackEndConfig;
use super::layers::{BatchNorm, Conv2d, MaxPool, PoolKind, Relu};
use super::params::ModelParams;
use super::{ModelError, ModelResult};

/// 1x1 reduce, 3x3 (strided), 1x1 expand, each followed by BN; ReLU after
/// the inner two and after the residual sum.
pub(crate) struct Bottleneck<T: Scalar> {
    conv1: Conv2d<T>,
    bn1: BatchNorm<T>,
    relu1: Relu<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm<T>,
    relu2: Relu<T>,
    conv3: Conv2d<T>,
    bn3: BatchNorm<T>,
    shortcut: Option<(Conv2d<T>, BatchNorm<T>)>,
    out: Relu<T>,
}

impl<T: Scalar> Bottleneck<T> {
    fn new(store: &mut ModelParams<T>, name: &str, cin: usize, mid: usize, cout: usize, stride: usize) -> Self {
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(store, &format!("{name}.shortcut.conv"), cin, cout, 1, Conv2dSpec::square(stride, 0)),
                BatchNorm::new(store, &format!("{name}.shortcut.bn"), cout),
            )
        });
        Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, mid, 1, Conv2dSpec::square(1, 0)),
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), mid),
            relu1: Relu::new(),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), mid, mid, 3, Conv2dSpec::square(stride, 1)),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), mid),
            relu2: Relu::new(),
            conv3: Conv2d::new(store, &format!("{name}.conv3"), mid, cout, 1, Conv2dSpec::square(1, 0)),
            bn3: BatchNorm::new(store, &format!("{name}.bn3"), cout),
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
        let h = self.relu2.forward(&h, mode);
        let h = self.conv3.forward(store, &h, mode)?;
        let h = self.bn3.forward(store, &h, mode)?;
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
        let g = self.bn3.backward(store, &g_sum)?;
        let g = self.conv3.backward(store, &g)?;
        let g = self.relu2.backward(&g)?;
        let g = self.bn2.backward(store, &g)?;
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

/// 2D residual network over the `1 x C x T` frequency-like map. Returns the
/// outputs of stages 2, 3 and 4.
pub(crate) struct BackEnd<T: Scalar> {
    stem_conv: Conv2d<T>,
    stem_bn: BatchNorm<T>,
    stem_relu: Relu<T>,
    pool: MaxPool<T>,
    stages: Vec<Vec<Bottleneck<T>>>,
}

impl<T: Scalar> BackEnd<T> {
    pub fn new(store: &mut ModelParams<T>, cfg: &BackEndConfig) -> Self {
        let stem_w = cfg.stem_width();
        let stem_conv = Conv2d::new(
            store,
            "backend.stem.conv",
            1,
            stem_w,
            cfg.stem_kernel,
            Conv2dSpec::square(cfg.stem_stride, cfg.stem_pad()),
        );
        let stem_bn = BatchNorm::new(store, "backend.stem.bn", stem_w);
        let widths = cfg.stage_widths();
        let mids = cfg.bottleneck_widths();
        let mut cin = stem_w;
        let mut stages = Vec::new();
        for si in 0..widths.len() {
            let mut blocks = Vec::new();
            for bi in 0..cfg.blocks[si] {
                let stride = if bi == 0 { cfg.stage_strides[si] } else { 1 };
                let name = format!("backend.stage{}.block{}", si + 1, bi + 1);
                blocks.push(Bottleneck::new(store, &name, cin, mids[si], widths[si], stride));
                cin = widths[si];
            }
            stages.push(blocks);
        }
        Self {
            stem_conv,
            stem_bn,
            stem_relu: Relu::new(),
            pool: MaxPool::new(PoolKind::TwoD(Pool2dSpec::square(
                cfg.pool_kernel,
                cfg.pool_stride,
                cfg.pool_pad(),
            ))),
            stages,
        }
    }

    /// `[B, 1, C, T]` to the stage 2, 3, 4 feature maps.
    pub fn forward(
        &mut self,
        store: &mut ModelParams<T>,
        f: &Tensor<T>,
        mode: Mode,
    ) -> ModelResult<[Tensor<T>; 3]> {
        if f.rank() != 4 || f.shape()[1] != 1 {
            return Err(ModelError::Shape(format!(
                "back-end expects [B, 1, C, T], got {:?}",
                f.shape()
            )));
        }
        let h = self.stem_conv.forward(store, f, mode)?;
        let h = self.stem_bn.forward(store, &h, mode)?;
        let h = self.stem_relu.forward(&h, mode);
        let mut h = self.pool.forward(&h, mode)?;
        let mut taps = Vec::with_capacity(3);
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for block in stage.iter_mut() {
                h = block.forward(store, &h, mode)?;
            }
            if si >= 1 {
                taps.push(h.clone());
            }
        }
        let [s2, s3, s4]: [Tensor<T>; 3] = taps
            .try_into()
            .map_err(|_| ModelError::Shape("back-end must have four stages".into()))?;
        Ok([s2, s3, s4])
    }

    /// Gradients w.r.t. the three tapped stage outputs; returns the gradient
    /// w.r.t. the `[B, 1, C, T]` input.
    pub fn backward(&mut self, store: &mut ModelParams<T>, grads: [Tensor<T>; 3]) -> ModelResult<Tensor<T>> {
        let [g2, g3, g4] = grads;
        let mut pending = [None, Some(g2), Some(g3), Some(g4)];
        let mut g: Option<Tensor<T>> = None;
        for si in (0..self.stages.len()).rev() {
            if let Some(tap) = pending[si].take() {
                g = Some(match g {
                    Some(mut acc) => {
                        acc.add_assign(&tap)?;
                        acc
                    }
                    None => tap,
                });
            }
            let mut cur = g.take().ok_or_else(|| ModelError::State("no gradient reached back-end".into()))?;
            for block in self.stages[si].iter_mut().rev() {
                cur = block.backward(store, &cur)?;
            }
            g = Some(cur);
        }
        let g = g.expect("stage loop ran");
        let g = self.pool.backward(&g)?;
        let g = self.stem_relu.backward(&g)?;
        let g = self.stem_bn.backward(store, &g)?;
        self.stem_conv.backward(store, &g)
    }
}
