use serde::{Deserialize, Serialize};

use super::{ModelError, ModelResult};
use crate::diffops::OpResult;

/// Channel count after applying a width multiplier: rounded, never below 4.
pub fn scale_channels(base: usize, width_scale: f64) -> usize {
    ((base as f64 * width_scale).round() as usize).max(4)
}

fn out_len(len: usize, k: usize, stride: usize, pad: usize) -> OpResult<usize> {
    crate::diffops::conv_out_len(len, k, stride, pad)
}

/// 1D residual front-end over raw samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontEndConfig {
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_channels: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub blocks_per_stage: usize,
    pub width_scale: f64,
}

impl Default for FrontEndConfig {
    fn default() -> Self {
        Self {
            stem_kernel: 80,
            stem_stride: 4,
            stem_channels: 32,
            pool_kernel: 4,
            pool_stride: 4,
            stage_channels: vec![32, 64, 128, 128],
            stage_strides: vec![1, 2, 2, 1],
            blocks_per_stage: 2,
            width_scale: 1.0,
        }
    }
}

impl FrontEndConfig {
    /// Padding of the stem convolution chosen so that its output length is
    /// exactly `len / stem_stride`.
    pub fn stem_pad(&self) -> usize {
        self.stem_kernel.saturating_sub(self.stem_stride).div_ceil(2)
    }

    pub fn cumulative_stride(&self) -> usize {
        self.stem_stride * self.pool_stride * self.stage_strides.iter().product::<usize>()
    }

    pub fn stem_width(&self) -> usize {
        scale_channels(self.stem_channels, self.width_scale)
    }

    pub fn stage_widths(&self) -> Vec<usize> {
        self.stage_channels
            .iter()
            .map(|&c| scale_channels(c, self.width_scale))
            .collect()
    }

    /// Channel count `C` of the `C x 1 x T` output.
    pub fn out_channels(&self) -> usize {
        self.stage_widths().last().copied().unwrap_or_else(|| self.stem_width())
    }

    /// Output `(C, T)` for a clip of `clip_len` samples.
    pub fn output_shape(&self, clip_len: usize) -> ModelResult<(usize, usize)> {
        self.validate(clip_len)?;
        Ok((self.out_channels(), clip_len / self.cumulative_stride()))
    }

    pub fn validate(&self, clip_len: usize) -> ModelResult<()> {
        let bad = |msg: String| Err(ModelError::Config(format!("front-end: {msg}")));
        if self.stage_channels.len() != self.stage_strides.len() {
            return bad("stage_channels and stage_strides differ in length".into());
        }
        if self.stem_stride == 0 || self.pool_stride == 0 || self.stage_strides.contains(&0) {
            return bad("strides must be at least 1".into());
        }
        if self.blocks_per_stage == 0 {
            return bad("blocks_per_stage must be at least 1".into());
        }
        if !(self.width_scale > 0.0) {
            return bad("width_scale must be positive".into());
        }
        let total = self.cumulative_stride();
        if clip_len == 0 || !clip_len.is_multiple_of(total) {
            return bad(format!(
                "clip_len {clip_len} is not divisible by the cumulative stride {total}"
            ));
        }
        // Walk the layers and confirm every one divides exactly.
        let mut len = clip_len;
        let stem = out_len(len, self.stem_kernel, self.stem_stride, self.stem_pad())
            .map_err(|e| ModelError::Config(e.to_string()))?;
        if stem * self.stem_stride != len {
            return bad(format!(
                "stem kernel {} / stride {} does not divide length {len} exactly",
                self.stem_kernel, self.stem_stride
            ));
        }
        len = stem;
        let pooled = out_len(len, self.pool_kernel, self.pool_stride, 0)
            .map_err(|e| ModelError::Config(e.to_string()))?;
        if pooled * self.pool_stride != len {
            return bad(format!(
                "pool kernel {} / stride {} does not divide length {len} exactly",
                self.pool_kernel, self.pool_stride
            ));
        }
        len = pooled;
        for &s in &self.stage_strides {
            let next = out_len(len, 3, s, 1).map_err(|e| ModelError::Config(e.to_string()))?;
            if next * s != len {
                return bad(format!("stage stride {s} does not divide length {len}"));
            }
            len = next;
        }
        Ok(())
    }
}

/// 2D bottleneck residual back-end with prediction taps after stages 2, 3, 4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackEndConfig {
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_channels: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub blocks: Vec<usize>,
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    /// Output channels divided by bottleneck (inner) channels.
    pub expansion: usize,
    pub width_scale: f64,
}

impl Default for BackEndConfig {
    fn default() -> Self {
        Self {
            stem_kernel: 7,
            stem_stride: 2,
            stem_channels: 64,
            pool_kernel: 3,
            pool_stride: 2,
            blocks: vec![3, 4, 6, 3],
            stage_channels: vec![256, 512, 1024, 2048],
            stage_strides: vec![1, 2, 2, 2],
            expansion: 4,
            width_scale: 1.0,
        }
    }
}

/// Number of back-end stages; prediction heads tap the last three.
pub const BACKEND_STAGES: usize = 4;

impl BackEndConfig {
    pub fn stem_pad(&self) -> usize {
        self.stem_kernel / 2
    }

    pub fn pool_pad(&self) -> usize {
        self.pool_kernel / 2
    }

    pub fn stem_width(&self) -> usize {
        scale_channels(self.stem_channels, self.width_scale)
    }

    pub fn stage_widths(&self) -> Vec<usize> {
        self.stage_channels
            .iter()
            .map(|&c| scale_channels(c, self.width_scale))
            .collect()
    }

    /// Inner widths of the bottleneck blocks in each stage.
    pub fn bottleneck_widths(&self) -> Vec<usize> {
        self.stage_channels
            .iter()
            .map(|&c| scale_channels(c / self.expansion.max(1), self.width_scale))
            .collect()
    }

    pub fn validate(&self) -> ModelResult<()> {
        let bad = |msg: &str| Err(ModelError::Config(format!("back-end: {msg}")));
        if self.blocks.len() != BACKEND_STAGES
            || self.stage_channels.len() != BACKEND_STAGES
            || self.stage_strides.len() != BACKEND_STAGES
        {
            return bad("exactly four stages are required (heads tap stages 2, 3 and 4)");
        }
        if self.blocks.contains(&0) {
            return bad("every stage needs at least one block");
        }
        if self.stem_stride == 0 || self.pool_stride == 0 || self.stage_strides.contains(&0) {
            return bad("strides must be at least 1");
        }
        if self.expansion == 0 {
            return bad("expansion must be at least 1");
        }
        if !(self.width_scale > 0.0) {
            return bad("width_scale must be positive");
        }
        Ok(())
    }

    /// `(channels, height, width)` of every stage output for a `1 x h x w` input.
    pub fn stage_shapes(&self, h: usize, w: usize) -> ModelResult<Vec<(usize, usize, usize)>> {
        self.validate()?;
        let e = |e: crate::diffops::OpError| ModelError::Config(format!("back-end: {e}"));
        let mut h = out_len(h, self.stem_kernel, self.stem_stride, self.stem_pad()).map_err(e)?;
        let mut w = out_len(w, self.stem_kernel, self.stem_stride, self.stem_pad()).map_err(e)?;
        h = out_len(h, self.pool_kernel, self.pool_stride, self.pool_pad()).map_err(e)?;
        w = out_len(w, self.pool_kernel, self.pool_stride, self.pool_pad()).map_err(e)?;
        let widths = self.stage_widths();
        let mut shapes = Vec::with_capacity(BACKEND_STAGES);
        for (i, &s) in self.stage_strides.iter().enumerate() {
            h = out_len(h, 3, s, 1).map_err(e)?;
            w = out_len(w, 3, s, 1).map_err(e)?;
            shapes.push((widths[i], h, w));
        }
        Ok(shapes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionHeadConfig {
    /// Width of both fully connected layers in the second attention branch.
    pub hidden: usize,
    /// Initial weight `g` linking each level output to its two matching
    /// attention outputs, with bias `-g`: the output logit starts as
    /// `g * (y1 + y2 - 1)`. Zero selects a plain fan-in scaled init.
    pub fusion_gain: f64,
}

impl Default for AttentionHeadConfig {
    fn default() -> Self {
        Self {
            hidden: 600,
            fusion_gain: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub clip_len: usize,
    pub n_classes: usize,
    pub frontend: FrontEndConfig,
    pub backend: BackEndConfig,
    pub attention: AttentionHeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            clip_len: 160_000,
            n_classes: 527,
            frontend: FrontEndConfig::default(),
            backend: BackEndConfig::default(),
            attention: AttentionHeadConfig::default(),
        }
    }
}

/// Shapes every forward pass must reproduce, per batch element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapePlan {
    /// `(C, T)` of the front-end output `C x 1 x T`.
    pub frontend: (usize, usize),
    /// `(channels, height, width)` of back-end stages 1..=4.
    pub stages: Vec<(usize, usize, usize)>,
}

impl ModelConfig {
    /// Desk-scale configuration used by the toy experiments: quarter-width
    /// front-end on one-second clips, narrow single-block back-end and
    /// small attention heads.
    pub fn desk(n_classes: usize) -> Self {
        Self {
            clip_len: 16_000,
            n_classes,
            frontend: FrontEndConfig {
                width_scale: 0.25,
                ..FrontEndConfig::default()
            },
            backend: BackEndConfig {
                blocks: vec![1, 1, 1, 1],
                width_scale: 0.125,
                ..BackEndConfig::default()
            },
            attention: AttentionHeadConfig {
                hidden: 64,
                ..AttentionHeadConfig::default()
            },
        }
    }

    pub fn validate(&self) -> ModelResult<()> {
        if self.n_classes == 0 {
            return Err(ModelError::Config("n_classes must be positive".into()));
        }
        if self.attention.hidden == 0 {
            return Err(ModelError::Config("attention hidden units must be positive".into()));
        }
        if !self.attention.fusion_gain.is_finite() {
            return Err(ModelError::Config("attention fusion_gain must be finite".into()));
        }
        self.frontend.validate(self.clip_len)?;
        self.backend.validate()
    }

    pub fn plan(&self) -> ModelResult<ShapePlan> {
        self.validate()?;
        let (c, t) = self.frontend.output_shape(self.clip_len)?;
        let stages = self.backend.stage_shapes(c, t)?;
        Ok(ShapePlan {
            frontend: (c, t),
            stages,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_frontend_lands_on_128_by_2500() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.frontend.stem_pad(), 38);
        assert_eq!(cfg.frontend.cumulative_stride(), 64);
        assert_eq!(cfg.frontend.output_shape(160_000).unwrap(), (128, 2500));
    }

    #[test]
    fn quarter_width_on_one_second_clips() {
        let fe = FrontEndConfig {
            width_scale: 0.25,
            ..FrontEndConfig::default()
        };
        assert_eq!(fe.output_shape(16_000).unwrap(), (32, 250));
    }

    #[test]
    fn default_backend_stage_shapes() {
        let be = BackEndConfig::default();
        let shapes = be.stage_shapes(128, 2500).unwrap();
        assert_eq!(
            shapes,
            vec![(256, 32, 625), (512, 16, 313), (1024, 8, 157), (2048, 4, 79)]
        );
    }

    #[test]
    fn eighth_width_backend_channels() {
        let be = BackEndConfig {
            width_scale: 0.125,
            ..BackEndConfig::default()
        };
        assert_eq!(be.stem_width(), 8);
        assert_eq!(be.stage_widths(), vec![32, 64, 128, 256]);
        assert_eq!(be.bottleneck_widths(), vec![8, 16, 32, 64]);
        let tiny = BackEndConfig {
            width_scale: 0.01,
            ..BackEndConfig::default()
        };
        assert!(tiny.stage_widths().iter().all(|&c| c >= 4));
    }

    #[test]
    fn indivisible_clip_is_a_config_error() {
        let fe = FrontEndConfig::default();
        assert!(matches!(fe.validate(16_001), Err(ModelError::Config(_))));
        assert!(fe.validate(0).is_err());
    }

    #[test]
    fn backend_needs_four_stages() {
        let be = BackEndConfig {
            blocks: vec![1, 1, 1],
            ..BackEndConfig::default()
        };
        assert!(be.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let r: Result<FrontEndConfig, _> = serde_json::from_str(r#"{"stem_kernal": 80}"#);
        assert!(r.is_err());
        let ok: FrontEndConfig = serde_json::from_str(r#"{"width_scale": 0.5}"#).unwrap();
        assert_eq!(ok.stem_kernel, 80);
    }
}
