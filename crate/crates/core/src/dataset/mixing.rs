use crate::audio_io::Waveform;

use super::{DatasetError, DatasetResult, MultiHotLabel};

/// `alpha * x_i + (1 - alpha) * x_j`, elementwise, without renormalizing.
pub fn mix_waveforms(x_i: &Waveform, x_j: &Waveform, alpha: f32) -> DatasetResult<Waveform> {
    if x_i.len() != x_j.len() || x_i.sample_rate != x_j.sample_rate {
        return Err(DatasetError::Mix(format!(
            "cannot mix {} samples at {} Hz with {} samples at {} Hz",
            x_i.len(),
            x_i.sample_rate,
            x_j.len(),
            x_j.sample_rate
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(DatasetError::Mix(format!("mixing ratio {alpha} outside (0, 1)")));
    }
    Ok(Waveform {
        samples: mix_samples(&x_i.samples, &x_j.samples, alpha),
        sample_rate: x_i.sample_rate,
    })
}

pub(crate) fn mix_samples(a: &[f32], b: &[f32], alpha: f32) -> Vec<f32> {
    let beta = 1.0 - alpha;
    a.iter().zip(b).map(|(&x, &y)| alpha * x + beta * y).collect()
}

/// Union of two multi-hot labels: `sign(y_i + y_j)`, which on sums of
/// 0/1 vectors is `min(y_i + y_j, 1)`.
pub fn mix_labels(y_i: &MultiHotLabel, y_j: &MultiHotLabel) -> DatasetResult<MultiHotLabel> {
    if y_i.len() != y_j.len() {
        return Err(DatasetError::Mix(format!(
            "label lengths differ: {} vs {}",
            y_i.len(),
            y_j.len()
        )));
    }
    let bits = y_i.bits().iter().zip(y_j.bits()).map(|(&a, &b)| (a + b).min(1)).collect();
    MultiHotLabel::from_bits(bits)
}

/// Ratio-weighted targets `alpha * y_i + (1 - alpha) * y_j` of the mixup
/// comparison arm.
pub fn mixup_labels(y_i: &MultiHotLabel, y_j: &MultiHotLabel, alpha: f32) -> DatasetResult<Vec<f32>> {
    if y_i.len() != y_j.len() {
        return Err(DatasetError::Mix("label lengths differ".into()));
    }
    Ok(mix_samples(&y_i.to_f32(), &y_j.to_f32(), alpha))
}
