use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{io_err, write_manifest, ClipRecord, Dataset, DatasetError, DatasetResult, LabelVocabulary, MultiHotLabel};
use crate::audio_io::{self, Waveform};

/// Noise level relative to the clip peak, in dB.
const NOISE_DB: f64 = -30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    pub n_classes: usize,
    pub n_clips: usize,
    pub clip_seconds: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

/// Tone frequency of class `c`: half-octave steps up from 220 Hz.
pub fn class_frequency(c: usize) -> f64 {
    220.0 * 2f64.powf(c as f64 / 2.0)
}

impl ToySpec {
    pub fn validate(&self) -> DatasetResult<()> {
        if self.n_classes < 2 {
            return Err(DatasetError::Toy("at least two classes are needed".into()));
        }
        if self.n_clips == 0 {
            return Err(DatasetError::Toy("at least one clip is needed".into()));
        }
        if self.sample_rate == 0 || !(self.clip_seconds > 0.0) {
            return Err(DatasetError::Toy("sample rate and duration must be positive".into()));
        }
        let top = class_frequency(self.n_classes - 1);
        if top >= self.sample_rate as f64 / 2.0 {
            return Err(DatasetError::Toy(format!(
                "class {} tone at {top:.0} Hz is above the Nyquist limit of {} Hz",
                self.n_classes - 1,
                self.sample_rate / 2
            )));
        }
        Ok(())
    }

    pub fn clip_len(&self) -> usize {
        (self.clip_seconds * self.sample_rate as f64).round() as usize
    }

    pub fn vocabulary(&self) -> LabelVocabulary {
        LabelVocabulary::new((0..self.n_classes).map(|c| format!("tone{c:02}")).collect())
            .expect("generated names are unique")
    }
}

/// One clip: 1 to 3 distinct tone events, each a Hann-enveloped burst of
/// 0.5 to 2 s at a random offset, plus white noise 30 dB below the peak,
/// peak-normalized.
fn synth_clip(spec: &ToySpec, index: usize) -> (Waveform, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index as u64);
    let len = spec.clip_len();
    let rate = spec.sample_rate as f64;
    let n_events = rng.random_range(1..=3usize.min(spec.n_classes));
    let mut classes = sample(&mut rng, spec.n_classes, n_events).into_vec();
    classes.sort_unstable();
    let mut signal = vec![0f64; len];
    for &c in &classes {
        let dur = ((rng.random_range(0.5..2.0) * rate) as usize).clamp(1, len);
        let start = rng.random_range(0..=len - dur);
        let amp = rng.random_range(0.5..1.0);
        let phase = rng.random_range(0.0..2.0 * PI);
        let w = 2.0 * PI * class_frequency(c) / rate;
        for k in 0..dur {
            let env = if dur > 1 {
                0.5 - 0.5 * (2.0 * PI * k as f64 / (dur - 1) as f64).cos()
            } else {
                1.0
            };
            signal[start + k] += amp * env * (w * k as f64 + phase).sin();
        }
    }
    let peak = signal.iter().fold(0f64, |m, &s| m.max(s.abs()));
    let noise = Normal::new(0.0, peak * 10f64.powf(NOISE_DB / 20.0)).expect("finite std");
    for s in &mut signal {
        *s += noise.sample(&mut rng);
    }
    let w = Waveform {
        samples: signal.iter().map(|&s| s as f32).collect(),
        sample_rate: spec.sample_rate,
    };
    (audio_io::peak_normalize(&w), classes)
}

/// Generates the toy set in memory. Record paths are nominal
/// (`wav/clipNNNNN.wav`) and match what [`make_toy_dataset`] writes.
pub fn generate_toy(spec: &ToySpec) -> DatasetResult<Dataset> {
    spec.validate()?;
    let vocab = spec.vocabulary();
    let mut records = Vec::with_capacity(spec.n_clips);
    let mut clips = Vec::with_capacity(spec.n_clips);
    for i in 0..spec.n_clips {
        let (w, classes) = synth_clip(spec, i);
        records.push(ClipRecord {
            id: format!("clip{i:05}"),
            path: PathBuf::from(format!("wav/clip{i:05}.wav")),
            label: MultiHotLabel::from_indices(spec.n_classes, &classes)?,
        });
        clips.push(w);
    }
    Dataset::from_parts(vocab, records, clips)
}

/// Writes `vocab.txt`, `manifest.jsonl` and `wav/*.wav` (32-bit float)
/// under `out_dir`. Output is byte-identical for identical specs.
pub fn make_toy_dataset(out_dir: &Path, spec: &ToySpec) -> DatasetResult<Dataset> {
    let mut data = generate_toy(spec)?;
    let wav_dir = out_dir.join("wav");
    fs::create_dir_all(&wav_dir).map_err(io_err(&wav_dir))?;
    for (r, w) in data.records.iter_mut().zip(&data.clips) {
        r.path = out_dir.join(&r.path);
        fs::write(&r.path, audio_io::encode_wav_f32(w)).map_err(io_err(&r.path))?;
    }
    data.vocab.save(&out_dir.join("vocab.txt"))?;
    write_manifest(&out_dir.join("manifest.jsonl"), &data.records, &data.vocab)?;
    Ok(data)
}
