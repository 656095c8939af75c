//! WAV decoding and encoding plus the fixed-length mono preprocessing
//! applied to every clip.

use std::path::Path;

use thiserror::Error;

/// Default model input: ten seconds at 16 kHz.
pub const DEFAULT_CLIP_LEN: usize = 160_000;
pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("malformed WAV: {0}")]
    Malformed(String),
    #[error("unsupported WAV encoding: format tag {format_tag}, {bits} bits, {channels} channels")]
    Unsupported { format_tag: u16, bits: u16, channels: u16 },
    #[error("WAV contains no sample data")]
    Empty,
    #[error("invalid sample rate {0}")]
    InvalidRate(u32),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type AudioResult<T> = Result<T, AudioError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> AudioResult<Self> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidRate(sample_rate));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, &s| m.max(s.abs()))
    }
}

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]])
}

struct Format {
    tag: u16,
    channels: u16,
    rate: u32,
    bits: u16,
}

/// Decodes a RIFF/WAVE byte buffer holding 16-bit PCM or 32-bit float
/// samples with one or two channels. Stereo is averaged to mono; integer
/// samples are divided by 32768.
pub fn decode_wav(bytes: &[u8]) -> AudioResult<Waveform> {
    if bytes.len() < 12 {
        return Err(AudioError::Malformed("shorter than the RIFF header".into()));
    }
    if &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::Malformed("missing RIFF/WAVE magic".into()));
    }
    let mut pos = 12;
    let mut format: Option<Format> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        let end = body
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| {
                AudioError::Malformed(format!(
                    "chunk {:?} overruns the buffer",
                    String::from_utf8_lossy(id)
                ))
            })?;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(AudioError::Malformed("fmt chunk shorter than 16 bytes".into()));
                }
                let mut tag = u16_at(bytes, body);
                if tag == FORMAT_EXTENSIBLE && size >= 26 {
                    tag = u16_at(bytes, body + 24);
                }
                format = Some(Format {
                    tag,
                    channels: u16_at(bytes, body + 2),
                    rate: u32_at(bytes, body + 4),
                    bits: u16_at(bytes, body + 14),
                });
            }
            b"data" => data = Some(&bytes[body..end]),
            _ => {}
        }
        pos = end + (size & 1);
    }
    let format = format.ok_or_else(|| AudioError::Malformed("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| AudioError::Malformed("no data chunk".into()))?;
    let unsupported = || AudioError::Unsupported {
        format_tag: format.tag,
        bits: format.bits,
        channels: format.channels,
    };
    if !(1..=2).contains(&format.channels) {
        return Err(unsupported());
    }
    if format.rate == 0 {
        return Err(AudioError::InvalidRate(0));
    }
    let width = match (format.tag, format.bits) {
        (FORMAT_PCM, 16) => 2,
        (FORMAT_FLOAT, 32) => 4,
        _ => return Err(unsupported()),
    };
    let frame = width * format.channels as usize;
    let frames = data.len() / frame;
    if frames == 0 {
        return Err(AudioError::Empty);
    }
    let sample = |i: usize| -> f32 {
        if width == 2 {
            i16::from_le_bytes([data[i], data[i + 1]]) as f32 / 32768.0
        } else {
            f32::from_le_bytes([data[i], data[i + 1], data[i + 2], data[i + 3]])
        }
    };
    let samples = (0..frames)
        .map(|f| {
            let base = f * frame;
            if format.channels == 1 {
                sample(base)
            } else {
                0.5 * (sample(base) + sample(base + width))
            }
        })
        .collect();
    Waveform::new(samples, format.rate)
}

fn wav_bytes(w: &Waveform, tag: u16, bits: u16, payload: Vec<u8>) -> Vec<u8> {
    let block = bits / 8;
    let mut out = Vec::with_capacity(44 + payload.len());
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + payload.len() as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * block as u32).to_le_bytes());
    out.extend_from_slice(&block.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Mono 32-bit float WAV; decoding it returns the samples bit for bit.
pub fn encode_wav_f32(w: &Waveform) -> Vec<u8> {
    let payload = w.samples.iter().flat_map(|s| s.to_le_bytes()).collect();
    wav_bytes(w, FORMAT_FLOAT, 32, payload)
}

/// Mono 16-bit PCM WAV. Samples are clipped to `[-1, 1)` and rounded.
pub fn encode_wav_pcm16(w: &Waveform) -> Vec<u8> {
    let payload = w
        .samples
        .iter()
        .flat_map(|&s| ((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16).to_le_bytes())
        .collect();
    wav_bytes(w, FORMAT_PCM, 16, payload)
}

pub fn read_wav(path: &Path) -> AudioResult<Waveform> {
    let bytes = std::fs::read(path).map_err(|source| AudioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_wav(&bytes)
}

pub fn write_wav_f32(path: &Path, w: &Waveform) -> AudioResult<()> {
    std::fs::write(path, encode_wav_f32(w)).map_err(|source| AudioError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Linear-interpolation resampling.
///
/// Length rule: the output has `round(n * target / source)` samples, and
/// output sample `i` reads the input at position `i * source / target`,
/// holding the last input sample beyond the end. So `{0, 1}` at 2 Hz
/// becomes `{0, 0.5, 1, 1}` at 4 Hz. Equal rates return the input unchanged.
pub fn resample_linear(w: &Waveform, target_rate: u32) -> AudioResult<Waveform> {
    if target_rate == 0 {
        return Err(AudioError::InvalidRate(target_rate));
    }
    if target_rate == w.sample_rate || w.samples.is_empty() {
        return Waveform::new(w.samples.clone(), target_rate);
    }
    let n = w.samples.len();
    let ratio = w.sample_rate as f64 / target_rate as f64;
    let out_len = ((n as f64) / ratio).round() as usize;
    let last = w.samples[n - 1];
    let samples = (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let j = pos.floor() as usize;
            if j + 1 >= n {
                return last;
            }
            let frac = (pos - j as f64) as f32;
            w.samples[j] + frac * (w.samples[j + 1] - w.samples[j])
        })
        .collect();
    Waveform::new(samples, target_rate)
}

/// Truncates to the first `clip_len` samples or zero-pads at the end.
pub fn fit_length(w: &Waveform, clip_len: usize) -> Waveform {
    let mut samples = w.samples.clone();
    samples.resize(clip_len, 0.0);
    Waveform {
        samples,
        sample_rate: w.sample_rate,
    }
}

/// Scales so the largest magnitude is 1. Near-silent clips (peak at most
/// 1e-8) are returned unchanged.
pub fn peak_normalize(w: &Waveform) -> Waveform {
    let peak = w.peak();
    let samples = if peak > 1e-8 {
        w.samples.iter().map(|&s| s / peak).collect()
    } else {
        w.samples.clone()
    };
    Waveform {
        samples,
        sample_rate: w.sample_rate,
    }
}

/// Resample, length-fit and peak-normalize: the input contract of the model.
pub fn prepare(w: &Waveform, sample_rate: u32, clip_len: usize) -> AudioResult<Waveform> {
    let w = resample_linear(w, sample_rate)?;
    Ok(peak_normalize(&fit_length(&w, clip_len)))
}
