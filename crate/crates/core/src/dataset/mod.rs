//! Labels, manifests, class-balanced sampling, clip mixing and the
//! synthetic tone dataset.

mod labels;
mod mixing;
mod sampler;
mod toy;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::audio_io::{self, AudioError, Waveform};

pub use labels::{load_manifest, parse_manifest, write_manifest, ClipRecord, LabelVocabulary, MultiHotLabel};
pub use mixing::{mix_labels, mix_waveforms, mixup_labels};
pub use sampler::{make_mixed_batch, BalancedSampler, MixedExample};
pub use toy::{class_frequency, generate_toy, make_toy_dataset, ToySpec};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("vocabulary: {0}")]
    Vocabulary(String),
    #[error("label: {0}")]
    Label(String),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("record {id}: unknown label {label:?}")]
    UnknownLabel { id: String, label: String },
    #[error("duplicate clip id {0:?}")]
    DuplicateId(String),
    #[error("record {0}: empty label list")]
    EmptyLabels(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("mixing: {0}")]
    Mix(String),
    #[error("toy data: {0}")]
    Toy(String),
    #[error("clip {id}: {source}")]
    Audio {
        id: String,
        #[source]
        source: AudioError,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type DatasetResult<T> = Result<T, DatasetError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Clips held in memory, already resampled, length-fitted and
/// peak-normalized, alongside their records.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: LabelVocabulary,
    pub records: Vec<ClipRecord>,
    pub clips: Vec<Waveform>,
}

impl Dataset {
    pub fn from_parts(vocab: LabelVocabulary, records: Vec<ClipRecord>, clips: Vec<Waveform>) -> DatasetResult<Self> {
        if records.len() != clips.len() {
            return Err(DatasetError::Label(format!(
                "{} records but {} clips",
                records.len(),
                clips.len()
            )));
        }
        if let Some(r) = records.iter().find(|r| r.label.len() != vocab.len()) {
            return Err(DatasetError::Label(format!(
                "record {} has {} label slots, vocabulary has {}",
                r.id,
                r.label.len(),
                vocab.len()
            )));
        }
        Ok(Self { vocab, records, clips })
    }

    /// Loads a manifest and decodes every clip. Without an explicit
    /// vocabulary, `vocab.txt` next to the manifest is used.
    pub fn load(manifest: &Path, vocab: Option<&Path>, sample_rate: u32, clip_len: usize) -> DatasetResult<Self> {
        let default_vocab = manifest.parent().unwrap_or(Path::new("")).join("vocab.txt");
        let vocab = LabelVocabulary::load(vocab.unwrap_or(&default_vocab))?;
        Self::load_with(manifest, vocab, sample_rate, clip_len)
    }

    pub fn load_with(manifest: &Path, vocab: LabelVocabulary, sample_rate: u32, clip_len: usize) -> DatasetResult<Self> {
        let records = load_manifest(manifest, &vocab)?;
        if records.is_empty() {
            return Err(DatasetError::EmptyDataset);
        }
        let clips = records
            .iter()
            .map(|r| {
                audio_io::read_wav(&r.path)
                    .and_then(|w| audio_io::prepare(&w, sample_rate, clip_len))
                    .map_err(|source| DatasetError::Audio {
                        id: r.id.clone(),
                        source,
                    })
            })
            .collect::<DatasetResult<Vec<_>>>()?;
        Self::from_parts(vocab, records, clips)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.vocab.len()
    }

    pub fn labels(&self) -> Vec<MultiHotLabel> {
        self.records.iter().map(|r| r.label.clone()).collect()
    }

    /// The first `n` clips as a new dataset.
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            vocab: self.vocab.clone(),
            records: self.records[..n].to_vec(),
            clips: self.clips[..n].to_vec(),
        }
    }
}
