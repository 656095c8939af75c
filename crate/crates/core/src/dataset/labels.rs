use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_err, DatasetError, DatasetResult};

/// Ordered class names; the line number in the vocabulary file is the
/// class index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVocabulary {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelVocabulary {
    pub fn new(names: Vec<String>) -> DatasetResult<Self> {
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if n.trim().is_empty() {
                return Err(DatasetError::Vocabulary(format!("class {i} has an empty name")));
            }
            if index.insert(n.clone(), i).is_some() {
                return Err(DatasetError::Vocabulary(format!("duplicate class name {n:?}")));
            }
        }
        if names.is_empty() {
            return Err(DatasetError::Vocabulary("vocabulary is empty".into()));
        }
        Ok(Self { names, index })
    }

    /// Reads newline-delimited names, ignoring a trailing empty line.
    pub fn load(path: &Path) -> DatasetResult<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::new(text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
    }

    pub fn save(&self, path: &Path) -> DatasetResult<()> {
        let mut text = self.names.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }
}

/// 0/1 vector over the vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MultiHotLabel {
    bits: Vec<u8>,
}

impl MultiHotLabel {
    pub fn zeros(n: usize) -> Self {
        Self { bits: vec![0; n] }
    }

    pub fn from_bits(bits: Vec<u8>) -> DatasetResult<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(DatasetError::Label("multi-hot entries must be 0 or 1".into()));
        }
        Ok(Self { bits })
    }

    pub fn from_indices(n: usize, indices: &[usize]) -> DatasetResult<Self> {
        let mut l = Self::zeros(n);
        for &i in indices {
            if i >= n {
                return Err(DatasetError::Label(format!("class index {i} out of range for {n} classes")));
            }
            l.bits[i] = 1;
        }
        Ok(l)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.bits.get(class) == Some(&1)
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i] == 1).collect()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| b as f32).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub id: String,
    pub path: PathBuf,
    pub label: MultiHotLabel,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    id: String,
    path: String,
    labels: Vec<String>,
}

/// Parses a JSON Lines manifest. Relative paths are resolved against the
/// manifest's directory. Blank lines are skipped.
pub fn load_manifest(path: &Path, vocab: &LabelVocabulary) -> DatasetResult<Vec<ClipRecord>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_manifest(&text, base, vocab)
}

pub fn parse_manifest(text: &str, base: &Path, vocab: &LabelVocabulary) -> DatasetResult<Vec<ClipRecord>> {
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: ManifestLine = serde_json::from_str(line).map_err(|e| DatasetError::Manifest {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(raw.id.clone()) {
            return Err(DatasetError::DuplicateId(raw.id));
        }
        if raw.labels.is_empty() {
            return Err(DatasetError::EmptyLabels(raw.id));
        }
        let mut indices = Vec::with_capacity(raw.labels.len());
        for name in &raw.labels {
            let i = vocab.index_of(name).ok_or_else(|| DatasetError::UnknownLabel {
                id: raw.id.clone(),
                label: name.clone(),
            })?;
            indices.push(i);
        }
        let p = PathBuf::from(&raw.path);
        records.push(ClipRecord {
            path: if p.is_absolute() { p } else { base.join(p) },
            label: MultiHotLabel::from_indices(vocab.len(), &indices)?,
            id: raw.id,
        });
    }
    Ok(records)
}

/// Writes records as JSON Lines. Paths under `base` are stored relative to it.
pub fn write_manifest(
    path: &Path,
    records: &[ClipRecord],
    vocab: &LabelVocabulary,
) -> DatasetResult<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for r in records {
        let rel = r.path.strip_prefix(base).unwrap_or(&r.path);
        let line = ManifestLine {
            id: r.id.clone(),
            path: rel.to_string_lossy().into_owned(),
            labels: r.label.indices().into_iter().map(|i| vocab.names()[i].clone()).collect(),
        };
        serde_json::to_writer(&mut out, &line).expect("manifest line serializes");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&out).map_err(io_err(path))
}
