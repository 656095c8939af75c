use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{mix_labels, mixing::mix_samples, Dataset, DatasetError, DatasetResult, MultiHotLabel};
use crate::audio_io::Waveform;

/// Redraws allowed when the second mixing source repeats the first.
const MAX_PAIR_REDRAWS: usize = 1000;

/// Round-robin class-balanced sampler.
///
/// Anchor classes come from a shuffled cycle over all classes that have at
/// least one clip; the cycle is reshuffled whenever it is exhausted and the
/// position carries over between batches. For each anchor a clip carrying
/// that class is drawn uniformly.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    rng: ChaCha8Rng,
    by_class: Vec<Vec<usize>>,
    cycle: Vec<usize>,
    cursor: usize,
    excluded: Vec<usize>,
}

impl BalancedSampler {
    pub fn new(labels: &[MultiHotLabel], n_classes: usize, seed: u64) -> DatasetResult<Self> {
        if labels.is_empty() {
            return Err(DatasetError::EmptyDataset);
        }
        let mut by_class = vec![Vec::new(); n_classes];
        for (i, l) in labels.iter().enumerate() {
            for c in l.indices() {
                by_class[c].push(i);
            }
        }
        let excluded: Vec<usize> = (0..n_classes).filter(|&c| by_class[c].is_empty()).collect();
        if !excluded.is_empty() {
            log::warn!("classes without clips excluded from balanced sampling: {excluded:?}");
        }
        let cycle: Vec<usize> = (0..n_classes).filter(|&c| !by_class[c].is_empty()).collect();
        if cycle.is_empty() {
            return Err(DatasetError::EmptyDataset);
        }
        let mut s = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            by_class,
            cursor: cycle.len(),
            cycle,
            excluded,
        };
        s.refill();
        Ok(s)
    }

    fn refill(&mut self) {
        let Self { cycle, rng, .. } = self;
        cycle.shuffle(rng);
        self.cursor = 0;
    }

    pub fn excluded_classes(&self) -> &[usize] {
        &self.excluded
    }

    /// Number of classes taking part in the anchor cycle.
    pub fn cycle_len(&self) -> usize {
        self.cycle.len()
    }

    /// Next `(anchor class, clip index)`.
    pub fn next_draw(&mut self) -> (usize, usize) {
        if self.cursor == self.cycle.len() {
            self.refill();
        }
        let class = self.cycle[self.cursor];
        self.cursor += 1;
        let pool = &self.by_class[class];
        let clip = pool[self.rng.random_range(0..pool.len())];
        (class, clip)
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        (0..batch_size).map(|_| self.next_draw().1).collect()
    }

    pub(crate) fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// One synthetic training example built from two source clips.
#[derive(Debug, Clone)]
pub struct MixedExample {
    pub waveform: Waveform,
    /// Union of the source labels.
    pub label: MultiHotLabel,
    pub alpha: f32,
    pub source_ids: (String, String),
    /// Indices of the sources in the dataset.
    pub sources: (usize, usize),
}

/// Draws `batch_size` mixtures. Both sources come from the balanced
/// sampler and always have distinct ids; `alpha` is drawn per example,
/// uniformly in the open interval `(alpha_min, alpha_max)`.
pub fn make_mixed_batch(
    sampler: &mut BalancedSampler,
    data: &Dataset,
    batch_size: usize,
    alpha_min: f32,
    alpha_max: f32,
) -> DatasetResult<Vec<MixedExample>> {
    if !(0.0 <= alpha_min && alpha_min < alpha_max && alpha_max <= 1.0) {
        return Err(DatasetError::Mix(format!(
            "invalid mixing bounds ({alpha_min}, {alpha_max})"
        )));
    }
    if data.len() < 2 {
        return Err(DatasetError::Mix("mixing needs at least two clips".into()));
    }
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let (_, i) = sampler.next_draw();
        let mut j = sampler.next_draw().1;
        let mut redraws = 0;
        while data.records[j].id == data.records[i].id {
            redraws += 1;
            if redraws > MAX_PAIR_REDRAWS {
                return Err(DatasetError::Mix(format!(
                    "no distinct partner found for clip {}",
                    data.records[i].id
                )));
            }
            j = sampler.next_draw().1;
        }
        let alpha = loop {
            let a: f32 = sampler.rng().random_range(alpha_min..alpha_max);
            if a > alpha_min && a > 0.0 && a < 1.0 {
                break a;
            }
        };
        out.push(MixedExample {
            waveform: Waveform {
                samples: mix_samples(&data.clips[i].samples, &data.clips[j].samples, alpha),
                sample_rate: data.clips[i].sample_rate,
            },
            label: mix_labels(&data.records[i].label, &data.records[j].label)?,
            alpha,
            source_ids: (data.records[i].id.clone(), data.records[j].id.clone()),
            sources: (i, j),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ClipRecord, LabelVocabulary};

    fn single_label_set(n_classes: usize, per_class: usize) -> Vec<MultiHotLabel> {
        (0..n_classes * per_class)
            .map(|i| MultiHotLabel::from_indices(n_classes, &[i % n_classes]).unwrap())
            .collect()
    }

    fn dataset(labels: Vec<MultiHotLabel>) -> Dataset {
        let n = labels[0].len();
        let vocab = LabelVocabulary::new((0..n).map(|c| format!("c{c}")).collect()).unwrap();
        let records: Vec<ClipRecord> = labels
            .into_iter()
            .enumerate()
            .map(|(i, label)| ClipRecord {
                id: format!("clip{i}"),
                path: format!("clip{i}.wav").into(),
                label,
            })
            .collect();
        let clips = (0..records.len())
            .map(|i| Waveform::new(vec![i as f32 / 10.0; 4], 16000).unwrap())
            .collect();
        Dataset::from_parts(vocab, records, clips).unwrap()
    }

    #[test]
    fn each_class_anchors_twice_per_batch_of_eight() {
        let mut s = BalancedSampler::new(&single_label_set(4, 3), 4, 1).unwrap();
        let mut counts = [0usize; 4];
        for _ in 0..8 {
            counts[s.next_draw().0] += 1;
        }
        assert_eq!(counts, [2; 4]);
    }

    #[test]
    fn anchor_counts_are_exact_over_many_batches() {
        let mut s = BalancedSampler::new(&single_label_set(4, 5), 4, 3).unwrap();
        let mut counts = [0usize; 4];
        for _ in 0..1000 * 8 {
            counts[s.next_draw().0] += 1;
        }
        assert_eq!(counts, [2000; 4]);
    }

    #[test]
    fn same_seed_same_sequence() {
        let labels = single_label_set(5, 4);
        let mut a = BalancedSampler::new(&labels, 5, 9).unwrap();
        let mut b = BalancedSampler::new(&labels, 5, 9).unwrap();
        for _ in 0..50 {
            assert_eq!(a.next_batch(7), b.next_batch(7));
        }
    }

    #[test]
    fn classes_without_clips_are_excluded() {
        let labels = vec![MultiHotLabel::from_indices(3, &[0]).unwrap(), MultiHotLabel::from_indices(3, &[2]).unwrap()];
        let mut s = BalancedSampler::new(&labels, 3, 0).unwrap();
        assert_eq!(s.excluded_classes(), &[1]);
        assert!((0..20).all(|_| s.next_draw().0 != 1));
        assert!(matches!(BalancedSampler::new(&[], 3, 0), Err(DatasetError::EmptyDataset)));
    }

    #[test]
    fn mixed_batches_respect_the_contract() {
        let data = dataset(single_label_set(3, 2));
        let mut s = BalancedSampler::new(&data.labels(), 3, 4).unwrap();
        for ex in make_mixed_batch(&mut s, &data, 64, 0.4, 0.6).unwrap() {
            assert!(ex.alpha > 0.4 && ex.alpha < 0.6);
            assert_ne!(ex.source_ids.0, ex.source_ids.1);
            let (i, j) = ex.sources;
            assert_eq!(ex.label, mix_labels(&data.records[i].label, &data.records[j].label).unwrap());
        }
    }

    #[test]
    fn single_clip_cannot_be_mixed() {
        let data = dataset(single_label_set(1, 1));
        let mut s = BalancedSampler::new(&data.labels(), 1, 0).unwrap();
        assert!(make_mixed_batch(&mut s, &data, 1, 0.4, 0.6).is_err());
    }
}
