//! Optimization: the two-phase mix-training schedule, the comparison
//! arms, checkpoints and evaluation.

pub mod checkpoint;
mod runner;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{make_mixed_batch, mixup_labels, BalancedSampler, Dataset, DatasetError};
use crate::diffops::{self, Mode, OpError, Tensor};
use crate::metrics::{evaluate_scores, MetricsError, MetricsReport};
use crate::model::{LevelPredictions, Model, ModelError};

pub use checkpoint::{
    config_hash, decode_checkpoint, encode_checkpoint, load_checkpoint, params_digest, save_checkpoint, Checkpoint,
    CheckpointError, CheckpointHeader,
};
pub use runner::{
    run_strategy, train_baseline, train_phase1, train_phase2, EvalPoint, PhaseOutcome, PhaseStats, PhaseSummary,
    RunContext, RunOutput, StepLoss, TrainReport,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Op(#[from] OpError),
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at step {step} (lr {lr}); batch clips: {ids:?}")]
    NonFiniteLoss { step: u64, lr: f64, ids: Vec<String> },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type TrainResult<T> = Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Phase 1 on union-labeled mixtures, phase 2 on raw clips.
    MixTraining,
    /// Phase 1 only, for the whole budget.
    MixNoFinetune,
    /// Mixtures with ratio-weighted targets, for the whole budget.
    MixupBaseline,
    /// Raw clips for the whole budget.
    None,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::MixTraining,
        Strategy::MixNoFinetune,
        Strategy::MixupBaseline,
        Strategy::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::MixTraining => "mix_training",
            Strategy::MixNoFinetune => "mix_no_finetune",
            Strategy::MixupBaseline => "mixup_baseline",
            Strategy::None => "none",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = Strategy::ALL.iter().map(|k| k.as_str()).collect();
                format!("unknown strategy {s:?}; valid values: {}", valid.join(", "))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub alpha_min: f32,
    pub alpha_max: f32,
    pub steps_phase1: u64,
    pub steps_phase2: u64,
    pub seed: u64,
    pub strategy: Strategy,
    pub deterministic: bool,
    /// Steps between intermediate checkpoints; 0 writes only phase ends.
    pub checkpoint_every: u64,
    /// Steps between evaluations on the held-out set; 0 evaluates only at
    /// the end of each phase.
    pub eval_every: u64,
    /// Steps between loss log lines.
    pub log_every: u64,
    /// Batch-preparation threads; values above 1 prefetch batches in order.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr_phase1: 3e-4,
            lr_phase2: 3e-5,
            alpha_min: 0.4,
            alpha_max: 0.6,
            steps_phase1: 4000,
            steps_phase2: 1000,
            seed: 0,
            strategy: Strategy::MixTraining,
            deterministic: false,
            checkpoint_every: 0,
            eval_every: 0,
            log_every: 100,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> TrainResult<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 (batch statistics)");
        }
        if !(self.lr_phase1 > 0.0 && self.lr_phase2 > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0 <= self.alpha_min && self.alpha_min < self.alpha_max && self.alpha_max <= 1.0) {
            return bad("need 0 <= alpha_min < alpha_max <= 1");
        }
        Ok(())
    }

    /// Optimizer steps every strategy arm executes.
    pub fn total_steps(&self) -> u64 {
        self.steps_phase1 + self.steps_phase2
    }
}

/// How a batch was built; recorded for phase-separation accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchKind {
    Raw,
    Mixed,
    Mixup,
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, 1, clip_len]`.
    pub x: Tensor<f32>,
    /// `[B, N]` targets.
    pub y: Tensor<f32>,
    pub ids: Vec<String>,
    pub kind: BatchKind,
}

fn stack(rows: Vec<Vec<f32>>, width: usize, shape: &[usize]) -> TrainResult<Tensor<f32>> {
    let mut data = Vec::with_capacity(rows.len() * width);
    for r in rows {
        data.extend(r);
    }
    Ok(Tensor::from_vec(shape, data)?)
}

/// Draws the next batch of the given kind from the balanced sampler.
pub fn next_batch(
    kind: BatchKind,
    sampler: &mut BalancedSampler,
    data: &Dataset,
    batch_size: usize,
    alpha_min: f32,
    alpha_max: f32,
) -> TrainResult<Batch> {
    let len = data.clips.first().map_or(0, |c| c.len());
    let n = data.n_classes();
    let (xs, ys, ids) = match kind {
        BatchKind::Raw => {
            let idx = sampler.next_batch(batch_size);
            (
                idx.iter().map(|&i| data.clips[i].samples.clone()).collect::<Vec<_>>(),
                idx.iter().map(|&i| data.records[i].label.to_f32()).collect::<Vec<_>>(),
                idx.iter().map(|&i| data.records[i].id.clone()).collect(),
            )
        }
        BatchKind::Mixed | BatchKind::Mixup => {
            let mixed = make_mixed_batch(sampler, data, batch_size, alpha_min, alpha_max)?;
            let mut ys = Vec::with_capacity(batch_size);
            for ex in &mixed {
                ys.push(if kind == BatchKind::Mixed {
                    ex.label.to_f32()
                } else {
                    let (i, j) = ex.sources;
                    mixup_labels(&data.records[i].label, &data.records[j].label, ex.alpha)?
                });
            }
            let ids = mixed
                .iter()
                .map(|ex| format!("{}+{}", ex.source_ids.0, ex.source_ids.1))
                .collect();
            (mixed.into_iter().map(|ex| ex.waveform.samples).collect(), ys, ids)
        }
    };
    Ok(Batch {
        x: stack(xs, len, &[batch_size, 1, len])?,
        y: stack(ys, n, &[batch_size, n])?,
        ids,
        kind,
    })
}

/// Mean of the three level BCE losses.
pub fn multi_level_loss(preds: &LevelPredictions<f32>, y: &Tensor<f32>) -> TrainResult<f32> {
    let mut total = 0.0;
    for p in preds.levels() {
        total += diffops::bce_from_probability(p, y)?;
    }
    Ok(total / 3.0)
}

/// Gradients of [`multi_level_loss`] w.r.t. each level prediction.
pub fn multi_level_loss_backward(preds: &LevelPredictions<f32>, y: &Tensor<f32>) -> TrainResult<[Tensor<f32>; 3]> {
    let g = |p: &Tensor<f32>| -> TrainResult<Tensor<f32>> {
        Ok(diffops::bce_from_probability_backward(p, y)?.map(|v| v / 3.0))
    };
    Ok([g(&preds.p2)?, g(&preds.p3)?, g(&preds.p4)?])
}

/// Fused eval-mode probabilities, row-major `[clips, N]`.
pub fn predict(model: &mut Model<f32>, data: &Dataset, batch_size: usize) -> TrainResult<Vec<f32>> {
    let len = model.config().clip_len;
    let mut out = Vec::with_capacity(data.len() * model.config().n_classes);
    for chunk in data.clips.chunks(batch_size.max(1)) {
        let mut x = Vec::with_capacity(chunk.len() * len);
        for c in chunk {
            x.extend_from_slice(&c.samples);
        }
        let x = Tensor::from_vec(&[chunk.len(), 1, len], x)?;
        out.extend_from_slice(model.forward(&x, Mode::Eval)?.fused.data());
    }
    Ok(out)
}

/// Scores fused predictions on `data` with the benchmark metrics.
pub fn evaluate(model: &mut Model<f32>, data: &Dataset, batch_size: usize) -> TrainResult<MetricsReport> {
    if data.is_empty() {
        return Err(MetricsError::Empty.into());
    }
    let scores: Vec<f64> = predict(model, data, batch_size)?.into_iter().map(f64::from).collect();
    let truth: Vec<u8> = data.records.iter().flat_map(|r| r.label.bits().to_vec()).collect();
    Ok(evaluate_scores(&scores, &truth, data.n_classes(), data.vocab.names())?)
}
