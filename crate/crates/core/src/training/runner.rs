use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::{decode_checkpoint, encode_checkpoint, params_digest, Checkpoint};
use super::{
    evaluate, multi_level_loss, multi_level_loss_backward, next_batch, Batch, BatchKind, Strategy, TrainConfig,
    TrainError, TrainResult,
};
use crate::dataset::{BalancedSampler, Dataset};
use crate::diffops::{adam_step, AdamState, Mode, ParamTensor};
use crate::model::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub phase: String,
    pub step: u64,
    pub loss: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub phase: String,
    pub step: u64,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "AUC")]
    pub auc: f64,
    pub d_prime: Option<f64>,
}

/// Batches consumed by one phase, by construction kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseStats {
    pub raw_batches: u64,
    pub mixed_batches: u64,
    pub mixup_batches: u64,
}

impl PhaseStats {
    fn count(&mut self, kind: BatchKind) {
        match kind {
            BatchKind::Raw => self.raw_batches += 1,
            BatchKind::Mixed => self.mixed_batches += 1,
            BatchKind::Mixup => self.mixup_batches += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub name: String,
    pub kind: BatchKind,
    pub steps: u64,
    pub lr: f64,
    pub stats: PhaseStats,
    /// SHA-256 of the parameters the first step started from.
    pub start_digest: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub strategy: Option<Strategy>,
    pub seed: u64,
    pub losses: Vec<StepLoss>,
    pub evals: Vec<EvalPoint>,
    pub phases: Vec<PhaseSummary>,
    pub wall_clock_secs: f64,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn loss_trace(&self) -> Vec<f32> {
        self.losses.iter().map(|l| l.loss).collect()
    }

    /// Evaluation records as JSON Lines.
    pub fn evals_jsonl(&self) -> String {
        self.evals
            .iter()
            .map(|e| serde_json::to_string(e).expect("eval point serializes") + "\n")
            .collect()
    }
}

/// Where a phase reports to: optional held-out data, optional output
/// directory, and the report being accumulated.
pub struct RunContext<'a> {
    pub eval_data: Option<&'a Dataset>,
    pub out_dir: Option<&'a Path>,
    pub report: TrainReport,
}

impl<'a> RunContext<'a> {
    pub fn new(eval_data: Option<&'a Dataset>, out_dir: Option<&'a Path>) -> Self {
        Self {
            eval_data,
            out_dir,
            report: TrainReport::default(),
        }
    }
}

pub struct PhaseOutcome {
    pub summary: PhaseSummary,
    pub optimizer: AdamState<f32>,
    pub losses: Vec<f32>,
}

struct PhaseSpec {
    name: &'static str,
    kind: BatchKind,
    /// Steps already taken in this phase (nonzero when resuming).
    start: u64,
    steps: u64,
    lr: f64,
    optimizer: AdamState<f32>,
}

fn derive_seed(seed: u64, phase: &str, start: u64) -> u64 {
    let tag = phase.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ tag ^ start.rotate_left(32)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_checkpoint(path: &Path, bytes: &[u8], ctx: &mut RunContext) -> TrainResult<()> {
    fs::write(path, bytes).map_err(io_err(path))?;
    ctx.report.checkpoints.push(path.to_path_buf());
    Ok(())
}

/// Runs `steps` optimizer updates on a batch stream. With several workers a
/// producer thread builds batches ahead in the same serial order.
fn with_batches<R>(
    cfg: &TrainConfig,
    data: &Dataset,
    kind: BatchKind,
    mut sampler: BalancedSampler,
    steps: u64,
    body: impl FnOnce(&mut dyn FnMut() -> TrainResult<Batch>) -> TrainResult<R>,
) -> TrainResult<R> {
    let (bs, amin, amax) = (cfg.batch_size, cfg.alpha_min, cfg.alpha_max);
    if cfg.workers <= 1 || cfg.deterministic {
        let mut next = || next_batch(kind, &mut sampler, data, bs, amin, amax);
        return body(&mut next);
    }
    std::thread::scope(|s| {
        let (tx, rx) = sync_channel::<TrainResult<Batch>>(cfg.workers);
        s.spawn(move || {
            for _ in 0..steps {
                let b = next_batch(kind, &mut sampler, data, bs, amin, amax);
                let failed = b.is_err();
                if tx.send(b).is_err() || failed {
                    break;
                }
            }
        });
        let mut next = || {
            rx.recv()
                .unwrap_or_else(|_| Err(TrainError::Config("batch producer stopped early".into())))
        };
        body(&mut next)
    })
}

fn run_phase(
    model: &mut Model<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    ctx: &mut RunContext,
    spec: PhaseSpec,
) -> TrainResult<PhaseOutcome> {
    cfg.validate()?;
    let sampler = BalancedSampler::new(&data.labels(), data.n_classes(), derive_seed(cfg.seed, spec.name, spec.start))?;
    let start_digest = params_digest(model);
    let mut optimizer = spec.optimizer;
    let mut stats = PhaseStats::default();
    let mut losses = Vec::new();
    let remaining = spec.steps.saturating_sub(spec.start);
    let classes = data.vocab.names().to_vec();
    with_batches(cfg, data, spec.kind, sampler, remaining, |next| {
        for step in spec.start + 1..=spec.steps {
            let batch = next()?;
            stats.count(batch.kind);
            model.params_mut().zero_grad();
            let preds = model.forward(&batch.x, Mode::Train)?;
            let loss = multi_level_loss(&preds, &batch.y)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step,
                    lr: spec.lr,
                    ids: batch.ids,
                });
            }
            let [g2, g3, g4] = multi_level_loss_backward(&preds, &batch.y)?;
            model.backward([&g2, &g3, &g4])?;
            {
                let mut params: Vec<&mut ParamTensor<f32>> = model.params_mut().params_mut().iter_mut().collect();
                adam_step(&mut params, &mut optimizer, spec.lr)?;
            }
            losses.push(loss);
            ctx.report.losses.push(StepLoss {
                phase: spec.name.into(),
                step,
                loss,
            });
            if cfg.log_every > 0 && step % cfg.log_every == 0 {
                log::info!("{} step {step}/{} loss {loss:.5}", spec.name, spec.steps);
            }
            if let Some(dir) = ctx.out_dir {
                if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < spec.steps {
                    let bytes = encode_checkpoint(model, &classes, spec.name, step, Some(&optimizer));
                    write_checkpoint(&dir.join(format!("{}_step{step:06}.ckpt", spec.name)), &bytes, ctx)?;
                }
            }
            let periodic = cfg.eval_every > 0 && step % cfg.eval_every == 0;
            if periodic || step == spec.steps {
                record_eval(model, cfg, ctx, spec.name, step)?;
            }
        }
        Ok(())
    })?;
    Ok(PhaseOutcome {
        summary: PhaseSummary {
            name: spec.name.into(),
            kind: spec.kind,
            steps: spec.steps,
            lr: spec.lr,
            stats,
            start_digest,
        },
        optimizer,
        losses,
    })
}

fn record_eval(model: &mut Model<f32>, cfg: &TrainConfig, ctx: &mut RunContext, phase: &str, step: u64) -> TrainResult<()> {
    let Some(eval) = ctx.eval_data else {
        return Ok(());
    };
    let r = evaluate(model, eval, cfg.batch_size)?;
    log::info!("{phase} step {step} eval mAP {:.4} AUC {:.4}", r.map, r.auc);
    ctx.report.evals.push(EvalPoint {
        phase: phase.into(),
        step,
        map: r.map,
        auc: r.auc,
        d_prime: r.d_prime,
    });
    Ok(())
}

/// Phase 1: every step consumes a freshly drawn batch of union-labeled
/// mixtures, optimized with Adam at `lr_phase1`.
pub fn train_phase1(
    model: &mut Model<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    ctx: &mut RunContext,
    steps: u64,
) -> TrainResult<PhaseOutcome> {
    run_phase(
        model,
        data,
        cfg,
        ctx,
        PhaseSpec {
            name: "phase1",
            kind: BatchKind::Mixed,
            start: 0,
            steps,
            lr: cfg.lr_phase1,
            optimizer: AdamState::default(),
        },
    )
}

/// Phase 2: loads `theta` into `model` (refusing another configuration
/// unless `force`), then fine-tunes on raw balanced batches with fresh Adam
/// moments at `lr_phase2`.
pub fn train_phase2(
    model: &mut Model<f32>,
    theta: &Checkpoint,
    data: &Dataset,
    cfg: &TrainConfig,
    ctx: &mut RunContext,
    force: bool,
) -> TrainResult<PhaseOutcome> {
    theta.apply(model, force)?;
    run_phase(
        model,
        data,
        cfg,
        ctx,
        PhaseSpec {
            name: "phase2",
            kind: BatchKind::Raw,
            start: 0,
            steps: cfg.steps_phase2,
            lr: cfg.lr_phase2,
            optimizer: AdamState::default(),
        },
    )
}

/// Comparison arms run for the full matched budget at `lr_phase1`:
/// `none` on raw clips, `mixup_baseline` on mixtures with ratio targets,
/// `mix_no_finetune` on union-labeled mixtures.
pub fn train_baseline(
    model: &mut Model<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    ctx: &mut RunContext,
) -> TrainResult<PhaseOutcome> {
    let kind = match cfg.strategy {
        Strategy::None => BatchKind::Raw,
        Strategy::MixupBaseline => BatchKind::Mixup,
        Strategy::MixNoFinetune => BatchKind::Mixed,
        Strategy::MixTraining => {
            return Err(TrainError::Config("mix_training is not a single-phase arm".into()));
        }
    };
    run_phase(
        model,
        data,
        cfg,
        ctx,
        PhaseSpec {
            name: "baseline",
            kind,
            start: 0,
            steps: cfg.total_steps(),
            lr: cfg.lr_phase1,
            optimizer: AdamState::default(),
        },
    )
}

/// Records the phase and writes its end checkpoint as `<file>.ckpt`.
fn finish(
    model: &Model<f32>,
    classes: &[String],
    ctx: &mut RunContext,
    file: &str,
    outcome: &PhaseOutcome,
) -> TrainResult<Vec<u8>> {
    ctx.report.phases.push(outcome.summary.clone());
    let s = &outcome.summary;
    let bytes = encode_checkpoint(model, classes, &s.name, s.steps, Some(&outcome.optimizer));
    if let Some(dir) = ctx.out_dir {
        let path = dir.join(format!("{file}.ckpt"));
        write_checkpoint(&path, &bytes, ctx)?;
        ctx.report.final_checkpoint = Some(path);
    }
    Ok(bytes)
}

pub struct RunOutput {
    pub report: TrainReport,
    pub final_checkpoint: Vec<u8>,
}

/// Runs the configured strategy end to end. With an output directory,
/// checkpoints, `report.jsonl` and `summary.json` are written there.
/// `resume` continues a run from one of its checkpoints.
pub fn run_strategy(
    model: &mut Model<f32>,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    resume: Option<&Checkpoint>,
) -> TrainResult<RunOutput> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let started = Instant::now();
    let classes = train.vocab.names().to_vec();
    let mut ctx = RunContext::new(eval, out_dir);
    ctx.report.strategy = Some(cfg.strategy);
    ctx.report.seed = cfg.seed;

    let (resume_phase, resume_step, resume_opt) = match resume {
        Some(ck) => {
            ck.apply(model, false)?;
            (ck.header.phase.clone(), ck.header.step, ck.optimizer()?.unwrap_or_default())
        }
        None => (String::new(), 0, AdamState::default()),
    };
    let final_bytes = match cfg.strategy {
        Strategy::MixTraining => {
            let phase1_bytes = if resume_phase == "phase2" {
                None
            } else {
                let (start, optimizer) = if resume_phase == "phase1" {
                    (resume_step, resume_opt.clone())
                } else {
                    (0, AdamState::default())
                };
                let p1 = run_phase(
                    model,
                    train,
                    cfg,
                    &mut ctx,
                    PhaseSpec {
                        name: "phase1",
                        kind: BatchKind::Mixed,
                        start,
                        steps: cfg.steps_phase1,
                        lr: cfg.lr_phase1,
                        optimizer,
                    },
                )?;
                Some(finish(model, &classes, &mut ctx, "phase1", &p1)?)
            };
            let (start, optimizer) = match (&phase1_bytes, resume_phase.as_str()) {
                (None, _) => (resume_step, resume_opt),
                _ => (0, AdamState::default()),
            };
            if let Some(bytes) = &phase1_bytes {
                // Fine-tuning always starts from the stored phase-1 parameters.
                decode_checkpoint(bytes)?.apply(model, false)?;
            }
            let p2 = run_phase(
                model,
                train,
                cfg,
                &mut ctx,
                PhaseSpec {
                    name: "phase2",
                    kind: BatchKind::Raw,
                    start,
                    steps: cfg.steps_phase2,
                    lr: cfg.lr_phase2,
                    optimizer,
                },
            )?;
            finish(model, &classes, &mut ctx, "phase2", &p2)?
        }
        arm => {
            let kind = match arm {
                Strategy::None => BatchKind::Raw,
                Strategy::MixupBaseline => BatchKind::Mixup,
                _ => BatchKind::Mixed,
            };
            let (start, optimizer) = if resume_phase == "baseline" {
                (resume_step, resume_opt)
            } else {
                (0, AdamState::default())
            };
            let out = run_phase(
                model,
                train,
                cfg,
                &mut ctx,
                PhaseSpec {
                    name: "baseline",
                    kind,
                    start,
                    steps: cfg.total_steps(),
                    lr: cfg.lr_phase1,
                    optimizer,
                },
            )?;
            finish(model, &classes, &mut ctx, "final", &out)?
        }
    };
    ctx.report.wall_clock_secs = started.elapsed().as_secs_f64();
    if let Some(dir) = out_dir {
        let p = dir.join("report.jsonl");
        fs::write(&p, ctx.report.evals_jsonl()).map_err(io_err(&p))?;
        let p = dir.join("summary.json");
        let summary = serde_json::json!({
            "strategy": cfg.strategy,
            "seed": cfg.seed,
            "total_steps": ctx.report.losses.len(),
            "final_loss": ctx.report.losses.last().map(|l| l.loss),
            "final_eval": ctx.report.evals.last(),
            "phases": ctx.report.phases,
            "wall_clock_secs": ctx.report.wall_clock_secs,
            "checkpoints": ctx.report.checkpoints,
            "final_checkpoint": ctx.report.final_checkpoint,
        });
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        fs::write(&p, text + "\n").map_err(io_err(&p))?;
    }
    Ok(RunOutput {
        report: ctx.report,
        final_checkpoint: final_bytes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_toy, ToySpec};
    use crate::model::ModelConfig;
    use crate::training::checkpoint::load_checkpoint;

    fn tiny_model(seed: u64) -> Model<f32> {
        let mut cfg = ModelConfig::desk(3);
        cfg.clip_len = 512;
        cfg.frontend.width_scale = 0.125;
        cfg.backend.width_scale = 1.0 / 64.0;
        cfg.attention.hidden = 8;
        Model::new(cfg, seed).unwrap()
    }

    fn toy(seed: u64) -> Dataset {
        generate_toy(&ToySpec {
            n_classes: 3,
            n_clips: 12,
            clip_seconds: 0.064,
            sample_rate: 8000,
            seed,
        })
        .unwrap()
    }

    fn cfg(strategy: Strategy) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            steps_phase1: 4,
            steps_phase2: 3,
            seed: 9,
            strategy,
            log_every: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn mix_training_separates_phases() {
        let data = toy(1);
        let dir = tempfile::tempdir().unwrap();
        let mut model = tiny_model(1);
        let out = run_strategy(&mut model, &data, Some(&toy(2)), &cfg(Strategy::MixTraining), Some(dir.path()), None)
            .unwrap();
        let r = &out.report;
        assert_eq!(r.phases.len(), 2);
        let (p1, p2) = (&r.phases[0], &r.phases[1]);
        assert_eq!((p1.name.as_str(), p1.kind, p1.lr), ("phase1", BatchKind::Mixed, 3e-4));
        assert_eq!(p1.stats, PhaseStats { mixed_batches: 4, ..Default::default() });
        assert_eq!((p2.name.as_str(), p2.kind, p2.lr), ("phase2", BatchKind::Raw, 3e-5));
        assert_eq!(p2.stats, PhaseStats { raw_batches: 3, ..Default::default() });

        let theta = load_checkpoint(&dir.path().join("phase1.ckpt")).unwrap();
        assert_eq!(theta.header.phase, "phase1");
        assert_eq!(theta.header.step, 4);
        assert_eq!(p2.start_digest, params_digest(&theta.to_model().unwrap()));
        let end = load_checkpoint(&dir.path().join("phase2.ckpt")).unwrap();
        assert_eq!(params_digest(&end.to_model().unwrap()), params_digest(&model));
        assert_eq!(decode_checkpoint(&out.final_checkpoint).unwrap().header.phase, "phase2");

        assert_eq!(r.losses.len(), 7);
        assert_eq!(r.evals.len(), 2);
        assert!(dir.path().join("report.jsonl").is_file() && dir.path().join("summary.json").is_file());
    }

    #[test]
    fn single_phase_arms_use_their_batch_kind_for_the_whole_budget() {
        let data = toy(1);
        for (strategy, want) in [
            (Strategy::None, PhaseStats { raw_batches: 7, ..Default::default() }),
            (Strategy::MixNoFinetune, PhaseStats { mixed_batches: 7, ..Default::default() }),
            (Strategy::MixupBaseline, PhaseStats { mixup_batches: 7, ..Default::default() }),
        ] {
            let dir = tempfile::tempdir().unwrap();
            let out = run_strategy(&mut tiny_model(1), &data, None, &cfg(strategy), Some(dir.path()), None).unwrap();
            assert_eq!(out.report.phases.len(), 1);
            assert_eq!(out.report.phases[0].stats, want, "{strategy}");
            assert_eq!(out.report.phases[0].lr, 3e-4);
            let ckpts: Vec<_> = fs::read_dir(dir.path())
                .unwrap()
                .map(|e| e.unwrap().file_name().into_string().unwrap())
                .filter(|n| n.ends_with(".ckpt"))
                .collect();
            assert_eq!(ckpts, vec!["final.ckpt".to_string()]);
        }
    }

    #[test]
    fn resume_continues_from_an_intermediate_checkpoint() {
        let data = toy(1);
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg(Strategy::MixTraining);
        c.checkpoint_every = 2;
        run_strategy(&mut tiny_model(1), &data, None, &c, Some(dir.path()), None).unwrap();
        let mid = load_checkpoint(&dir.path().join("phase1_step000002.ckpt")).unwrap();
        assert_eq!(mid.optimizer().unwrap().unwrap().step, 2);

        let dir2 = tempfile::tempdir().unwrap();
        let mut model = tiny_model(77);
        let out = run_strategy(&mut model, &data, None, &c, Some(dir2.path()), Some(&mid)).unwrap();
        let steps: Vec<(String, u64)> = out.report.losses.iter().map(|l| (l.phase.clone(), l.step)).collect();
        assert_eq!(steps.first(), Some(&("phase1".to_string(), 3)));
        assert_eq!(steps.len(), 2 + 3);
        assert_eq!(out.report.phases[0].start_digest, params_digest(&mid.to_model().unwrap()));
    }

    #[test]
    fn prefetching_preserves_batch_order() {
        let data = toy(1);
        let mut serial = cfg(Strategy::MixTraining);
        serial.deterministic = true;
        let mut threaded = serial.clone();
        threaded.deterministic = false;
        threaded.workers = 3;
        let a = run_strategy(&mut tiny_model(4), &data, None, &serial, None, None).unwrap();
        let b = run_strategy(&mut tiny_model(4), &data, None, &threaded, None, None).unwrap();
        assert_eq!(a.report.loss_trace(), b.report.loss_trace());
        assert_eq!(a.final_checkpoint, b.final_checkpoint);
    }
}
