//! Command-line front end: `synth-data`, `train`, `eval`, `predict`.
//!
//! Exit codes are 0 on success, 1 on runtime failure and 2 on usage errors.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::builder::TypedValueParser;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use wavetag::audio_io::{self, DEFAULT_SAMPLE_RATE};
use wavetag::dataset::{make_toy_dataset, Dataset, LabelVocabulary, ToySpec};
use wavetag::diffops::{Mode, Tensor};
use wavetag::model::{Model, ModelConfig};
use wavetag::training::{self, load_checkpoint, run_strategy, Strategy, TrainConfig};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "wavetag", version, about = "Raw-waveform audio tagging with mix-training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic tone dataset.
    SynthData(SynthArgs),
    /// Train a model from a JSON config.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Rank classes for one WAV file.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct Shared {
    /// Seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Single worker and fixed reduction order.
    #[arg(long)]
    pub deterministic: bool,
    /// Batch-preparation threads.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(2..))]
    pub classes: u64,
    #[arg(long, default_value_t = 512)]
    pub clips: usize,
    /// Also write a held-out set of this many clips under `OUT/eval`.
    #[arg(long, default_value_t = 0)]
    pub eval_clips: usize,
    #[arg(long, default_value_t = 1.0)]
    pub seconds: f64,
    #[arg(long, default_value_t = DEFAULT_SAMPLE_RATE)]
    pub rate: u32,
    #[command(flatten)]
    pub shared: Shared,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_parser = strategy_parser())]
    pub strategy: Option<Strategy>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Run directory for checkpoints, reports and the resolved config.
    #[arg(long)]
    pub out: PathBuf,
    /// Accept a resume checkpoint written for another model configuration.
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub shared: Shared,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory for `eval_report.json` and the resolved settings.
    #[arg(long)]
    pub out: PathBuf,
    /// Vocabulary file; defaults to the classes stored in the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SAMPLE_RATE)]
    pub rate: u32,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch_size: u64,
    #[command(flatten)]
    pub shared: Shared,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub wav: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    #[arg(long, default_value_t = DEFAULT_SAMPLE_RATE)]
    pub rate: u32,
}

fn strategy_parser() -> impl TypedValueParser<Value = Strategy> {
    clap::builder::PossibleValuesParser::new(Strategy::ALL.map(Strategy::as_str))
        .map(|s| s.parse::<Strategy>().expect("listed strategies parse"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train_manifest: PathBuf,
    pub eval_manifest: Option<PathBuf>,
    /// Defaults to `vocab.txt` next to the training manifest.
    pub vocab: Option<PathBuf>,
    pub sample_rate: u32,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train_manifest: PathBuf::from("manifest.jsonl"),
            eval_manifest: None,
            vocab: None,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { batch_size: 32 }
    }
}

/// The training config file. A missing `model` section selects the desk
/// preset; `model.n_classes` is always set from the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.data.train_manifest);
        cfg.data.eval_manifest.as_mut().map(resolve);
        cfg.data.vocab.as_mut().map(resolve);
        Ok(cfg)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let seed = a.shared.seed.unwrap_or(0);
    let spec = ToySpec {
        n_classes: a.classes as usize,
        n_clips: a.clips,
        clip_seconds: a.seconds,
        sample_rate: a.rate,
        seed,
    };
    spec.validate()?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    make_toy_dataset(&a.out, &spec)?;
    let mut resolved = serde_json::json!({ "train": spec });
    if a.eval_clips > 0 {
        let eval = ToySpec {
            n_clips: a.eval_clips,
            seed: seed.wrapping_add(1),
            ..spec.clone()
        };
        make_toy_dataset(&a.out.join("eval"), &eval)?;
        resolved["eval"] = serde_json::to_value(&eval)?;
    }
    write_json(&a.out.join("synth_config.json"), &resolved)?;
    log::info!("wrote {} clips to {}", a.clips, a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.strategy {
        cfg.train.strategy = s;
    }
    if let Some(s) = a.shared.seed {
        cfg.train.seed = s;
    }
    if a.shared.deterministic {
        cfg.train.deterministic = true;
        cfg.train.workers = 1;
    } else if let Some(w) = a.shared.workers {
        cfg.train.workers = w;
    }
    cfg.train.validate()?;
    let vocab_path = cfg
        .data
        .vocab
        .clone()
        .unwrap_or_else(|| cfg.data.train_manifest.parent().unwrap_or(Path::new("")).join("vocab.txt"));
    let vocab = LabelVocabulary::load(&vocab_path)?;
    let mut model_cfg = cfg.model.clone().unwrap_or_else(|| ModelConfig::desk(vocab.len()));
    model_cfg.n_classes = vocab.len();
    model_cfg.validate()?;
    cfg.model = Some(model_cfg.clone());
    let out = a.out.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("resolved_config.json"), &cfg)?;

    let rate = cfg.data.sample_rate;
    let train = Dataset::load_with(&cfg.data.train_manifest, vocab.clone(), rate, model_cfg.clip_len)?;
    let eval = match &cfg.data.eval_manifest {
        Some(m) => Some(Dataset::load_with(m, vocab, rate, model_cfg.clip_len)?),
        None => None,
    };
    let mut model = Model::<f32>::new(model_cfg, cfg.train.seed)?;
    let resume = match &a.resume {
        Some(p) => {
            let ck = load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
            ck.apply(&mut model, a.force)?;
            Some(ck)
        }
        None => None,
    };
    let run = run_strategy(&mut model, &train, eval.as_ref(), &cfg.train, Some(&out), resume.as_ref())?;
    log::info!(
        "finished {} steps in {:.1}s; checkpoint {}",
        run.report.losses.len(),
        run.report.wall_clock_secs,
        run.report.final_checkpoint.as_deref().unwrap_or(Path::new("-")).display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<(Model<f32>, Vec<String>)> {
    let ck = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let model = ck.to_model()?;
    Ok((model, ck.header.configs.classes))
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let (mut model, classes) = load_model(&a.checkpoint)?;
    let vocab = match &a.vocab {
        Some(p) => LabelVocabulary::load(p)?,
        None => LabelVocabulary::new(classes)?,
    };
    if vocab.len() != model.config().n_classes {
        bail!(
            "vocabulary has {} classes but the checkpoint predicts {}",
            vocab.len(),
            model.config().n_classes
        );
    }
    let clip_len = model.config().clip_len;
    let data = Dataset::load_with(&a.manifest, vocab, a.rate, clip_len)?;
    let report = training::evaluate(&mut model, &data, a.batch_size as usize)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let resolved = serde_json::json!({
        "checkpoint": a.checkpoint,
        "manifest": a.manifest,
        "vocab": a.vocab,
        "sample_rate": a.rate,
        "batch_size": a.batch_size,
        "seed": a.shared.seed.unwrap_or(0),
        "deterministic": a.shared.deterministic,
    });
    write_json(&a.out.join("eval_config.json"), &resolved)?;
    write_json(&a.out.join("eval_report.json"), &report)?;
    log::info!("mAP {:.4} AUC {:.4} on {} clips", report.map, report.auc, report.n_examples);
    Ok(())
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let (mut model, classes) = load_model(&a.checkpoint)?;
    let wav = audio_io::read_wav(&a.wav)?;
    let clip_len = model.config().clip_len;
    let w = audio_io::prepare(&wav, a.rate, clip_len)?;
    let x = Tensor::from_vec(&[1, 1, clip_len], w.samples)?;
    let probs = model.forward(&x, Mode::Eval)?.fused.into_data();
    let mut ranked: Vec<(usize, f32)> = probs.into_iter().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for (c, p) in ranked.into_iter().take(a.top) {
        println!("{}\t{p:.6}", classes[c]);
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::SynthData(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
    }
}

/// Parses `std::env::args`, runs, and returns the process exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}
