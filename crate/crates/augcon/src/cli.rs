//! Command line entry point wiring the library into reproducible runs.
//!
//! Every command accepts an optional flat JSON config file (`--config`),
//! applies explicit flag overrides on top, and writes the fully resolved
//! settings to `resolved_config.json` in its output directory. Exit codes:
//! 0 success, 1 runtime failure, 2 usage or config error. `--threads 1`
//! (the default) is the reproducibility mode: identical resolved configs
//! then produce byte-identical checkpoints and metrics.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::augment::{
    augment_anchor, augment_positive, synth_rir, AugmentConfig, Rir, Strategy,
};
use crate::dsp::{MelConfig, MelFrontend};
use crate::eval::{evaluate, write_confusion_csv, write_normalized_csv, MetricsReport};
use crate::io::{
    generate_synthetic_corpus, load_wav, read_manifest, AudioClip, CorpusSpec, ManifestEntry,
    Split,
};
use crate::model::{composed_graph_check, ModelConfig};
use crate::tensor::gradcheck::primitive_battery;
use crate::train::{
    finetune, linear_probe, pretrain, save_checkpoint, Checkpoint, StepLog, TrainConfig,
};
use crate::{Error, Result};

/// Runs the CLI and returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("augcon: error: {e}");
            exit_code(&e)
        }
    }
}

/// Usage and config problems exit 2; failures inside a valid run exit 1.
fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_)
        | Error::MissingFile(_)
        | Error::ManifestParse { .. }
        | Error::MalformedWav(_)
        | Error::UnsupportedFormat(_)
        | Error::MalformedBlob(_)
        | Error::CorruptCheckpoint(_)
        | Error::VersionMismatch { .. }
        | Error::OutOfRangeLabel { .. }
        | Error::MissingLabels(_)
        | Error::InsufficientData(_)
        | Error::ClipTooShort(_)
        | Error::BatchTooSmall { .. }
        | Error::InvalidRt60(_)
        | Error::InvalidRange(_)
        | Error::SampleRateMismatch(..)
        | Error::EmptyMatrix => 2,
        _ => 1,
    }
}

#[derive(Parser)]
#[command(
    name = "augcon",
    version,
    about = "Augmented contrastive audio pretraining, transfer, and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled corpus with a JSONL manifest.
    SynthData(SynthDataCmd),
    /// Contrastive pretraining on the manifest's unlabeled split.
    Pretrain(PretrainCmd),
    /// Train a linear classifier on frozen pretrained embeddings.
    Probe(TransferCmd),
    /// Train encoder and classifier together on the labeled split.
    Finetune(TransferCmd),
    /// Evaluate a checkpoint on the manifest's test split.
    Evaluate(EvaluateCmd),
    /// Run all five strategies through pretrain, probe, and finetune.
    Ablation(AblationCmd),
    /// Write anchor/positive mel blobs for one clip.
    AugmentPreview(AugmentPreviewCmd),
    /// Finite-difference checks of every op and the composed graph.
    GradCheck,
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::SynthData(cmd) => run_synth_data(cmd),
        Command::Pretrain(cmd) => run_pretrain(cmd),
        Command::Probe(cmd) => run_transfer(cmd, Transfer::Probe),
        Command::Finetune(cmd) => run_transfer(cmd, Transfer::Finetune),
        Command::Evaluate(cmd) => run_evaluate(cmd),
        Command::Ablation(cmd) => run_ablation(cmd),
        Command::AugmentPreview(cmd) => run_augment_preview(cmd),
        Command::GradCheck => run_grad_check(),
    }
}

// ---------------------------------------------------------------- plumbing

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingFile(path.to_path_buf()))
    }
}

/// Loads a flat JSON settings file, or the defaults when none is given.
fn load_settings<S: DeserializeOwned + Default>(config: Option<&Path>) -> Result<S> {
    let Some(path) = config else {
        return Ok(S::default());
    };
    require_file(path)?;
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

fn write_resolved(out_dir: &Path, settings: &impl Serialize) -> Result<()> {
    let json = serde_json::to_string_pretty(settings)?;
    fs::write(out_dir.join("resolved_config.json"), json + "\n")?;
    Ok(())
}

fn write_step_log(path: &Path, logs: &[StepLog]) -> Result<()> {
    let mut text = String::new();
    for log in logs {
        text.push_str(&serde_json::to_string(log)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn init_thread_pool(threads: usize) -> Result<()> {
    if threads == 0 {
        return Err(Error::InvalidConfig("threads must be at least 1".into()));
    }
    // A second initialization in the same process is harmless; keep the
    // first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

fn read_manifest_checked(path: &Path) -> Result<Vec<ManifestEntry>> {
    require_file(path)?;
    read_manifest(path)
}

fn load_clips(entries: &[ManifestEntry], manifest: &Path, split: Split) -> Result<Vec<AudioClip>> {
    entries
        .iter()
        .filter(|e| e.split == split)
        .map(|e| {
            let path = e.resolve(manifest);
            require_file(&path)?;
            load_wav(&path)
        })
        .collect()
}

fn load_labeled(
    entries: &[ManifestEntry],
    manifest: &Path,
    split: Split,
) -> Result<Vec<(AudioClip, usize)>> {
    entries
        .iter()
        .filter(|e| e.split == split)
        .map(|e| {
            let label = e.label.ok_or_else(|| {
                Error::MissingLabels(format!("{} entry {} has no label", split, e.path))
            })?;
            let path = e.resolve(manifest);
            require_file(&path)?;
            Ok((load_wav(&path)?, label))
        })
        .collect()
}

fn infer_n_classes(entries: &[ManifestEntry]) -> Result<usize> {
    entries
        .iter()
        .filter_map(|e| e.label)
        .max()
        .map(|m| m + 1)
        .ok_or_else(|| {
            Error::MissingLabels("manifest has no labeled entries to infer n_classes from".into())
        })
}

const RIR_BANK_SIZE: usize = 8;
/// Stream id for bank synthesis, clear of the training streams.
const RIR_STREAM: u64 = u64::MAX - 2;

/// Loads a bank from a directory of WAVs (sorted by name), or synthesizes
/// a deterministic 8-RIR bank when no directory is given.
fn build_rir_bank(dir: Option<&Path>, sample_rate: u32, seed: u64) -> Result<Vec<Rir>> {
    let Some(dir) = dir else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(RIR_STREAM);
        return (0..RIR_BANK_SIZE)
            .map(|_| {
                let rt60 = rand::Rng::random_range(&mut rng, 0.1..0.5);
                synth_rir(rt60, sample_rate, &mut rng)
            })
            .collect();
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|entry| {
            let path = entry.ok()?.path();
            (path.extension().is_some_and(|e| e == "wav")).then_some(path)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no .wav files in RIR directory {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| Rir::from_clip(&load_wav(p)?)).collect()
}

fn strategy_augment(
    strategy: &str,
    rir_dir: Option<&Path>,
    sample_rate: u32,
    seed: u64,
) -> Result<AugmentConfig> {
    let strategy = Strategy::from_str(strategy)?;
    let mut cfg = AugmentConfig::default();
    strategy.configure(&mut cfg);
    if cfg.rir {
        cfg.rir_bank = build_rir_bank(rir_dir, sample_rate, seed)?;
    }
    Ok(cfg)
}

fn write_metrics(out_dir: &Path, report: &MetricsReport, cm: &crate::eval::ConfusionMatrix) -> Result<()> {
    report.write_json(&out_dir.join("metrics.json"))?;
    write_confusion_csv(&out_dir.join("confusion.csv"), cm)?;
    write_normalized_csv(&out_dir.join("confusion_normalized.csv"), cm)?;
    Ok(())
}

// -------------------------------------------------------------- synth-data

#[derive(Args)]
struct SynthDataCmd {
    /// Output directory for WAVs and manifest.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Flat JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of classes [default: 4]
    #[arg(long)]
    classes: Option<usize>,
    /// Clips per class [default: 30]
    #[arg(long)]
    clips_per_class: Option<usize>,
    /// Clip length in seconds [default: 10]
    #[arg(long)]
    clip_seconds: Option<f64>,
    /// Sample rate in Hz [default: 16000]
    #[arg(long)]
    sample_rate: Option<u32>,
    /// RNG seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

fn run_synth_data(cmd: SynthDataCmd) -> Result<()> {
    let mut spec: CorpusSpec = load_settings(cmd.config.as_deref())?;
    if let Some(v) = cmd.classes {
        spec.n_classes = v;
    }
    if let Some(v) = cmd.clips_per_class {
        spec.clips_per_class = v;
    }
    if let Some(v) = cmd.clip_seconds {
        spec.clip_seconds = v;
    }
    if let Some(v) = cmd.sample_rate {
        spec.sample_rate = v;
    }
    if let Some(v) = cmd.seed {
        spec.seed = v;
    }
    let entries = generate_synthetic_corpus(&spec, &cmd.out)?;
    write_resolved(&cmd.out, &spec)?;
    println!(
        "wrote {} clips across {} classes to {}",
        entries.len(),
        spec.n_classes,
        cmd.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- pretrain

#[derive(Args)]
struct PretrainCmd {
    /// Manifest JSONL describing the corpus.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for the run.
    #[arg(long)]
    out: PathBuf,
    /// Flat JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Augmentation strategy: noise, stretch, rir, mask, or stretch+mask
    /// [default: stretch+mask]
    #[arg(long)]
    strategy: Option<String>,
    /// Optimizer steps [default: 2000]
    #[arg(long)]
    steps: Option<usize>,
    /// Contrastive batch size [default: 16]
    #[arg(long)]
    batch: Option<usize>,
    /// RNG seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    lr: Option<f64>,
    /// Snapshot a checkpoint every N steps; 0 disables [default: 0]
    #[arg(long)]
    checkpoint_interval: Option<usize>,
    /// Directory of RIR WAVs for the rir strategy (synthesized when omitted)
    #[arg(long)]
    rir_dir: Option<PathBuf>,
    /// Worker threads; 1 is the reproducibility mode [default: 1]
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PretrainSettings {
    seed: u64,
    steps: usize,
    batch_size: usize,
    lr: f64,
    checkpoint_interval: usize,
    strategy: String,
    /// 0 means infer from the manifest's labeled entries.
    n_classes: usize,
    threads: usize,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            checkpoint_interval: 0,
            strategy: Strategy::StretchMask.name().into(),
            n_classes: 0,
            threads: 1,
        }
    }
}

fn run_pretrain(cmd: PretrainCmd) -> Result<()> {
    let mut s: PretrainSettings = load_settings(cmd.config.as_deref())?;
    if let Some(v) = cmd.strategy {
        s.strategy = v;
    }
    if let Some(v) = cmd.steps {
        s.steps = v;
    }
    if let Some(v) = cmd.batch {
        s.batch_size = v;
    }
    if let Some(v) = cmd.seed {
        s.seed = v;
    }
    if let Some(v) = cmd.lr {
        s.lr = v;
    }
    if let Some(v) = cmd.checkpoint_interval {
        s.checkpoint_interval = v;
    }
    if let Some(v) = cmd.threads {
        s.threads = v;
    }
    init_thread_pool(s.threads)?;

    let entries = read_manifest_checked(&cmd.manifest)?;
    let clips = load_clips(&entries, &cmd.manifest, Split::Pretrain)?;
    if clips.is_empty() {
        return Err(Error::InsufficientData(
            "manifest has no pretrain split clips".into(),
        ));
    }
    let n_classes = if s.n_classes > 0 { s.n_classes } else { infer_n_classes(&entries)? };
    let sample_rate = clips[0].sample_rate();

    let augment = strategy_augment(&s.strategy, cmd.rir_dir.as_deref(), sample_rate, s.seed)?;
    let mut cfg = TrainConfig::new(s.seed);
    cfg.batch_size = s.batch_size;
    cfg.steps = s.steps;
    cfg.lr = s.lr;
    cfg.checkpoint_interval = s.checkpoint_interval;
    cfg.augment = augment;

    fs::create_dir_all(&cmd.out)?;
    let out = cmd.out.clone();
    let snapshot_augment = cfg.augment.clone();
    let (params, logs) = pretrain(
        &clips,
        ModelConfig::desk_default(n_classes),
        &cfg,
        |step, params| {
            let ckpt = Checkpoint {
                params: params.clone(),
                augment: snapshot_augment.clone(),
                step: step as u64,
                seed: s.seed,
            };
            save_checkpoint(&ckpt, &out.join(format!("checkpoint_step{step:06}.aclc")))
        },
    )?;

    let ckpt = Checkpoint {
        params,
        augment: cfg.augment.clone(),
        step: s.steps as u64,
        seed: s.seed,
    };
    let ckpt_path = cmd.out.join("checkpoint.aclc");
    save_checkpoint(&ckpt, &ckpt_path)?;
    write_step_log(&cmd.out.join("pretrain_log.jsonl"), &logs)?;
    write_resolved(&cmd.out, &s)?;
    let final_loss = logs.last().map(|l| l.loss).unwrap_or(f64::NAN);
    println!(
        "pretrained {} steps with strategy {} (final loss {final_loss:.4}) -> {}",
        s.steps,
        s.strategy,
        ckpt_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------- probe/finetune

#[derive(Clone, Copy)]
enum Transfer {
    Probe,
    Finetune,
}

impl Transfer {
    fn name(self) -> &'static str {
        match self {
            Transfer::Probe => "probe",
            Transfer::Finetune => "finetune",
        }
    }
}

#[derive(Args)]
struct TransferCmd {
    /// Pretrained checkpoint (.aclc with its .json sidecar).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest JSONL describing the corpus.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for the run.
    #[arg(long)]
    out: PathBuf,
    /// Flat JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Epochs over the labeled train split [default: 30]
    #[arg(long)]
    epochs: Option<usize>,
    /// Minibatch size [default: 16]
    #[arg(long)]
    batch: Option<usize>,
    /// RNG seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    lr: Option<f64>,
    /// Worker threads; 1 is the reproducibility mode [default: 1]
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TransferSettings {
    seed: u64,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    threads: usize,
}

impl Default for TransferSettings {
    fn default() -> Self {
        Self { seed: 0, epochs: 30, batch_size: 16, lr: 1e-3, threads: 1 }
    }
}

fn run_transfer(cmd: TransferCmd, mode: Transfer) -> Result<()> {
    let mut s: TransferSettings = load_settings(cmd.config.as_deref())?;
    if let Some(v) = cmd.epochs {
        s.epochs = v;
    }
    if let Some(v) = cmd.batch {
        s.batch_size = v;
    }
    if let Some(v) = cmd.seed {
        s.seed = v;
    }
    if let Some(v) = cmd.lr {
        s.lr = v;
    }
    if let Some(v) = cmd.threads {
        s.threads = v;
    }
    init_thread_pool(s.threads)?;

    let ckpt = crate::train::load_checkpoint(&cmd.checkpoint)?;
    let entries = read_manifest_checked(&cmd.manifest)?;
    let train_items = load_labeled(&entries, &cmd.manifest, Split::Train)?;

    let mut cfg = TrainConfig::new(s.seed);
    cfg.batch_size = s.batch_size;
    cfg.epochs = s.epochs;
    cfg.lr = s.lr;

    let (trained, logs) = match mode {
        Transfer::Probe => linear_probe(&ckpt.params, &train_items, &cfg)?,
        Transfer::Finetune => finetune(&ckpt.params, &train_items, &cfg)?,
    };

    let test_items = load_labeled(&entries, &cmd.manifest, Split::Test)?;
    let (report, cm) = evaluate(&trained, &test_items)?;

    fs::create_dir_all(&cmd.out)?;
    let out_ckpt = Checkpoint {
        params: trained,
        augment: ckpt.augment.clone(),
        step: logs.len() as u64,
        seed: s.seed,
    };
    save_checkpoint(&out_ckpt, &cmd.out.join("checkpoint.aclc"))?;
    write_metrics(&cmd.out, &report, &cm)?;
    write_step_log(&cmd.out.join("train_log.jsonl"), &logs)?;
    write_resolved(&cmd.out, &s)?;
    println!(
        "{} macro-F1 {:.4}, wAP {:.4} on {} test clips -> {}",
        mode.name(),
        report.macro_f1,
        report.wap,
        report.n_eval,
        cmd.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- evaluate

#[derive(Args)]
struct EvaluateCmd {
    /// Checkpoint to evaluate (.aclc with its .json sidecar).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest JSONL describing the corpus.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for metrics and confusion CSVs.
    #[arg(long)]
    out: PathBuf,
    /// Flat JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads; 1 is the reproducibility mode [default: 1]
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvaluateSettings {
    threads: usize,
}

impl Default for EvaluateSettings {
    fn default() -> Self {
        Self { threads: 1 }
    }
}

fn run_evaluate(cmd: EvaluateCmd) -> Result<()> {
    let mut s: EvaluateSettings = load_settings(cmd.config.as_deref())?;
    if let Some(v) = cmd.threads {
        s.threads = v;
    }
    init_thread_pool(s.threads)?;

    let ckpt = crate::train::load_checkpoint(&cmd.checkpoint)?;
    let entries = read_manifest_checked(&cmd.manifest)?;
    let test_items = load_labeled(&entries, &cmd.manifest, Split::Test)?;
    let (report, cm) = evaluate(&ckpt.params, &test_items)?;

    fs::create_dir_all(&cmd.out)?;
    write_metrics(&cmd.out, &report, &cm)?;
    write_resolved(&cmd.out, &s)?;
    println!(
        "macro-F1 {:.4}, wAP {:.4} on {} test clips -> {}",
        report.macro_f1,
        report.wap,
        report.n_eval,
        cmd.out.join("metrics.json").display()
    );
    Ok(())
}

// ---------------------------------------------------------------- ablation

#[derive(Args)]
struct AblationCmd {
    /// Manifest JSONL describing the corpus.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory; each strategy gets a subdirectory.
    #[arg(long)]
    out: PathBuf,
    /// Flat JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pretraining steps per strategy [default: 2000]
    #[arg(long)]
    steps: Option<usize>,
    /// Transfer epochs [default: 30]
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size for pretraining and transfer [default: 16]
    #[arg(long)]
    batch: Option<usize>,
    /// RNG seed shared by all strategies [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    lr: Option<f64>,
    /// Directory of RIR WAVs for the rir strategy (synthesized when omitted)
    #[arg(long)]
    rir_dir: Option<PathBuf>,
    /// Worker threads; 1 is the reproducibility mode [default: 1]
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AblationSettings {
    seed: u64,
    steps: usize,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    threads: usize,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self { seed: 0, steps: 2000, epochs: 30, batch_size: 16, lr: 1e-3, threads: 1 }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AblationRow {
    strategy: String,
    probe_macro_f1: f64,
    probe_wap: f64,
    finetune_macro_f1: f64,
    finetune_wap: f64,
}

fn run_ablation(cmd: AblationCmd) -> Result<()> {
    let mut s: AblationSettings = load_settings(cmd.config.as_deref())?;
    if let Some(v) = cmd.steps {
        s.steps = v;
    }
    if let Some(v) = cmd.epochs {
        s.epochs = v;
    }
    if let Some(v) = cmd.batch {
        s.batch_size = v;
    }
    if let Some(v) = cmd.seed {
        s.seed = v;
    }
    if let Some(v) = cmd.lr {
        s.lr = v;
    }
    if let Some(v) = cmd.threads {
        s.threads = v;
    }
    init_thread_pool(s.threads)?;

    let entries = read_manifest_checked(&cmd.manifest)?;
    let clips = load_clips(&entries, &cmd.manifest, Split::Pretrain)?;
    if clips.is_empty() {
        return Err(Error::InsufficientData(
            "manifest has no pretrain split clips".into(),
        ));
    }
    let train_items = load_labeled(&entries, &cmd.manifest, Split::Train)?;
    let test_items = load_labeled(&entries, &cmd.manifest, Split::Test)?;
    let n_classes = infer_n_classes(&entries)?;
    let sample_rate = clips[0].sample_rate();
    fs::create_dir_all(&cmd.out)?;

    let mut rows = Vec::with_capacity(Strategy::ALL.len());
    for strategy in Strategy::ALL {
        let sub = cmd.out.join(strategy.name());
        fs::create_dir_all(&sub)?;

        let augment =
            strategy_augment(strategy.name(), cmd.rir_dir.as_deref(), sample_rate, s.seed)?;
        let mut cfg = TrainConfig::new(s.seed);
        cfg.batch_size = s.batch_size;
        cfg.steps = s.steps;
        cfg.epochs = s.epochs;
        cfg.lr = s.lr;
        cfg.augment = augment;

        let (params, _) =
            pretrain(&clips, ModelConfig::desk_default(n_classes), &cfg, |_, _| Ok(()))?;
        let ckpt = Checkpoint {
            params: params.clone(),
            augment: cfg.augment.clone(),
            step: s.steps as u64,
            seed: s.seed,
        };
        save_checkpoint(&ckpt, &sub.join("checkpoint.aclc"))?;

        let (probed, _) = linear_probe(&params, &train_items, &cfg)?;
        let (probe_report, _) = evaluate(&probed, &test_items)?;
        probe_report.write_json(&sub.join("probe_metrics.json"))?;

        let (tuned, _) = finetune(&params, &train_items, &cfg)?;
        let (finetune_report, _) = evaluate(&tuned, &test_items)?;
        finetune_report.write_json(&sub.join("finetune_metrics.json"))?;

        rows.push(AblationRow {
            strategy: strategy.name().into(),
            probe_macro_f1: probe_report.macro_f1,
            probe_wap: probe_report.wap,
            finetune_macro_f1: finetune_report.macro_f1,
            finetune_wap: finetune_report.wap,
        });
    }

    fs::write(
        cmd.out.join("ablation.json"),
        serde_json::to_string_pretty(&rows)? + "\n",
    )?;
    write_resolved(&cmd.out, &s)?;

    println!("{:<14} {:>9} {:>9} {:>12} {:>12}", "strategy", "probe-F1", "probe-wAP", "finetune-F1", "finetune-wAP");
    for row in &rows {
        println!(
            "{:<14} {:>9.4} {:>9.4} {:>12.4} {:>12.4}",
            row.strategy,
            row.probe_macro_f1,
            row.probe_wap,
            row.finetune_macro_f1,
            row.finetune_wap
        );
    }
    println!("-> {}", cmd.out.join("ablation.json").display());
    Ok(())
}

// --------------------------------------------------------- augment-preview

#[derive(Args)]
struct AugmentPreviewCmd {
    /// Input WAV file (at least two seconds long).
    #[arg(long)]
    wav: PathBuf,
    /// Output directory for anchor.mels and positive.mels.
    #[arg(long)]
    out: PathBuf,
    /// Flat JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Augmentation strategy: noise, stretch, rir, mask, or stretch+mask
    /// [default: stretch+mask]
    #[arg(long)]
    strategy: Option<String>,
    /// RNG seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Directory of RIR WAVs for the rir strategy (synthesized when omitted)
    #[arg(long)]
    rir_dir: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PreviewSettings {
    seed: u64,
    strategy: String,
}

impl Default for PreviewSettings {
    fn default() -> Self {
        Self { seed: 0, strategy: Strategy::StretchMask.name().into() }
    }
}

fn run_augment_preview(cmd: AugmentPreviewCmd) -> Result<()> {
    let mut s: PreviewSettings = load_settings(cmd.config.as_deref())?;
    if let Some(v) = cmd.strategy {
        s.strategy = v;
    }
    if let Some(v) = cmd.seed {
        s.seed = v;
    }

    require_file(&cmd.wav)?;
    let clip = load_wav(&cmd.wav)?;
    let augment = strategy_augment(&s.strategy, cmd.rir_dir.as_deref(), clip.sample_rate(), s.seed)?;
    let frontend = MelFrontend::new(MelConfig::default(), clip.sample_rate())?;
    augment.validate(frontend.config().frames, frontend.config().n_mels)?;

    // Same draw order as row 0 of a training batch.
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    rng.set_stream(0);
    let anchor = augment_anchor(&clip, &augment, &frontend, &mut rng)?;
    let positive = augment_positive(&clip, &augment, &frontend, &mut rng)?;

    fs::create_dir_all(&cmd.out)?;
    let anchor_path = cmd.out.join("anchor.mels");
    let positive_path = cmd.out.join("positive.mels");
    anchor.write_blob(fs::File::create(&anchor_path)?)?;
    positive.write_blob(fs::File::create(&positive_path)?)?;
    write_resolved(&cmd.out, &s)?;
    println!("wrote {} and {}", anchor_path.display(), positive_path.display());
    Ok(())
}

// -------------------------------------------------------------- grad-check

fn run_grad_check() -> Result<()> {
    let mut reports = primitive_battery()?;
    reports.push(composed_graph_check()?);

    let mut worst: Option<&crate::tensor::gradcheck::CheckReport> = None;
    let mut failed = None;
    for report in &reports {
        let status = if report.passed() { "PASS" } else { "FAIL" };
        println!(
            "{:<28} max_rel_err {:>10.3e}  tol {:.0e}  {status}",
            report.name, report.max_rel_err, report.tolerance
        );
        if worst.is_none_or(|w| report.max_rel_err > w.max_rel_err) {
            worst = Some(report);
        }
        if !report.passed() && failed.is_none() {
            failed = Some(report);
        }
    }
    if let Some(w) = worst {
        println!("max relative error {:.3e} over {} checks", w.max_rel_err, reports.len());
    }
    match failed {
        None => Ok(()),
        Some(report) => Err(Error::GradCheckFailed {
            name: report.name.to_string(),
            max_rel_err: report.max_rel_err,
            tolerance: report.tolerance,
        }),
    }
}
