//! Command-line front end. The `kilosound` binary only calls [`main`].

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::distill::{distill_run, export_student, write_curve_csv, DistillConfig};
use crate::dsp::{
    cnc_mode_specs, labelled_corpus, load_wav, resample, segment_clips, synthetic_corpus, AudioClip, FrontEnd,
    LogMelSpectrogram, SAMPLE_RATE,
};
use crate::error::{bail, Result};
use crate::finetune::{
    evaluate, finetune, load_manifest_clips, read_manifest, spectrograms, FinetuneConfig, LabeledClip, ModeTaxonomy,
};
use crate::gridsearch::{
    enumerate_grid, run_grid, select_config, write_results_csv, CorpusSuite, GridSpec, SelectionPolicy, Task,
    TrialOptions,
};
use crate::model::{
    backbone_from_checkpoint, save_backbone, Backbone, Checkpoint, CheckpointConfig, CheckpointKind, Classifier,
    CountScope, MlpHead, ModelConfig,
};
use crate::nn::{Parameters, Prng};
use crate::pretrain::{pretrain_run, write_loss_csv, PretrainConfig, StudentTeacherPair};
use crate::runtime::{
    bench, monitor, stdout_sink, write_latency_csv, ClipSource, EventSink, InferenceEngine, MonitorOptions,
    Publisher, TcpSink, BUDGET_MS,
};

#[derive(Parser, Debug)]
#[command(name = "kilosound", version, about = "Tiny spectrogram transformers for machine-sound monitoring")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Seed for every random choice the command makes.
    #[arg(long, default_value_t = 0, global = true)]
    pub seed: u64,
    /// JSON file with the command's settings (missing fields take defaults).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Input checkpoint.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Output path.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct CorpusArgs {
    /// Directory of WAV recordings (cut into one-second clips).
    #[arg(long)]
    pub audio: Option<PathBuf>,
    /// Number of synthetic clips when no audio directory is given.
    #[arg(long, default_value_t = 64)]
    pub clips: usize,
}

#[derive(Args, Debug, Clone)]
pub struct LabeledArgs {
    /// JSON-lines manifest of {"path", "offset_s", "mode"} entries.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Synthetic clips per mode when no manifest is given.
    #[arg(long, default_value_t = 20)]
    pub per_mode: usize,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Masked student–teacher pretraining.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArgs,
    },
    /// Distill a small student from a parent checkpoint.
    Distill {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Held-out clips for per-epoch agreement.
        #[arg(long, default_value_t = 32)]
        heldout: usize,
    },
    /// Train a classification head (and backbone) on labelled clips.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: LabeledArgs,
    },
    /// Score a classifier checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: LabeledArgs,
    },
    /// Run a configuration grid and select a model.
    Gridsearch {
        #[command(flatten)]
        common: Common,
        /// `parent` (I-prefixed configs) or `child` (L-prefixed configs).
        #[arg(long, default_value = "child")]
        family: String,
        /// Directory holding one JSON file per completed trial.
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Time end-to-end inference over synthetic clips.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 300)]
        clips: usize,
        /// Per-clip latency CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = BUDGET_MS)]
        budget_ms: f64,
    },
    /// Classify a live stream and publish NDJSON events.
    Monitor {
        #[command(flatten)]
        common: Common,
        /// WAV file source.
        #[arg(long, conflicts_with = "pcm")]
        wav: Option<PathBuf>,
        /// Raw s16le 48 kHz mono from a file or `-` for stdin.
        #[arg(long)]
        pcm: Option<String>,
        /// TCP sink `host:port`; repeatable.
        #[arg(long)]
        tcp: Vec<String>,
        /// Do not print events on stdout.
        #[arg(long)]
        quiet: bool,
        #[arg(long, default_value_t = 4)]
        capacity: usize,
        /// Delay between clips read from a WAV file (real time by default).
        #[arg(long, default_value_t = 1000)]
        pace_ms: u64,
        #[arg(long, default_value_t = BUDGET_MS)]
        budget_ms: f64,
    },
    /// Rewrite a checkpoint in deployable form and report its size.
    Export {
        #[command(flatten)]
        common: Common,
    },
}

/// Settings read from `--config` for `pretrain`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainJob {
    pub model: ModelConfig,
    pub train: PretrainConfig,
}

impl Default for PretrainJob {
    fn default() -> Self {
        Self { model: ModelConfig::parent(64, 4), train: PretrainConfig::default() }
    }
}

/// Settings read from `--config` for `gridsearch`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GridJob {
    pub finetune: FinetuneConfig,
    pub train_per_mode: usize,
    pub test_per_mode: usize,
    pub epsilon: Option<f64>,
    pub latency_runs: usize,
}

impl Default for GridJob {
    fn default() -> Self {
        Self {
            finetune: FinetuneConfig { epochs: 20, ..Default::default() },
            train_per_mode: 8,
            test_per_mode: 4,
            epsilon: None,
            latency_runs: 10,
        }
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => Ok(serde_json::from_slice(&fs::read(p)?)?),
        None => Ok(T::default()),
    }
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    match p {
        Some(p) => Ok(p),
        None => bail!(Config, "--{what} is required"),
    }
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    out.sort();
    Ok(out)
}

/// One-second clips from a directory of recordings or a synthetic corpus.
pub fn corpus_clips(args: &CorpusArgs, seed: u64) -> Result<Vec<AudioClip>> {
    match &args.audio {
        Some(dir) => {
            let mut clips = Vec::new();
            for path in wav_files(dir)? {
                let buf = load_wav(&path)?;
                let buf = if buf.sample_rate == SAMPLE_RATE { buf } else { resample(&buf, SAMPLE_RATE)? };
                match segment_clips(&buf, &path.display().to_string()) {
                    Ok(c) => clips.extend(c),
                    Err(e) => log::warn!("skipping {}: {e}", path.display()),
                }
            }
            if clips.is_empty() {
                bail!(EmptyInput, "no usable audio in {}", dir.display());
            }
            Ok(clips)
        }
        None => synthetic_corpus(args.clips, SAMPLE_RATE, seed),
    }
}

fn to_specs(front: &FrontEnd, clips: &[AudioClip]) -> Result<Vec<LogMelSpectrogram>> {
    clips.iter().map(|c| front.clip_to_spectrogram(c)).collect()
}

/// Labelled clips from a manifest, or synthetic machining modes.
pub fn labeled_clips(args: &LabeledArgs, seed: u64) -> Result<Vec<LabeledClip>> {
    match &args.manifest {
        Some(m) => {
            let base = m.parent().unwrap_or(Path::new("."));
            load_manifest_clips(&read_manifest(m)?, base)
        }
        None => Ok(labelled_corpus(&cnc_mode_specs(), args.per_mode, SAMPLE_RATE, seed)?
            .into_iter()
            .map(|(clip, mode)| LabeledClip { clip, mode })
            .collect()),
    }
}

fn load_classifier(common: &Common) -> Result<Classifier> {
    Classifier::load(require(&common.checkpoint, "checkpoint")?)
}

/// A classifier from `--checkpoint`; a bare backbone gets a fresh head.
fn classifier_for_training(common: &Common, classes: usize) -> Result<Classifier> {
    let (backbone, pre) = match &common.checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.config.kind == CheckpointKind::Classifier {
                return Classifier::from_checkpoint(&ck);
            }
            backbone_from_checkpoint(&ck)?
        }
        None => (Backbone::new(ModelConfig::child(64, 2, 1), common.seed)?, FrontEnd::standard().settings().clone()),
    };
    let head = MlpHead::new(backbone.embed_dim(), classes, common.seed.wrapping_add(1))?;
    Classifier::new(backbone, head, pre)
}

fn write_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_pretrain(common: &Common, corpus: &CorpusArgs) -> Result<()> {
    let job: PretrainJob = read_config(common.config.as_deref())?;
    let out = require(&common.out, "out")?;
    let front = FrontEnd::standard();
    let specs = to_specs(&front, &corpus_clips(corpus, common.seed)?)?;
    let mut pair = StudentTeacherPair::new(job.model, common.seed)?;
    let curve = pretrain_run(&mut pair, &specs, &job.train, &mut Prng::new(common.seed).derive(1))?;
    let cfg = CheckpointConfig::new(CheckpointKind::Pretrain, job.model, front.settings().clone());
    Checkpoint::capture(cfg, &[&pair.student, &pair.decoder]).save(out)?;
    write_loss_csv(fs::File::create(out.with_extension("csv"))?, &curve)?;
    eprintln!("pretrained {} clips for {} epochs; checkpoint {}", specs.len(), curve.len(), out.display());
    Ok(())
}

fn cmd_distill(common: &Common, corpus: &CorpusArgs, heldout: usize) -> Result<()> {
    let cfg: DistillConfig = read_config(common.config.as_deref())?;
    let out = require(&common.out, "out")?;
    let (parent, parent_pre) = backbone_from_checkpoint(&Checkpoint::load(require(&common.checkpoint, "checkpoint")?)?)?;
    let front = FrontEnd::new(parent_pre.clone())?;
    crate::distill::check_preprocessing(&parent_pre, front.settings())?;
    let train = to_specs(&front, &corpus_clips(corpus, common.seed)?)?;
    let held_args = CorpusArgs { audio: None, clips: heldout };
    let held = to_specs(&front, &corpus_clips(&held_args, common.seed ^ 0x5eed)?)?;
    let outcome = distill_run(&parent, &train, &held, &cfg, &mut Prng::new(common.seed))?;
    export_student(&outcome.student, &parent_pre, out)?;
    write_curve_csv(fs::File::create(out.with_extension("csv"))?, &outcome.curve)?;
    let last = outcome.curve.last().unwrap();
    eprintln!(
        "distilled student: held-out mse {:.5} (from {:.5}), cosine {:.3}; checkpoint {}",
        last.heldout_mse,
        outcome.curve[0].heldout_mse,
        last.heldout_cosine,
        out.display()
    );
    Ok(())
}

fn cmd_finetune(common: &Common, data: &LabeledArgs) -> Result<()> {
    let cfg: FinetuneConfig = read_config(common.config.as_deref())?;
    let out = require(&common.out, "out")?;
    let clips = labeled_clips(data, common.seed)?;
    let taxonomy = ModeTaxonomy::cnc();
    let classes = clips.iter().map(|c| c.mode + 1).max().unwrap_or(0).max(taxonomy.len());
    let mut classifier = classifier_for_training(common, classes)?;
    if classifier.labels.is_empty() && classes == taxonomy.len() {
        classifier.labels = taxonomy.labels();
    }
    let front = FrontEnd::new(classifier.preprocessing.clone())?;
    let (specs, labels) = spectrograms(&front, &clips)?;
    let curve = finetune(&mut classifier, &specs, &labels, &cfg, &mut Prng::new(common.seed).derive(2))?;
    classifier.save(out)?;
    eprintln!("fine-tuned on {} clips; final loss {:.4}; checkpoint {}", specs.len(), curve.last().unwrap(), out.display());
    Ok(())
}

fn cmd_eval(common: &Common, data: &LabeledArgs) -> Result<()> {
    let classifier = load_classifier(common)?;
    let front = FrontEnd::new(classifier.preprocessing.clone())?;
    // Synthetic evaluation clips come from a stream disjoint from training.
    let clips = labeled_clips(data, common.seed ^ 0xe7a1)?;
    let (specs, labels) = spectrograms(&front, &clips)?;
    let report = evaluate(&classifier, &specs, &labels)?;
    write_json(common.out.as_deref(), &report)
}

fn mode_task(name: &str, front: &FrontEnd, modes: &[usize], train: usize, test: usize, seed: u64) -> Result<Task> {
    let specs: Vec<_> = cnc_mode_specs().into_iter().filter(|s| modes.contains(&s.mode_id)).collect();
    let clips = labelled_corpus(&specs, train + test, SAMPLE_RATE, seed)?;
    let mut t = Task {
        name: name.into(),
        classes: modes.len(),
        train: vec![],
        train_labels: vec![],
        test: vec![],
        test_labels: vec![],
    };
    for (i, (clip, mode)) in clips.iter().enumerate() {
        let y = modes.iter().position(|m| m == mode).unwrap();
        let s = front.clip_to_spectrogram(clip)?;
        if i % (train + test) < train {
            t.train.push(s);
            t.train_labels.push(y);
        } else {
            t.test.push(s);
            t.test_labels.push(y);
        }
    }
    Ok(t)
}

/// Synthetic suite: spindle-speed and cut-depth tasks, with the full
/// ten-mode problem held out.
pub fn synthetic_suite(train: usize, test: usize, seed: u64) -> Result<CorpusSuite> {
    let front = FrontEnd::standard();
    Ok(CorpusSuite {
        tasks: vec![
            mode_task("shallow-speeds", &front, &[2, 3, 4, 5], train, test, seed)?,
            mode_task("deep-speeds", &front, &[6, 7, 8, 9], train, test, seed + 1)?,
            mode_task("idle-vs-cut", &front, &[0, 1, 2, 6], train, test, seed + 2)?,
        ],
        zero_shot: mode_task("all-modes", &front, &(0..10).collect::<Vec<_>>(), train, test, seed + 3)?,
    })
}

fn cmd_gridsearch(common: &Common, family: &str, store: Option<&Path>) -> Result<()> {
    let job: GridJob = read_config(common.config.as_deref())?;
    let (spec, mut policy) = match family {
        "parent" => (GridSpec::parent_family(), SelectionPolicy::parent_family()),
        "child" => (GridSpec::child_family(), SelectionPolicy::child_family()),
        other => bail!(Config, "unknown family {other:?} (expected parent or child)"),
    };
    if let Some(e) = job.epsilon {
        policy.epsilon = e;
    }
    let entries = enumerate_grid(&spec)?;
    let suite = synthetic_suite(job.train_per_mode, job.test_per_mode, common.seed)?;
    let opts = TrialOptions {
        finetune: job.finetune.clone(),
        seed: common.seed,
        latency_runs: job.latency_runs,
        ..Default::default()
    };
    let results = run_grid(&entries, &suite, &opts, store)?;
    match &common.out {
        Some(p) => write_results_csv(fs::File::create(p)?, &results)?,
        None => write_results_csv(io::stdout().lock(), &results)?,
    }
    let chosen = select_config(&results, &policy)?;
    eprintln!("selected {chosen}");
    Ok(())
}

fn cmd_bench(common: &Common, clips: usize, csv_path: Option<&Path>, budget_ms: f64) -> Result<()> {
    let classifier = match &common.checkpoint {
        Some(_) => load_classifier(common)?,
        None => classifier_for_training(common, 10)?,
    };
    let engine = InferenceEngine::new(classifier, budget_ms)?;
    let audio = synthetic_corpus(clips, SAMPLE_RATE, common.seed)?;
    let (events, stats) = bench(&engine, &audio)?;
    if let Some(p) = csv_path {
        let records: Vec<_> = events.iter().map(|e| e.record()).collect();
        write_latency_csv(fs::File::create(p)?, &records)?;
    }
    write_json(common.out.as_deref(), &stats)
}

#[allow(clippy::too_many_arguments)]
fn cmd_monitor(
    common: &Common,
    wav: Option<&Path>,
    pcm: Option<&str>,
    tcp: &[String],
    quiet: bool,
    capacity: usize,
    pace_ms: u64,
    budget_ms: f64,
) -> Result<()> {
    let engine = InferenceEngine::new(load_classifier(common)?, budget_ms)?;
    let (source, pace) = match (wav, pcm) {
        (Some(w), _) => (ClipSource::Wav(w.to_path_buf()), Some(Duration::from_millis(pace_ms))),
        (None, Some("-")) => (ClipSource::Pcm(Box::new(io::stdin())), None),
        (None, Some(p)) => (ClipSource::Pcm(Box::new(fs::File::open(p)?)), None),
        (None, None) => bail!(Config, "give --wav <file> or --pcm <file|->"),
    };
    let mut sinks: Vec<Box<dyn EventSink>> = Vec::new();
    if !quiet {
        sinks.push(Box::new(stdout_sink()));
    }
    for addr in tcp {
        sinks.push(Box::new(TcpSink::connect(addr.clone())));
    }
    if let Some(p) = &common.out {
        sinks.push(Box::new(crate::runtime::WriterSink::new(io::BufWriter::new(fs::File::create(p)?))));
    }
    let mut publisher = Publisher::new(sinks);
    let opts = MonitorOptions { capacity, pace };
    let summary = monitor(&engine, source, &opts, &mut publisher, &mut |ev| {
        if ev.over_budget {
            log::warn!("clip {} took {:.1} ms (budget {budget_ms} ms)", ev.clip_id, ev.latency_ms.total);
        }
    })?;
    drop(publisher);
    if summary.processed > 0 {
        let s = summary.stats(budget_ms)?;
        eprintln!(
            "processed {} of {} clips, {} dropped; mean {:.2} ms, p95 {:.2} ms",
            summary.processed, summary.produced, summary.drops, s.mean, s.p95
        );
    }
    Ok(())
}

fn cmd_export(common: &Common) -> Result<()> {
    let input = require(&common.checkpoint, "checkpoint")?;
    let out = require(&common.out, "out")?;
    let ck = Checkpoint::load(input)?;
    let (blocks, full) = match ck.config.kind {
        CheckpointKind::Classifier => {
            let c = Classifier::from_checkpoint(&ck)?;
            c.save(out)?;
            (c.count_params(CountScope::Blocks), c.count_params(CountScope::Full))
        }
        CheckpointKind::Backbone | CheckpointKind::Pretrain => {
            let (bb, pre) = backbone_from_checkpoint(&ck)?;
            save_backbone(&bb, &pre, out)?;
            (bb.count_params(CountScope::Blocks), bb.num_params())
        }
    };
    let bytes = fs::metadata(out)?.len();
    let mut o = io::stdout().lock();
    writeln!(o, "{}: {bytes} bytes, {blocks} block parameters, {full} total", out.display())?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { common, corpus } => cmd_pretrain(&common, &corpus),
        Command::Distill { common, corpus, heldout } => cmd_distill(&common, &corpus, heldout),
        Command::Finetune { common, data } => cmd_finetune(&common, &data),
        Command::Eval { common, data } => cmd_eval(&common, &data),
        Command::Gridsearch { common, family, store } => cmd_gridsearch(&common, &family, store.as_deref()),
        Command::Bench { common, clips, csv, budget_ms } => cmd_bench(&common, clips, csv.as_deref(), budget_ms),
        Command::Monitor { common, wav, pcm, tcp, quiet, capacity, pace_ms, budget_ms } => {
            cmd_monitor(&common, wav.as_deref(), pcm.as_deref(), &tcp, quiet, capacity, pace_ms, budget_ms)
        }
        Command::Export { common } => cmd_export(&common),
    }
}

/// Parses the process arguments, runs the command and maps errors to exit code 1.
pub fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
