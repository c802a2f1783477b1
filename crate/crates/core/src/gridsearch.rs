//! Configuration grids, resumable trial runs and epsilon-lexicographic
//! model selection.

use std::cmp::Ordering;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distill::{distill_run, DistillConfig};
use crate::dsp::{LogMelSpectrogram, Preprocessing};
use crate::error::{bail, Result};
use crate::finetune::{evaluate, finetune, FinetuneConfig};
use crate::model::{Backbone, Classifier, CountScope, MlpHead, ModelConfig};
use crate::nn::{Activation, Prng};

/// Axis values of a grid; configs are the Cartesian product in
/// dims → layers → expansion order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Id prefix, e.g. "I" or "L".
    pub family: String,
    pub embed_dims: Vec<usize>,
    pub layers: Vec<usize>,
    pub expansions: Vec<usize>,
    pub activation: Activation,
}

impl GridSpec {
    /// Parent family: 4 widths × 3 depths, GELU, expansion 4.
    pub fn parent_family() -> Self {
        Self {
            family: "I".into(),
            embed_dims: vec![128, 192, 256, 384],
            layers: vec![4, 6, 8],
            expansions: vec![4],
            activation: Activation::Gelu,
        }
    }

    /// Child family: 3 widths × 3 depths × 3 expansions, ReLU.
    pub fn child_family() -> Self {
        Self {
            family: "L".into(),
            embed_dims: vec![16, 32, 64],
            layers: vec![2, 4, 6],
            expansions: vec![1, 2, 4],
            activation: Activation::Relu,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridEntry {
    pub id: String,
    pub config: ModelConfig,
}

pub fn enumerate_grid(spec: &GridSpec) -> Result<Vec<GridEntry>> {
    if spec.embed_dims.is_empty() || spec.layers.is_empty() || spec.expansions.is_empty() {
        bail!(Config, "grid {} has an empty axis", spec.family);
    }
    let mut out = Vec::new();
    for &d in &spec.embed_dims {
        for &l in &spec.layers {
            for &f in &spec.expansions {
                let config = ModelConfig::new(d, l, f, spec.activation);
                config.validate()?;
                out.push(GridEntry { id: format!("{}{:02}", spec.family, out.len() + 1), config });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyMs {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub id: String,
    pub embed_dim: usize,
    pub layers: usize,
    pub expansion: usize,
    /// `None` for a completed trial, the failure message otherwise.
    pub error: Option<String>,
    pub mean_f1: f64,
    pub zero_shot_f1: f64,
    /// Encoder-block parameters.
    pub params: usize,
    /// Every tensor including patch embedding, tokens, norm and head.
    pub params_full: usize,
    pub latency_ms: LatencyMs,
}

impl TrialResult {
    pub fn ok(&self) -> bool {
        self.error.is_none() && self.mean_f1.is_finite()
    }

    fn failed(entry: &GridEntry, msg: String) -> Self {
        Self {
            id: entry.id.clone(),
            embed_dim: entry.config.embed_dim,
            layers: entry.config.num_layers,
            expansion: entry.config.expansion,
            error: Some(msg),
            mean_f1: f64::NAN,
            zero_shot_f1: f64::NAN,
            params: entry.config.block_params(),
            params_full: 0,
            latency_ms: LatencyMs { mean: f64::NAN, min: f64::NAN, max: f64::NAN },
        }
    }
}

/// One labelled train/test problem.
#[derive(Clone, Debug)]
pub struct Task {
    pub name: String,
    pub classes: usize,
    pub train: Vec<LogMelSpectrogram>,
    pub train_labels: Vec<usize>,
    pub test: Vec<LogMelSpectrogram>,
    pub test_labels: Vec<usize>,
}

/// Tasks averaged into `mean_f1`, plus one task kept out of any upstream
/// training whose score is reported as `zero_shot_f1`.
#[derive(Clone, Debug)]
pub struct CorpusSuite {
    pub tasks: Vec<Task>,
    pub zero_shot: Task,
}

impl CorpusSuite {
    /// Content hash used to key persisted trials.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in self.tasks.iter().chain(std::iter::once(&self.zero_shot)) {
            h.update(t.name.as_bytes());
            h.update((t.classes as u64).to_le_bytes());
            for (s, &y) in t.train.iter().zip(&t.train_labels).chain(t.test.iter().zip(&t.test_labels)) {
                h.update((y as u64).to_le_bytes());
                for v in &s.values {
                    h.update(v.to_le_bytes());
                }
            }
        }
        let d = h.finalize();
        d.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Parent and data for distilling each trial's backbone before fine-tuning.
#[derive(Clone, Debug)]
pub struct DistillSource {
    pub parent: Backbone<f32>,
    pub train: Vec<LogMelSpectrogram>,
    pub heldout: Vec<LogMelSpectrogram>,
    pub config: DistillConfig,
}

#[derive(Clone, Debug)]
pub struct TrialOptions {
    pub finetune: FinetuneConfig,
    pub seed: u64,
    /// Single-clip inferences timed per trial.
    pub latency_runs: usize,
    pub preprocessing: Preprocessing,
    pub distill_from: Option<DistillSource>,
}

impl Default for TrialOptions {
    fn default() -> Self {
        Self {
            finetune: FinetuneConfig::default(),
            seed: 0,
            latency_runs: 20,
            preprocessing: Preprocessing::default(),
            distill_from: None,
        }
    }
}

fn run_trial(entry: &GridEntry, suite: &CorpusSuite, opts: &TrialOptions) -> Result<TrialResult> {
    let mut prng = Prng::new(opts.seed).derive(entry.id.bytes().fold(0u64, |a, b| a * 131 + b as u64));
    let backbone = match &opts.distill_from {
        Some(src) => {
            let cfg = DistillConfig { student: entry.config, ..src.config.clone() };
            distill_run(&src.parent, &src.train, &src.heldout, &cfg, &mut prng)?.student
        }
        None => Backbone::new(entry.config, prng.next_u64())?,
    };
    let score = |task: &Task, prng: &mut Prng| -> Result<(f64, Classifier)> {
        let head = MlpHead::new(entry.config.embed_dim, task.classes, prng.next_u64())?;
        let mut c = Classifier::new(backbone.clone(), head, opts.preprocessing.clone())?;
        finetune(&mut c, &task.train, &task.train_labels, &opts.finetune, prng)?;
        Ok((evaluate(&c, &task.test, &task.test_labels)?.macro_f1, c))
    };
    if suite.tasks.is_empty() {
        bail!(EmptyInput, "corpus suite has no tasks");
    }
    let mut sum = 0.0;
    let mut last = None;
    for t in &suite.tasks {
        let (f1, c) = score(t, &mut prng)?;
        sum += f1;
        last = Some(c);
    }
    let (zero_shot_f1, _) = score(&suite.zero_shot, &mut prng)?;
    let classifier = last.expect("at least one task");
    let probe = &suite.tasks[0].test[0];
    let mut times = Vec::with_capacity(opts.latency_runs.max(1));
    for _ in 0..opts.latency_runs.max(1) {
        let t0 = Instant::now();
        classifier.predict(probe)?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let min = times.iter().copied().fold(f64::INFINITY, f64::min);
    let max = times.iter().copied().fold(0.0, f64::max);
    Ok(TrialResult {
        id: entry.id.clone(),
        embed_dim: entry.config.embed_dim,
        layers: entry.config.num_layers,
        expansion: entry.config.expansion,
        error: None,
        mean_f1: sum / suite.tasks.len() as f64,
        zero_shot_f1,
        params: classifier.count_params(CountScope::Blocks),
        params_full: classifier.count_params(CountScope::Full),
        latency_ms: LatencyMs { mean, min: min.min(mean), max: max.max(mean) },
    })
}

fn trial_path(dir: &Path, id: &str, fingerprint: &str) -> PathBuf {
    dir.join(format!("{id}-{fingerprint}.json"))
}

fn persist(path: &Path, r: &TrialResult) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(r)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Runs every entry. With a `store`, completed trials are written there and
/// reused on later calls; failed trials are reported and retried next time.
pub fn run_grid(
    entries: &[GridEntry],
    suite: &CorpusSuite,
    opts: &TrialOptions,
    store: Option<&Path>,
) -> Result<Vec<TrialResult>> {
    let fp = suite.fingerprint();
    if let Some(dir) = store {
        fs::create_dir_all(dir)?;
    }
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let path = store.map(|d| trial_path(d, &e.id, &fp));
        if let Some(p) = path.as_ref().filter(|p| p.exists()) {
            match serde_json::from_slice::<TrialResult>(&fs::read(p)?) {
                Ok(r) => {
                    log::info!("trial {} reused from {}", e.id, p.display());
                    out.push(r);
                    continue;
                }
                Err(err) => log::warn!("ignoring unreadable trial file {}: {err}", p.display()),
            }
        }
        let result = match catch_unwind(AssertUnwindSafe(|| run_trial(e, suite, opts))) {
            Ok(Ok(r)) => r,
            Ok(Err(err)) => TrialResult::failed(e, err.to_string()),
            Err(panic) => {
                let msg = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "trial panicked".into());
                TrialResult::failed(e, msg)
            }
        };
        match &result.error {
            None => log::info!("trial {}: mean F1 {:.4}, zero-shot {:.4}", e.id, result.mean_f1, result.zero_shot_f1),
            Some(msg) => log::warn!("trial {} failed: {msg}", e.id),
        }
        if let (Some(p), true) = (path.as_ref(), result.ok()) {
            persist(p, &result)?;
        }
        out.push(result);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    ZeroShotDesc,
    ParamsAsc,
    LatencyAsc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    /// Largest tolerated mean-F1 deficit relative to the best trial.
    pub epsilon: f64,
    pub tiebreak: Vec<TieBreak>,
}

/// Slack on the epsilon comparison so that decimal gaps such as
/// `0.900 − 0.8985 = 0.0015` are not lost to binary rounding.
const EPSILON_SLACK: f64 = 1e-9;

impl SelectionPolicy {
    /// Prefer generalization within 0.15% of the best.
    pub fn parent_family() -> Self {
        Self { epsilon: 0.0015, tiebreak: vec![TieBreak::ZeroShotDesc] }
    }

    /// Prefer fewer parameters within 0.1% of the best.
    pub fn child_family() -> Self {
        Self { epsilon: 0.001, tiebreak: vec![TieBreak::ParamsAsc] }
    }

    fn compare(&self, a: &TrialResult, b: &TrialResult) -> Ordering {
        for key in &self.tiebreak {
            let o = match key {
                TieBreak::ZeroShotDesc => b.zero_shot_f1.total_cmp(&a.zero_shot_f1),
                TieBreak::ParamsAsc => a.params.cmp(&b.params),
                TieBreak::LatencyAsc => a.latency_ms.mean.total_cmp(&b.latency_ms.mean),
            };
            if o != Ordering::Equal {
                return o;
            }
        }
        a.params.cmp(&b.params).then_with(|| a.id.cmp(&b.id))
    }
}

/// Trials within `epsilon` of the best mean F1.
pub fn candidates<'a>(results: &'a [TrialResult], epsilon: f64) -> Vec<&'a TrialResult> {
    let ok: Vec<&TrialResult> = results.iter().filter(|r| r.ok()).collect();
    let best = ok.iter().map(|r| r.mean_f1).fold(f64::NEG_INFINITY, f64::max);
    ok.into_iter().filter(|r| best - r.mean_f1 <= epsilon + EPSILON_SLACK).collect()
}

pub fn select_config(results: &[TrialResult], policy: &SelectionPolicy) -> Result<String> {
    if !(policy.epsilon >= 0.0) {
        bail!(Config, "epsilon must be non-negative");
    }
    let pool = candidates(results, policy.epsilon);
    match pool.into_iter().min_by(|a, b| policy.compare(a, b)) {
        Some(r) => Ok(r.id.clone()),
        None => bail!(EmptyInput, "no successful trials to select from"),
    }
}

#[derive(Serialize)]
struct CsvRow<'a> {
    id: &'a str,
    dims: usize,
    layers: usize,
    expansion: usize,
    mean_f1: f64,
    zero_shot_f1: f64,
    params: usize,
    params_full: usize,
    latency_mean_ms: f64,
    latency_min_ms: f64,
    latency_max_ms: f64,
    status: &'a str,
}

pub fn write_results_csv<W: std::io::Write>(out: W, results: &[TrialResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in results {
        w.serialize(CsvRow {
            id: &r.id,
            dims: r.embed_dim,
            layers: r.layers,
            expansion: r.expansion,
            mean_f1: r.mean_f1,
            zero_shot_f1: r.zero_shot_f1,
            params: r.params,
            params_full: r.params_full,
            latency_mean_ms: r.latency_ms.mean,
            latency_min_ms: r.latency_ms.min,
            latency_max_ms: r.latency_ms.max,
            status: if r.ok() { "ok" } else { "failed" },
        })?;
    }
    w.flush()?;
    Ok(())
}
