//! Times pre-processing, inference and post-processing of an L19-shaped
//! classifier over synthetic clips and prints nearest-rank statistics.
//!
//! `cargo run --example bench_latency -- [clips]`

use kilosound::dsp::{synthetic_corpus, FrontEnd, SAMPLE_RATE};
use kilosound::model::{Backbone, Classifier, MlpHead, ModelConfig};
use kilosound::runtime::{bench, InferenceEngine, BUDGET_MS};

fn main() -> kilosound::Result<()> {
    let n = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(300);
    let cfg = ModelConfig::child(64, 2, 1);
    let classifier = Classifier::new(Backbone::new(cfg, 1)?, MlpHead::new(64, 10, 2)?, FrontEnd::standard().settings().clone())?;
    let engine = InferenceEngine::new(classifier, BUDGET_MS)?;
    let clips = synthetic_corpus(n, SAMPLE_RATE, 8)?;
    let (events, stats) = bench(&engine, &clips)?;
    let phase = |f: fn(&kilosound::runtime::PhaseLatency) -> f64| events.iter().map(|e| f(&e.latency_ms)).sum::<f64>() / n as f64;
    println!("mean pre {:.2} ms, infer {:.2} ms, post {:.3} ms", phase(|l| l.pre), phase(|l| l.infer), phase(|l| l.post));
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(())
}
