//! Streams a generated 8-second recording through the monitor with a
//! capacity-2 queue, printing NDJSON events and a latency summary.

use std::time::Duration;

use kilosound::dsp::{cnc_mode_specs, synth_mode_clip, write_wav_pcm16, AudioBuffer, ClipOrigin, FrontEnd, SAMPLE_RATE};
use kilosound::model::{Backbone, Classifier, MlpHead, ModelConfig};
use kilosound::nn::Prng;
use kilosound::runtime::{monitor, stdout_sink, ClipSource, InferenceEngine, MonitorOptions, Publisher, BUDGET_MS};

fn main() -> kilosound::Result<()> {
    let mut prng = Prng::new(4);
    let mut samples = Vec::new();
    for mode in [0, 1, 2, 2, 6, 6, 9, 1] {
        samples.extend(synth_mode_clip(&cnc_mode_specs()[mode], SAMPLE_RATE, &mut prng, ClipOrigin::default())?.samples);
    }
    let path = std::env::temp_dir().join("kilosound-monitor-demo.wav");
    write_wav_pcm16(&path, &AudioBuffer::new(samples, SAMPLE_RATE)?)?;

    let cfg = ModelConfig::child(64, 2, 1);
    let classifier = Classifier::new(Backbone::new(cfg, 1)?, MlpHead::new(64, 10, 2)?, FrontEnd::standard().settings().clone())?;
    let engine = InferenceEngine::new(classifier, BUDGET_MS)?;
    let mut publisher = Publisher::new(vec![Box::new(stdout_sink())]);
    let opts = MonitorOptions { capacity: 2, pace: Some(Duration::from_millis(50)) };
    let summary = monitor(&engine, ClipSource::Wav(path), &opts, &mut publisher, &mut |_| {})?;
    let stats = summary.stats(BUDGET_MS)?;
    eprintln!(
        "{} clips, {} dropped, mean {:.2} ms, p95 {:.2} ms, over budget {:.0}%",
        summary.processed,
        summary.drops,
        stats.mean,
        stats.p95,
        100.0 * stats.over_budget_rate
    );
    Ok(())
}
