use std::time::{Duration, Instant};

use chrono::Utc;

use super::event::{LatencyRecord, ModeEvent, PhaseLatency};
use super::queue::BoundedQueue;
use super::sink::Publisher;
use super::source::{stream_clips, ClipSource, QueuedClip};
use super::stats::{latency_stats, LatencyStats, BUDGET_MS};
use crate::dsp::{AudioClip, FrontEnd};
use crate::error::{bail, Result};
use crate::model::{Classifier, Prediction};

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// A frozen classifier with the front end its checkpoint describes.
pub struct InferenceEngine {
    classifier: Classifier,
    front: FrontEnd,
    budget_ms: f64,
}

impl InferenceEngine {
    pub fn new(classifier: Classifier, budget_ms: f64) -> Result<Self> {
        if !(budget_ms > 0.0) {
            bail!(Config, "budget must be positive, got {budget_ms}");
        }
        let front = FrontEnd::new(classifier.preprocessing.clone())?;
        classifier.check_front_end(&front)?;
        Ok(Self { classifier, front, budget_ms })
    }

    pub fn with_default_budget(classifier: Classifier) -> Result<Self> {
        Self::new(classifier, BUDGET_MS)
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    pub fn budget_ms(&self) -> f64 {
        self.budget_ms
    }

    /// Pre-processing, inference and post-processing, each timed separately.
    /// Overruns are flagged, never aborted.
    pub fn infer_clip(&self, clip_id: u64, clip: &AudioClip, drops: u64) -> Result<ModeEvent> {
        let t0 = Instant::now();
        let spec = self.front.clip_to_spectrogram(clip)?;
        let t1 = Instant::now();
        let logits = self.classifier.logits(&[&spec.values])?;
        let t2 = Instant::now();
        let pred = Prediction::from_logits(logits.row(0))?;
        let label = self.classifier.label(pred.mode);
        let mut event = ModeEvent {
            ts: Utc::now(),
            clip_id,
            mode: pred.mode,
            label,
            confidence: pred.confidence as f64,
            latency_ms: PhaseLatency::new(0.0, 0.0, 0.0),
            over_budget: false,
            drops,
        };
        let t3 = Instant::now();
        event.latency_ms = PhaseLatency::new(ms(t1 - t0), ms(t2 - t1), ms(t3 - t2));
        event.over_budget = event.latency_ms.total > self.budget_ms;
        Ok(event)
    }
}

#[derive(Clone, Debug)]
pub struct MonitorOptions {
    pub capacity: usize,
    /// Delay between produced clips; `None` reads as fast as the source allows.
    pub pace: Option<Duration>,
}

impl Default for MonitorOptions {
    fn default() -> Self {
        Self { capacity: 4, pace: None }
    }
}

#[derive(Clone, Debug)]
pub struct MonitorSummary {
    pub produced: u64,
    pub processed: u64,
    pub drops: u64,
    pub failed: u64,
    /// Largest queue length observed.
    pub queue_high_water: usize,
    pub records: Vec<LatencyRecord>,
}

impl MonitorSummary {
    pub fn stats(&self, budget_ms: f64) -> Result<LatencyStats> {
        latency_stats(&self.records, budget_ms)
    }
}

/// Runs a producer thread feeding a bounded queue while this thread
/// classifies clips and publishes events. `on_event` sees every event
/// after publication.
pub fn monitor(
    engine: &InferenceEngine,
    source: ClipSource,
    opts: &MonitorOptions,
    publisher: &mut Publisher,
    on_event: &mut dyn FnMut(&ModeEvent),
) -> Result<MonitorSummary> {
    let queue: BoundedQueue<QueuedClip> = BoundedQueue::new(opts.capacity)?;
    let pace = opts.pace;
    std::thread::scope(|scope| {
        let producer = scope.spawn(|| stream_clips(source, &queue, pace));
        let mut summary =
            MonitorSummary { produced: 0, processed: 0, drops: 0, failed: 0, queue_high_water: 0, records: Vec::new() };
        while let Some(item) = queue.pop() {
            match engine.infer_clip(item.clip_id, &item.clip, queue.drops()) {
                Ok(ev) => {
                    publisher.publish(&ev);
                    summary.records.push(ev.record());
                    summary.processed += 1;
                    on_event(&ev);
                }
                Err(e) => {
                    log::warn!("clip {} skipped: {e}", item.clip_id);
                    summary.failed += 1;
                }
            }
        }
        publisher.flush();
        let produced = producer.join().map_err(|_| crate::Error::Internal("producer thread panicked".into()))?;
        summary.produced = produced?;
        summary.drops = queue.drops();
        summary.queue_high_water = queue.high_water();
        Ok(summary)
    })
}

/// Sequential timing run over `clips`.
pub fn bench(engine: &InferenceEngine, clips: &[AudioClip]) -> Result<(Vec<ModeEvent>, LatencyStats)> {
    let events = clips
        .iter()
        .enumerate()
        .map(|(i, c)| engine.infer_clip(i as u64, c, 0))
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<LatencyRecord> = events.iter().map(ModeEvent::record).collect();
    let stats = latency_stats(&records, engine.budget_ms())?;
    Ok((events, stats))
}
