//! Streaming inference: clip sources, the drop-oldest input queue, timed
//! classification, event sinks and latency statistics.

pub mod engine;
pub mod event;
pub mod queue;
pub mod sink;
pub mod source;
pub mod stats;

pub use engine::{bench, monitor, InferenceEngine, MonitorOptions, MonitorSummary};
pub use event::{LatencyRecord, ModeEvent, PhaseLatency};
pub use queue::BoundedQueue;
pub use sink::{stdout_sink, Backoff, EventSink, Publisher, TcpSink, WriterSink};
pub use source::{stream_clips, ClipSource, QueuedClip};
pub use stats::{latency_stats, nearest_rank, write_latency_csv, LatencyStats, BUDGET_MS};
