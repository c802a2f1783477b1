use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

/// Phase timings of one clip, milliseconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseLatency {
    pub pre: f64,
    pub infer: f64,
    pub post: f64,
    pub total: f64,
}

impl PhaseLatency {
    pub fn new(pre: f64, infer: f64, post: f64) -> Self {
        Self { pre, infer, post, total: pre + infer + post }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub clip_id: u64,
    #[serde(flatten)]
    pub latency: PhaseLatency,
}

/// One classified clip as published to sinks (one NDJSON line).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeEvent {
    #[serde(with = "rfc3339")]
    pub ts: DateTime<Utc>,
    pub clip_id: u64,
    pub mode: usize,
    pub label: String,
    pub confidence: f64,
    pub latency_ms: PhaseLatency,
    pub over_budget: bool,
    /// Clips dropped by the input queue so far.
    pub drops: u64,
}

impl ModeEvent {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("event serializes")
    }

    pub fn from_line(line: &str) -> crate::Result<Self> {
        Ok(serde_json::from_str(line)?)
    }

    pub fn record(&self) -> LatencyRecord {
        LatencyRecord { clip_id: self.clip_id, latency: self.latency_ms }
    }
}

mod rfc3339 {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ts: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&ts.to_rfc3339_opts(SecondsFormat::AutoSi, true))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let s = String::deserialize(d)?;
        DateTime::parse_from_rfc3339(&s).map(|t| t.with_timezone(&Utc)).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_round_trips() {
        let ts = DateTime::parse_from_rfc3339("2026-03-01T12:00:00.123456Z").unwrap().with_timezone(&Utc);
        let e = ModeEvent {
            ts,
            clip_id: 7,
            mode: 3,
            label: "Mode 3".into(),
            confidence: 0.8125,
            latency_ms: PhaseLatency::new(1.25, 3.5, 0.01),
            over_budget: false,
            drops: 2,
        };
        let line = e.to_line();
        assert!(!line.contains('\n'));
        assert_eq!(ModeEvent::from_line(&line).unwrap(), e);
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["ts"], "2026-03-01T12:00:00.123456Z");
        assert!(v["latency_ms"]["total"].is_f64());
    }
}
