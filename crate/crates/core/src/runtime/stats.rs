use serde::{Deserialize, Serialize};

use super::event::LatencyRecord;
use crate::error::{bail, Result};

/// The per-clip budget: 30 clips per second.
pub const BUDGET_MS: f64 = 33.3;

/// Summary of end-to-end latencies, milliseconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub max: f64,
    pub budget_ms: f64,
    pub over_budget_rate: f64,
}

/// Nearest-rank percentile of ascending data: element `ceil(p·n)` (1-based).
pub fn nearest_rank(sorted: &[f64], pct: f64) -> f64 {
    let n = sorted.len();
    let rank = ((pct / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

pub fn latency_stats(records: &[LatencyRecord], budget_ms: f64) -> Result<LatencyStats> {
    if records.is_empty() {
        bail!(EmptyInput, "no latency records");
    }
    let mut totals: Vec<f64> = records.iter().map(|r| r.latency.total).collect();
    totals.sort_by(f64::total_cmp);
    let n = totals.len();
    let over = totals.iter().filter(|&&t| t > budget_ms).count();
    Ok(LatencyStats {
        count: n,
        mean: totals.iter().sum::<f64>() / n as f64,
        p50: nearest_rank(&totals, 50.0),
        p95: nearest_rank(&totals, 95.0),
        max: totals[n - 1],
        budget_ms,
        over_budget_rate: over as f64 / n as f64,
    })
}

pub fn write_latency_csv<W: std::io::Write>(out: W, records: &[LatencyRecord]) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        clip_id: u64,
        pre: f64,
        infer: f64,
        post: f64,
        total: f64,
    }
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        let l = r.latency;
        w.serialize(Row { clip_id: r.clip_id, pre: l.pre, infer: l.infer, post: l.post, total: l.total })?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::event::PhaseLatency;

    fn recs(totals: &[f64]) -> Vec<LatencyRecord> {
        totals
            .iter()
            .enumerate()
            .map(|(i, &t)| LatencyRecord { clip_id: i as u64, latency: PhaseLatency::new(0.0, t, 0.0) })
            .collect()
    }

    #[test]
    fn three_records() {
        let s = latency_stats(&recs(&[30.0, 10.0, 20.0]), BUDGET_MS).unwrap();
        assert_eq!(s.mean, 20.0);
        assert_eq!(s.max, 30.0);
        assert_eq!(s.p50, 20.0);
        assert_eq!(s.p95, 30.0);
        assert_eq!(s.over_budget_rate, 0.0);
    }

    #[test]
    fn single_record_collapses() {
        let s = latency_stats(&recs(&[40.0]), BUDGET_MS).unwrap();
        assert_eq!((s.mean, s.p50, s.p95, s.max), (40.0, 40.0, 40.0, 40.0));
        assert_eq!(s.over_budget_rate, 1.0);
    }

    #[test]
    fn empty_is_error() {
        assert!(matches!(latency_stats(&[], BUDGET_MS), Err(crate::Error::EmptyInput(_))));
    }

    #[test]
    fn csv_has_phase_columns() {
        let mut buf = Vec::new();
        write_latency_csv(&mut buf, &recs(&[1.5])).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("clip_id,pre,infer,post,total\n"), "{text}");
    }
}
