//! Machine-readable run reports and timeline dumps.
//!
//! Reports are plot-ready tables: JSON with a versioned envelope, or flat
//! CSV with a fixed column order. Field names are part of the public
//! contract. Timeline dumps are line-delimited JSON with a header record,
//! one event per line.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{Metrics, Policy, SimConfig, Timeline};

pub const REPORT_VERSION: u32 = 1;

/// One simulated configuration and its metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub policy: Policy,
    pub lambda: f64,
    #[serde(flatten)]
    pub metrics: Metrics,
    /// TTFT of the first row divided by this row's TTFT.
    pub speedup_ttft: f64,
    /// TPOT of the first row divided by this row's TPOT.
    pub speedup_tpot: f64,
}

/// Ablation table: one row per config, speedups relative to the first row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub format_version: u32,
    pub kind: String,
    pub rows: Vec<ReportRow>,
}

impl AblationReport {
    pub fn from_rows(rows: Vec<(SimConfig, Metrics)>) -> Self {
        let base = rows.first().map(|(_, m)| (m.ttft, m.tpot));
        let rows = rows
            .into_iter()
            .map(|(cfg, metrics)| {
                let (base_ttft, base_tpot) = base.unwrap();
                ReportRow {
                    label: cfg.policy.label().to_string(),
                    policy: cfg.policy,
                    lambda: cfg.lambda,
                    speedup_ttft: ratio(base_ttft, metrics.ttft),
                    speedup_tpot: ratio(base_tpot, metrics.tpot),
                    metrics,
                }
            })
            .collect();
        AblationReport {
            format_version: REPORT_VERSION,
            kind: "ablation_report".into(),
            rows,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(REPORT_CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&report_csv_row(row));
            out.push('\n');
        }
        out
    }
}

fn ratio(base: f64, value: f64) -> f64 {
    if value > 0.0 {
        base / value
    } else {
        1.0
    }
}

const REPORT_CSV_HEADER: &str = "label,policy,lambda,ttft,tpot,prefetch_hit_rate,cache_hit_rate,\
bytes_transferred,bytes_prefill,bytes_decode,retained_gate_mass,stall_time_prefill,\
stall_time_decode,demand_lookups,demand_hits,prefetch_issued,prefetch_useful,\
speedup_ttft,speedup_tpot";

fn report_csv_row(row: &ReportRow) -> String {
    let m = &row.metrics;
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        row.label,
        row.policy.label(),
        row.lambda,
        m.ttft,
        m.tpot,
        m.prefetch_hit_rate,
        m.cache_hit_rate,
        m.bytes_transferred,
        m.bytes_prefill,
        m.bytes_decode,
        m.retained_gate_mass,
        m.stall_time_prefill,
        m.stall_time_decode,
        m.demand_lookups,
        m.demand_hits,
        m.prefetch_issued,
        m.prefetch_useful,
        row.speedup_ttft,
        row.speedup_tpot,
    )
}

/// One sweep cell: the varied knobs plus the resulting metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub policy: Policy,
    pub lambda: f64,
    /// `None` when fidelity was not varied (e.g. a file-sourced trace).
    pub predictor_fidelity: Option<f64>,
    pub capacity_bytes: u64,
    pub t_prefetch: Option<usize>,
    #[serde(flatten)]
    pub metrics: Metrics,
}

/// Cross-product sweep table, row order matching the configured grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub format_version: u32,
    pub kind: String,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn new(rows: Vec<SweepRow>) -> Self {
        SweepReport {
            format_version: REPORT_VERSION,
            kind: "sweep_report".into(),
            rows,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(SWEEP_CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            let m = &row.metrics;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                row.label,
                row.policy.label(),
                row.lambda,
                row.predictor_fidelity
                    .map_or(String::from("default"), |f| f.to_string()),
                row.capacity_bytes,
                row.t_prefetch.map_or(String::from("default"), |t| t.to_string()),
                m.ttft,
                m.tpot,
                m.prefetch_hit_rate,
                m.cache_hit_rate,
                m.bytes_transferred,
                m.bytes_prefill,
                m.bytes_decode,
                m.retained_gate_mass,
                m.stall_time_prefill,
                m.stall_time_decode,
                m.demand_lookups,
                m.demand_hits,
                m.prefetch_issued,
            ));
        }
        out
    }
}

const SWEEP_CSV_HEADER: &str = "label,policy,lambda,predictor_fidelity,capacity_bytes,t_prefetch,\
ttft,tpot,prefetch_hit_rate,cache_hit_rate,bytes_transferred,bytes_prefill,bytes_decode,\
retained_gate_mass,stall_time_prefill,stall_time_decode,demand_lookups,demand_hits,prefetch_issued";

#[derive(Serialize)]
struct TimelineHeader<'a> {
    kind: &'a str,
    format_version: u32,
    label: &'a str,
    lambda: f64,
}

/// Writes a timeline as line-delimited JSON: a header record, then one
/// event per line in chronological order.
pub fn write_timeline(timeline: &Timeline, cfg: &SimConfig, path: &Path) -> std::io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let header = TimelineHeader {
        kind: "timeline_header",
        format_version: REPORT_VERSION,
        label: cfg.policy.label(),
        lambda: cfg.lambda,
    };
    writeln!(out, "{}", serde_json::to_string(&header).expect("serializes"))?;
    for event in &timeline.events {
        writeln!(out, "{}", serde_json::to_string(event).expect("serializes"))?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics() -> Metrics {
        Metrics {
            ttft: 2.0,
            tpot: 0.5,
            prefetch_hit_rate: 0.0,
            cache_hit_rate: 0.25,
            bytes_transferred: 100,
            bytes_prefill: 60,
            bytes_decode: 40,
            retained_gate_mass: 1.0,
            stall_time_prefill: 0.0,
            stall_time_decode: 0.1,
            demand_lookups: 8,
            demand_hits: 2,
            prefetch_issued: 0,
            prefetch_useful: 0,
        }
    }

    #[test]
    fn speedups_are_relative_to_first_row() {
        let a = SimConfig::new(Policy::LoadOnDemand, 0.0);
        let b = SimConfig::new(Policy::CacheOnly, 0.0);
        let mut faster = metrics();
        faster.ttft = 1.0;
        faster.tpot = 0.25;
        let report = AblationReport::from_rows(vec![(a, metrics()), (b, faster)]);
        assert_eq!(report.rows[0].speedup_ttft, 1.0);
        assert_eq!(report.rows[0].speedup_tpot, 1.0);
        assert_eq!(report.rows[1].speedup_ttft, 2.0);
        assert_eq!(report.rows[1].speedup_tpot, 2.0);
    }

    #[test]
    fn csv_has_one_line_per_row_plus_header() {
        let a = SimConfig::new(Policy::LoadOnDemand, 0.0);
        let report = AblationReport::from_rows(vec![(a, metrics())]);
        let csv = report.to_csv();
        assert_eq!(csv.trim_end().lines().count(), 2);
        assert!(csv.starts_with("label,policy,lambda,ttft"));
    }
}
