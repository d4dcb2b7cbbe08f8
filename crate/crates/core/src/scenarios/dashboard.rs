//! The per-request dashboard record: the realized price vector, the chosen
//! and ex-post-optimal allocations, and the diagnosis. Exports are
//! byte-stable: fixed field order, fixed sort, shortest-roundtrip floats.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("no records to export")]
    NoRecords,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("record parse failed: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Field order is the export schema; do not reorder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DashboardRecord {
    pub scenario: String,
    pub seed: u64,
    pub request_id: u64,
    pub tenant: String,
    pub true_v: f64,
    pub observed_v: f64,
    pub chosen_tier: String,
    pub ex_post_tier: String,
    pub d_c_total: f64,
    pub latency_cost: f64,
    pub risk_cost: f64,
    pub t_r: f64,
    pub t_p: f64,
    pub t_e: f64,
    pub t_v: f64,
    pub autonomy_a: f64,
    pub gate_decision: String,
    pub queue_delay: f64,
    pub congestion_charge: f64,
    pub cache_decision: String,
    pub regret: f64,
    pub diagnosis: String,
}

pub const CSV_HEADER: &str = "scenario,seed,request_id,tenant,true_V,observed_V,chosen_tier,ex_post_tier,dC_total,latency_cost,risk_cost,T_r,T_p,T_e,T_v,autonomy_a,gate_decision,queue_delay,congestion_charge,cache_decision,regret,diagnosis";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

impl ExportFormat {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "csv" => Some(Self::Csv),
            "json" => Some(Self::Json),
            _ => None,
        }
    }
}

fn csv_line(r: &DashboardRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.scenario,
        r.seed,
        r.request_id,
        r.tenant,
        r.true_v,
        r.observed_v,
        r.chosen_tier,
        r.ex_post_tier,
        r.d_c_total,
        r.latency_cost,
        r.risk_cost,
        r.t_r,
        r.t_p,
        r.t_e,
        r.t_v,
        r.autonomy_a,
        r.gate_decision,
        r.queue_delay,
        r.congestion_charge,
        r.cache_decision,
        r.regret,
        r.diagnosis
    )
}

/// Renders records in the requested format, sorted by
/// (scenario, seed, request_id). Same records in, same bytes out.
pub fn export_dashboard(
    records: &[DashboardRecord],
    format: ExportFormat,
) -> Result<String, ExportError> {
    if records.is_empty() {
        return Err(ExportError::NoRecords);
    }
    let mut sorted: Vec<&DashboardRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        a.scenario
            .cmp(&b.scenario)
            .then(a.seed.cmp(&b.seed))
            .then(a.request_id.cmp(&b.request_id))
    });
    let mut out = String::new();
    match format {
        ExportFormat::Csv => {
            out.push_str(CSV_HEADER);
            out.push('\n');
            for r in sorted {
                out.push_str(&csv_line(r));
                out.push('\n');
            }
        }
        ExportFormat::Json => {
            for r in sorted {
                out.push_str(&serde_json::to_string(r).expect("record serializes"));
                out.push('\n');
            }
        }
    }
    Ok(out)
}

pub fn write_dashboard(
    path: &std::path::Path,
    records: &[DashboardRecord],
    format: ExportFormat,
) -> Result<(), ExportError> {
    let rendered = export_dashboard(records, format)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(rendered.as_bytes())?;
    Ok(())
}

/// Reads records back from a JSON-lines export.
pub fn read_dashboard_json(text: &str) -> Result<Vec<DashboardRecord>, ExportError> {
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line)?);
    }
    if out.is_empty() {
        return Err(ExportError::NoRecords);
    }
    Ok(out)
}
