//! Report assembly and emission: stable-order JSON, one CSV row per
//! collective, and small SVG charts.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::runner::{DetectionRecord, RawCollective, RawRun};
use crate::scenario::{Fidelity, Scenario};

#[derive(Debug, Error)]
pub enum EmitError {
    #[error("cannot write {path}: {err}")]
    Io { path: String, err: std::io::Error },
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Serialize)]
pub struct CollectiveReport {
    pub index: usize,
    pub kind: String,
    pub bytes: u64,
    pub issue_at: f64,
    pub start: f64,
    pub makespan: f64,
    pub baseline_makespan: f64,
    /// `makespan / baseline_makespan - 1`; 0 for a fault-free run.
    pub overhead: f64,
    pub strategy: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan: Option<crate::allreduce_opt::PartitionPlan>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recursive_levels: Option<usize>,
    pub integrity: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct NicTrafficRow {
    pub nic: usize,
    pub server: usize,
    pub tx_bytes: u64,
    pub rx_bytes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Totals {
    pub makespan: f64,
    pub baseline_makespan: f64,
    pub overhead: f64,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub scenario: String,
    pub seed: u64,
    pub fidelity: String,
    pub strategy: String,
    pub collectives: Vec<CollectiveReport>,
    pub detections: Vec<DetectionRecord>,
    pub nic_traffic: Vec<NicTrafficRow>,
    pub totals: Totals,
}

fn fidelity_name(f: Fidelity) -> &'static str {
    match f {
        Fidelity::Auto => "auto",
        Fidelity::Chunk => "chunk",
        Fidelity::Flow => "flow",
    }
}

pub fn assemble_report(
    scenario: &Scenario,
    seed: u64,
    fidelity: Fidelity,
    faulted: RawRun,
    baseline: RawRun,
) -> Report {
    let mut collectives = Vec::with_capacity(faulted.collectives.len());
    let mut total = 0.0;
    let mut total_base = 0.0;
    for (i, (f, b)) in faulted
        .collectives
        .iter()
        .zip(baseline.collectives.iter())
        .enumerate()
    {
        let overhead = if b.makespan > 0.0 {
            f.makespan / b.makespan - 1.0
        } else {
            0.0
        };
        total += f.makespan;
        total_base += b.makespan;
        collectives.push(CollectiveReport {
            index: i,
            kind: kind_name(f),
            bytes: f.bytes,
            issue_at: f.issue_at,
            start: f.start,
            makespan: f.makespan,
            baseline_makespan: b.makespan,
            overhead,
            strategy: f.strategy.clone(),
            plan: f.plan.clone(),
            recursive_levels: f.recursive_levels,
            integrity: f.integrity.clone(),
            notes: f.notes.clone(),
        });
    }
    let overhead = if total_base > 0.0 {
        total / total_base - 1.0
    } else {
        0.0
    };
    Report {
        scenario: scenario.name.clone(),
        seed,
        fidelity: fidelity_name(fidelity).to_string(),
        strategy: format!("{:?}", scenario.strategy).to_lowercase(),
        collectives,
        detections: faulted.detections,
        nic_traffic: faulted
            .nic_traffic
            .into_iter()
            .map(|(nic, server, tx, rx)| NicTrafficRow {
                nic,
                server,
                tx_bytes: tx,
                rx_bytes: rx,
            })
            .collect(),
        totals: Totals {
            makespan: total,
            baseline_makespan: total_base,
            overhead,
        },
    }
}

fn kind_name(c: &RawCollective) -> String {
    serde_json::to_value(c.kind)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_else(|| format!("{:?}", c.kind))
}

impl Report {
    pub fn to_json(&self) -> Result<String, EmitError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "index,kind,bytes,issue_at,start,makespan,baseline_makespan,overhead,strategy,integrity\n",
        );
        for c in &self.collectives {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                c.index,
                c.kind,
                c.bytes,
                c.issue_at,
                c.start,
                c.makespan,
                c.baseline_makespan,
                c.overhead,
                c.strategy,
                csv_quote(&c.integrity),
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub k: usize,
    pub trials: usize,
    pub mean_overhead: f64,
    pub p50_overhead: f64,
    pub p95_overhead: f64,
    pub max_overhead: f64,
}

#[derive(Debug, Serialize)]
pub struct SweepReport {
    pub scenario: String,
    pub seed: u64,
    pub strategy: String,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    pub fn to_json(&self) -> Result<String, EmitError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("k,trials,mean_overhead,p50_overhead,p95_overhead,max_overhead\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                p.k, p.trials, p.mean_overhead, p.p50_overhead, p.p95_overhead, p.max_overhead
            ));
        }
        out
    }
}

fn csv_quote(s: &str) -> String {
    if s.contains(',') || s.contains('"') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

fn write_file(path: &Path, content: &str) -> Result<PathBuf, EmitError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|err| EmitError::Io {
            path: path.display().to_string(),
            err,
        })?;
    }
    let mut f = std::fs::File::create(path).map_err(|err| EmitError::Io {
        path: path.display().to_string(),
        err,
    })?;
    f.write_all(content.as_bytes())
        .map_err(|err| EmitError::Io {
            path: path.display().to_string(),
            err,
        })?;
    Ok(path.to_path_buf())
}

/// Write a run report into `out_dir` as `<scenario>.report.{json|csv}`, plus
/// a throughput chart unless plots are disabled. Returns written paths.
pub fn emit_report(
    report: &Report,
    out_dir: &Path,
    format: Format,
    plots: bool,
) -> Result<Vec<PathBuf>, EmitError> {
    let mut written = Vec::new();
    let name = |ext: &str| out_dir.join(format!("{}.report.{ext}", report.scenario));
    match format {
        Format::Json => written.push(write_file(&name("json"), &report.to_json()?)?),
        Format::Csv => written.push(write_file(&name("csv"), &report.to_csv())?),
    }
    if plots {
        let mut by_size: Vec<(f64, f64)> = report
            .collectives
            .iter()
            .filter(|c| c.makespan > 0.0)
            .map(|c| (c.bytes as f64, c.bytes as f64 / c.makespan))
            .collect();
        by_size.sort_by(|a, b| a.0.total_cmp(&b.0));
        if by_size.len() >= 2 {
            let svg = crate::plots::line_chart(
                "throughput vs message size",
                "bytes per GPU",
                "bytes/s",
                &[("throughput".to_string(), by_size)],
            );
            written.push(write_file(
                &out_dir.join(format!("{}.throughput.svg", report.scenario)),
                &svg,
            )?);
        }
    }
    Ok(written)
}

pub fn emit_sweep(
    report: &SweepReport,
    out_dir: &Path,
    format: Format,
    plots: bool,
) -> Result<Vec<PathBuf>, EmitError> {
    let mut written = Vec::new();
    let name = |ext: &str| out_dir.join(format!("{}.sweep.{ext}", report.scenario));
    match format {
        Format::Json => written.push(write_file(&name("json"), &report.to_json()?)?),
        Format::Csv => written.push(write_file(&name("csv"), &report.to_csv())?),
    }
    if plots && report.points.len() >= 2 {
        let series: Vec<(f64, f64)> = report
            .points
            .iter()
            .map(|p| (p.k as f64, p.mean_overhead))
            .collect();
        let svg = crate::plots::line_chart(
            "overhead vs concurrent failures",
            "failures (k)",
            "mean overhead",
            &[("mean overhead".to_string(), series)],
        );
        written.push(write_file(
            &out_dir.join(format!("{}.overhead.svg", report.scenario)),
            &svg,
        )?);
    }
    Ok(written)
}
