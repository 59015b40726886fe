//! Runs every (protocol, M, replication) cell of a spec and writes results.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use repeater_core::engine::{self, EngineError, RunResult};
use repeater_core::metrics::{normalize_sweep, MetricsError, MetricsSummary};
use repeater_core::{Protocol, SimConfig, VERSION};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::spec::{ExperimentSpec, Format};

pub const TIMESERIES_HEADER: &str = "slot,time_seconds,completed_cumulative";
pub const QUBITS_HEADER: &str = "qubit_id,injected_slot,completed_slot,transfer_slots";
pub const SUMMARY_KEYS: [&str; 16] = [
    "protocol",
    "n_repeaters",
    "m_per_node",
    "p_success",
    "t0_seconds",
    "replications",
    "latency_slots_mean",
    "latency_slots_ci95",
    "throughput_per_slot",
    "throughput_se",
    "mean_transfer_slots",
    "transfer_se",
    "max_transfer_slots",
    "completed_count",
    "in_flight_count",
    "seed",
];

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{protocol} M={m} replication {replication}: {source}")]
    Engine {
        protocol: Protocol,
        m: usize,
        replication: u64,
        #[source]
        source: EngineError,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Merged metrics of all replications for one (protocol, M).
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub protocol: Protocol,
    pub m_per_node: usize,
    pub summary: MetricsSummary,
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub protocol: Protocol,
    pub n_repeaters: usize,
    pub m_per_node: usize,
    pub p_success: f64,
    pub t0_seconds: f64,
    pub replications: u32,
    pub latency_slots_mean: Option<f64>,
    pub latency_slots_ci95: Option<f64>,
    pub throughput_per_slot: Option<f64>,
    pub throughput_se: Option<f64>,
    pub mean_transfer_slots: Option<f64>,
    pub transfer_se: Option<f64>,
    pub max_transfer_slots: Option<u64>,
    pub completed_count: u64,
    pub in_flight_count: u64,
    pub seed: u64,
}

impl SummaryRow {
    pub fn from_summary(s: &MetricsSummary) -> Self {
        let c = &s.config;
        let latency = s.latency();
        let throughput = s.throughput();
        let transfer = s.transfer();
        Self {
            protocol: c.protocol,
            n_repeaters: c.n_repeaters,
            m_per_node: c.m_per_node,
            p_success: c.p_success,
            t0_seconds: c.t0_seconds,
            replications: s.replications() as u32,
            latency_slots_mean: latency.map(|e| e.mean),
            latency_slots_ci95: latency.map(|e| e.ci95()),
            throughput_per_slot: throughput.map(|e| e.mean),
            throughput_se: throughput.map(|e| e.se),
            mean_transfer_slots: transfer.map(|e| e.mean),
            transfer_se: transfer.map(|e| e.se),
            max_transfer_slots: s.max_transfer_slots(),
            completed_count: s.completed_count(),
            in_flight_count: s.in_flight_count(),
            seed: c.seed,
        }
    }

    /// Field values in [`SUMMARY_KEYS`] order; missing values are empty.
    pub fn csv_fields(&self) -> Vec<String> {
        fn opt<T: ToString>(v: Option<T>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        vec![
            self.protocol.to_string(),
            self.n_repeaters.to_string(),
            self.m_per_node.to_string(),
            self.p_success.to_string(),
            self.t0_seconds.to_string(),
            self.replications.to_string(),
            opt(self.latency_slots_mean),
            opt(self.latency_slots_ci95),
            opt(self.throughput_per_slot),
            opt(self.throughput_se),
            opt(self.mean_transfer_slots),
            opt(self.transfer_se),
            opt(self.max_transfer_slots),
            self.completed_count.to_string(),
            self.in_flight_count.to_string(),
            self.seed.to_string(),
        ]
    }
}

/// Mean transfer time of each M relative to the smallest M, per protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub protocol: Protocol,
    pub m_per_node: usize,
    pub mean_transfer_slots: f64,
    pub normalized_transfer: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub cells: Vec<CellSummary>,
    pub sweep: Vec<SweepPoint>,
    pub files: Vec<PathBuf>,
}

impl ExperimentReport {
    pub fn rows(&self) -> Vec<SummaryRow> {
        self.cells
            .iter()
            .map(|c| SummaryRow::from_summary(&c.summary))
            .collect()
    }

    pub fn cell(&self, protocol: Protocol, m: usize) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.protocol == protocol && c.m_per_node == m)
    }
}

struct Task {
    protocol: Protocol,
    m: usize,
    replication: u64,
}

fn tasks(spec: &ExperimentSpec) -> Vec<Task> {
    let mut out = Vec::new();
    for &protocol in &spec.protocols {
        for m in spec.m_values() {
            for replication in 0..u64::from(spec.base.replications) {
                out.push(Task {
                    protocol,
                    m,
                    replication,
                });
            }
        }
    }
    out
}

/// Runs every cell without writing anything.
pub fn execute(spec: &ExperimentSpec) -> Result<ExperimentReport, RunError> {
    run_cells(spec, None)
}

/// Runs every cell, writes per-cell files as cells finish, then the merged
/// summary.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport, RunError> {
    let dir = &spec.output_dir;
    fs::create_dir_all(dir).map_err(|source| RunError::Io {
        path: dir.clone(),
        source,
    })?;
    let mut report = run_cells(spec, Some(dir))?;
    report.files.extend(write_summary(spec, &report)?);
    Ok(report)
}

fn run_cells(spec: &ExperimentSpec, out: Option<&Path>) -> Result<ExperimentReport, RunError> {
    let results: Vec<(MetricsSummary, Vec<PathBuf>)> = tasks(spec)
        .par_iter()
        .map(|t| {
            let cfg = spec.cell_config(t.protocol, t.m);
            let run = engine::run(&cfg, t.replication).map_err(|source| RunError::Engine {
                protocol: t.protocol,
                m: t.m,
                replication: t.replication,
                source,
            })?;
            let files = match out {
                Some(dir) => write_cell(spec, dir, &run)?,
                None => Vec::new(),
            };
            Ok((MetricsSummary::from_run(&run, spec.burn_in_fraction), files))
        })
        .collect::<Result<_, RunError>>()?;

    let mut cells: Vec<CellSummary> = Vec::new();
    let mut files = Vec::new();
    for (summary, written) in results {
        files.extend(written);
        let (protocol, m) = (summary.config.protocol, summary.config.m_per_node);
        match cells.last_mut() {
            Some(c) if c.protocol == protocol && c.m_per_node == m => {
                c.summary = c.summary.merge(&summary)?;
            }
            _ => cells.push(CellSummary {
                protocol,
                m_per_node: m,
                summary,
            }),
        }
    }
    let sweep = if spec.sweep.is_some() {
        sweep_points(&cells)?
    } else {
        Vec::new()
    };
    Ok(ExperimentReport {
        cells,
        sweep,
        files,
    })
}

fn sweep_points(cells: &[CellSummary]) -> Result<Vec<SweepPoint>, MetricsError> {
    let mut out = Vec::new();
    for protocol in Protocol::ALL {
        let raw: Vec<(usize, f64)> = cells
            .iter()
            .filter(|c| c.protocol == protocol)
            .filter_map(|c| c.summary.transfer().map(|e| (c.m_per_node, e.mean)))
            .collect();
        if raw.is_empty() {
            continue;
        }
        for ((m, mean), (_, norm)) in raw.iter().zip(normalize_sweep(&raw)?) {
            out.push(SweepPoint {
                protocol,
                m_per_node: *m,
                mean_transfer_slots: *mean,
                normalized_transfer: norm,
            });
        }
    }
    Ok(out)
}

fn cell_stem(cfg: &SimConfig, replication: u64) -> String {
    format!("{}_m{}_rep{}", cfg.protocol, cfg.m_per_node, replication)
}

fn csv_preamble(spec: &ExperimentSpec) -> String {
    format!("# version: {VERSION}\n# spec: {}\n", spec.provenance())
}

fn write_file(path: PathBuf, contents: &str) -> Result<PathBuf, RunError> {
    fs::write(&path, contents).map_err(|source| RunError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

fn timeseries(spec: &ExperimentSpec, run: &RunResult) -> Vec<(u64, f64, u64)> {
    run.completion_series(spec.sample_every)
        .into_iter()
        .map(|(slot, n)| (slot, run.config.slots_to_seconds(slot as f64), n))
        .collect()
}

fn write_cell(
    spec: &ExperimentSpec,
    dir: &Path,
    run: &RunResult,
) -> Result<Vec<PathBuf>, RunError> {
    let stem = cell_stem(&run.config, run.replication_index);
    let series = timeseries(spec, run);
    let mut files = Vec::new();

    if spec.wants(Format::Csv) {
        let mut ts = csv_preamble(spec);
        ts.push_str(TIMESERIES_HEADER);
        ts.push('\n');
        for (slot, secs, n) in &series {
            writeln!(ts, "{slot},{secs},{n}").unwrap();
        }
        files.push(write_file(dir.join(format!("{stem}_timeseries.csv")), &ts)?);

        let mut qs = csv_preamble(spec);
        qs.push_str(QUBITS_HEADER);
        qs.push('\n');
        for q in run.completed() {
            writeln!(
                qs,
                "{},{},{},{}",
                q.qubit_id,
                q.injected_slot,
                q.completed_slot.expect("completed"),
                q.transfer_slots().expect("completed")
            )
            .unwrap();
        }
        files.push(write_file(dir.join(format!("{stem}_qubits.csv")), &qs)?);
    }

    if spec.wants(Format::Json) {
        let qubits: Vec<_> = run
            .completed()
            .map(|q| {
                json!({
                    "qubit_id": q.qubit_id.0,
                    "injected_slot": q.injected_slot,
                    "completed_slot": q.completed_slot,
                    "transfer_slots": q.transfer_slots(),
                })
            })
            .collect();
        let doc = json!({
            "version": VERSION,
            "spec": spec,
            "protocol": run.config.protocol,
            "m_per_node": run.config.m_per_node,
            "replication": run.replication_index,
            "total_slots": run.total_slots,
            "in_flight_count": run.in_flight_count(),
            "timeseries": series
                .iter()
                .map(|(slot, secs, n)| json!({
                    "slot": slot,
                    "time_seconds": secs,
                    "completed_cumulative": n,
                }))
                .collect::<Vec<_>>(),
            "qubits": qubits,
        });
        files.push(write_file(dir.join(format!("{stem}.json")), &pretty(&doc))?);
    }
    Ok(files)
}

fn pretty(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json serializes");
    s.push('\n');
    s
}

fn write_summary(
    spec: &ExperimentSpec,
    report: &ExperimentReport,
) -> Result<Vec<PathBuf>, RunError> {
    let dir = &spec.output_dir;
    let rows = report.rows();
    let mut files = Vec::new();

    if spec.wants(Format::Csv) {
        let mut s = csv_preamble(spec);
        s.push_str(&SUMMARY_KEYS.join(","));
        s.push('\n');
        for row in &rows {
            s.push_str(&row.csv_fields().join(","));
            s.push('\n');
        }
        files.push(write_file(dir.join("summary.csv"), &s)?);

        if !report.sweep.is_empty() {
            let mut s = csv_preamble(spec);
            s.push_str("protocol,m_per_node,mean_transfer_slots,normalized_transfer\n");
            for p in &report.sweep {
                writeln!(
                    s,
                    "{},{},{},{}",
                    p.protocol, p.m_per_node, p.mean_transfer_slots, p.normalized_transfer
                )
                .unwrap();
            }
            files.push(write_file(dir.join("sweep.csv"), &s)?);
        }
    }

    if spec.wants(Format::Json) {
        let doc = json!({ "version": VERSION, "spec": spec, "summary": rows });
        files.push(write_file(dir.join("summary.json"), &pretty(&doc))?);
        if !report.sweep.is_empty() {
            let doc = json!({ "version": VERSION, "spec": spec, "sweep": report.sweep });
            files.push(write_file(dir.join("sweep.json"), &pretty(&doc))?);
        }
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::{Mode, SpecLayer};

    fn small_spec(replications: i64) -> ExperimentSpec {
        SpecLayer {
            protocols: Some(vec![Protocol::Multiplexed]),
            n_repeaters: Some(3),
            m_per_node: Some(2),
            p_success: Some(0.1),
            max_slots: Some(3000),
            seed: Some(11),
            replications: Some(replications),
            sample_every: Some(250),
            ..Default::default()
        }
        .build(Mode::Run)
        .unwrap()
    }

    #[test]
    fn separate_replications_merge_to_the_combined_run() {
        let both = execute(&small_spec(2)).unwrap();
        let spec = small_spec(2);
        let cfg = spec.cell_config(Protocol::Multiplexed, 2);
        let parts: Vec<_> = [0u64, 1]
            .iter()
            .map(|&r| {
                MetricsSummary::from_run(&engine::run(&cfg, r).unwrap(), spec.burn_in_fraction)
            })
            .collect();
        let merged = parts[1].merge(&parts[0]).unwrap();
        assert_eq!(both.cells.len(), 1);
        assert_eq!(both.cells[0].summary, merged);
        assert_eq!(both.rows()[0], SummaryRow::from_summary(&merged));
        assert_eq!(both.rows()[0].replications, 2);
    }

    #[test]
    fn summary_fields_follow_key_order() {
        let report = execute(&small_spec(1)).unwrap();
        let row = &report.rows()[0];
        let value = serde_json::to_value(row).unwrap();
        let keys: Vec<_> = value
            .as_object()
            .unwrap()
            .keys()
            .map(String::as_str)
            .collect();
        assert_eq!(keys, SUMMARY_KEYS);
        assert_eq!(row.csv_fields().len(), SUMMARY_KEYS.len());
    }

    #[test]
    fn unwritable_directory_is_an_io_error() {
        let blocker = std::env::temp_dir().join(format!("repeater-blocker-{}", std::process::id()));
        fs::write(&blocker, "x").unwrap();
        let mut spec = small_spec(1);
        spec.output_dir = blocker.join("sub");
        let err = run_experiment(&spec).unwrap_err();
        fs::remove_file(&blocker).unwrap();
        assert!(matches!(err, RunError::Io { .. }), "{err}");
    }
}
