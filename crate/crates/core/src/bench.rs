//! Experiment driver: builds a cluster from a spec, runs it, validates the
//! recorded history and renders metrics as CSV or a human table.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use thiserror::Error;

use crate::cluster::{Cluster, ClusterConfig, ClusterError, Protocol, Timer};
use crate::epoch_replication::FailureAudit;
use crate::oracle::{check_history, History, Violation};
use crate::scar_engine::{AbortReason, Isolation, ProtocolToggles};
use crate::storage::{NodeId, PartitionId};
use crate::transport::{LatencyProfile, MsgKind, Network, SimNetwork, SocketNetwork};
use crate::workloads::{Metrics, WorkloadConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TransportKind {
    /// Deterministic discrete-event network.
    #[default]
    Sim,
    /// Loopback TCP with wall-clock time.
    Socket,
}

impl FromStr for TransportKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sim" => Ok(TransportKind::Sim),
            "socket" | "tcp" => Ok(TransportKind::Socket),
            other => Err(format!("unknown transport {other:?} (expected sim or socket)")),
        }
    }
}

impl fmt::Display for TransportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransportKind::Sim => "sim",
            TransportKind::Socket => "socket",
        })
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    /// Row label in tables and CSV.
    pub label: String,
    pub cluster: ClusterConfig,
    pub transport: TransportKind,
}

impl ExperimentSpec {
    pub fn new(label: impl Into<String>, cluster: ClusterConfig) -> ExperimentSpec {
        ExperimentSpec { label: label.into(), cluster, transport: TransportKind::Sim }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        self.cluster.validate()?;
        if self.transport == TransportKind::Socket && !self.cluster.failures.is_empty() {
            return Err(BenchError::Config("failure injection needs the simulated transport".into()));
        }
        if self.cluster.txn_budget.is_none() && self.cluster.duration.is_none() {
            return Err(BenchError::Config("set a transaction budget or a duration".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid experiment: {0}")]
    Config(String),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("socket transport: {0}")]
    Io(#[from] std::io::Error),
    #[error("{label}: recorded history fails the oracle: {violation}")]
    Oracle { label: String, violation: Violation },
    #[error("{label}: replica of partition {partition} on node {node} diverges from its primary")]
    Divergence { label: String, partition: PartitionId, node: NodeId },
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub spec: ExperimentSpec,
    pub metrics: Metrics,
    /// Present when the spec asked for history recording; already checked.
    pub history: Option<History>,
    pub failure_audits: Vec<FailureAudit>,
}

/// Runs one experiment to completion. Histories are checked by the oracle
/// and replicas compared against primaries before the metrics are returned.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult, BenchError> {
    spec.validate()?;
    let cfg = spec.cluster.clone();
    match spec.transport {
        TransportKind::Sim => {
            let net = SimNetwork::new(cfg.latency.clone(), cfg.seed).with_fifo(cfg.fifo);
            finish(spec, Cluster::new(cfg, net)?)
        }
        TransportKind::Socket => {
            let net = SocketNetwork::new(cfg.nodes as usize)?;
            finish(spec, Cluster::new(cfg, net)?)
        }
    }
}

fn finish<N: Network<Timer>>(spec: &ExperimentSpec, mut cluster: Cluster<N>) -> Result<ExperimentResult, BenchError> {
    cluster.run()?;
    if let Some((partition, node)) = cluster.replica_divergence() {
        return Err(BenchError::Divergence { label: spec.label.clone(), partition, node });
    }
    let history = if spec.cluster.record_history {
        let h = cluster.history();
        check_history(&h).map_err(|violation| BenchError::Oracle { label: spec.label.clone(), violation })?;
        Some(h)
    } else {
        None
    };
    Ok(ExperimentResult {
        spec: spec.clone(),
        metrics: cluster.metrics(),
        history,
        failure_audits: cluster.failure_audits().to_vec(),
    })
}

fn toggles_label(t: ProtocolToggles) -> String {
    let mut parts = Vec::new();
    for (on, name) in [(t.local_read, "LR"), (t.local_validation, "LV"), (t.ts_sync, "TS"), (t.plv, "PLV")] {
        if on {
            parts.push(name);
        }
    }
    if parts.is_empty() {
        "base".into()
    } else {
        parts.join("+")
    }
}

fn workload_skew_cross(w: &WorkloadConfig) -> (f64, f64) {
    match w {
        WorkloadConfig::Ycsb(c) => (c.skew, c.cross_ratio),
        WorkloadConfig::Retwis(c) => (c.skew, c.cross_ratio),
        WorkloadConfig::Tpcc(c) => (c.skew, c.remote_ratio),
    }
}

const ABORT_COLUMNS: [AbortReason; 4] = [AbortReason::Busy, AbortReason::Stale, AbortReason::Blocked, AbortReason::NodeFailure];

/// Column names matching [`csv_row`].
pub fn csv_header() -> String {
    let mut cols: Vec<String> = [
        "label", "transport", "protocol", "isolation", "toggles", "workload", "skew", "cross", "nodes", "replicas", "seed",
        "committed", "attempted",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    cols.extend(ABORT_COLUMNS.iter().map(|r| format!("abort_{}", r.name())));
    cols.extend(
        [
            "rolled_back", "elapsed_ns", "throughput", "abort_rate", "p50_ns", "p90_ns", "p99_ns", "msgs_total",
            "msgs_per_commit",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    cols.extend(MsgKind::ALL.iter().map(|k| k.name().to_string()));
    cols.extend(["si_serializable_fraction", "backup_local_rate"].iter().map(|s| s.to_string()));
    cols.join(",")
}

/// One CSV line for a finished experiment. Floats use fixed precision so
/// identical runs render identical bytes.
pub fn csv_row(r: &ExperimentResult) -> String {
    let c = &r.spec.cluster;
    let m = &r.metrics;
    let (skew, cross) = workload_skew_cross(&c.workload);
    let lat = m.sorted_latencies();
    let pct = |q| crate::workloads::metrics::percentile(&lat, q);
    let mut cols = vec![
        csv_escape(&r.spec.label),
        r.spec.transport.to_string(),
        c.protocol.to_string(),
        c.isolation.to_string(),
        toggles_label(c.toggles),
        c.workload.name().to_string(),
        format!("{skew:.3}"),
        format!("{cross:.3}"),
        c.nodes.to_string(),
        c.replicas.to_string(),
        c.seed.to_string(),
        m.committed.to_string(),
        m.attempted.to_string(),
    ];
    cols.extend(ABORT_COLUMNS.iter().map(|r| m.aborts.get(r).copied().unwrap_or(0).to_string()));
    cols.extend([
        m.rolled_back.to_string(),
        m.elapsed.to_string(),
        format!("{:.3}", m.throughput()),
        format!("{:.6}", m.abort_rate()),
        pct(0.5).to_string(),
        pct(0.9).to_string(),
        pct(0.99).to_string(),
        m.messages.total().to_string(),
        format!("{:.6}", m.per_commit(m.messages.total())),
    ]);
    cols.extend(MsgKind::ALL.iter().map(|&k| m.messages.get(k).to_string()));
    cols.push(format!("{:.6}", m.si_serializable_fraction()));
    cols.push(format!("{:.6}", m.backup_local_validation_rate()));
    cols.join(",")
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn to_csv(results: &[ExperimentResult]) -> String {
    let mut out = csv_header();
    out.push('\n');
    for r in results {
        out.push_str(&csv_row(r));
        out.push('\n');
    }
    out
}

/// `latency_ns,fraction` pairs of the commit-latency CDF.
pub fn latency_cdf_csv(r: &ExperimentResult, points: usize) -> String {
    let mut out = String::from("latency_ns,fraction\n");
    for (l, f) in r.metrics.latency_cdf(points) {
        let _ = writeln!(out, "{l},{f:.6}");
    }
    out
}

fn micros(ns: u64) -> String {
    format!("{:.1}", ns as f64 / 1e3)
}

/// Aligned text table: throughput, aborts, latency percentiles and the
/// message counts that matter for coordination.
pub fn render_table(results: &[ExperimentResult]) -> String {
    let header = [
        "experiment", "commits", "tput/s", "abort%", "busy", "stale", "blocked", "nodefail", "p50us", "p90us", "p99us",
        "msg/txn", "read_req", "lock_req", "valid_req", "si_ser%",
    ];
    let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in results {
        let m = &r.metrics;
        let lat = m.sorted_latencies();
        let pct = |q| micros(crate::workloads::metrics::percentile(&lat, q));
        let abort = |k| m.aborts.get(&k).copied().unwrap_or(0).to_string();
        let si = if m.si_committed > 0 { format!("{:.1}", 100.0 * m.si_serializable_fraction()) } else { "-".into() };
        rows.push(vec![
            r.spec.label.clone(),
            m.committed.to_string(),
            format!("{:.0}", m.throughput()),
            format!("{:.2}", 100.0 * m.abort_rate()),
            abort(AbortReason::Busy),
            abort(AbortReason::Stale),
            abort(AbortReason::Blocked),
            abort(AbortReason::NodeFailure),
            pct(0.5),
            pct(0.9),
            pct(0.99),
            format!("{:.2}", m.per_commit(m.messages.total())),
            m.messages.get(MsgKind::ReadReq).to_string(),
            m.messages.get(MsgKind::LockReq).to_string(),
            m.messages.get(MsgKind::ValidateReq).to_string(),
            si,
        ]);
    }
    align(&rows)
}

fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.first().map_or(0, Vec::len);
    let widths: Vec<usize> = (0..cols).map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, cell)| if i == 0 { format!("{cell:<w$}", w = widths[i]) } else { format!("{cell:>w$}", w = widths[i]) })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct FactorRow {
    pub result: ExperimentResult,
    /// Throughput relative to the first row.
    pub speedup: f64,
    /// Messages per committed txn relative to the first row.
    pub message_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct FactorTable {
    pub rows: Vec<FactorRow>,
}

impl FactorTable {
    pub fn results(&self) -> Vec<ExperimentResult> {
        self.rows.iter().map(|r| r.result.clone()).collect()
    }

    pub fn get(&self, label: &str) -> Option<&ExperimentResult> {
        self.rows.iter().find(|r| r.result.spec.label == label).map(|r| &r.result)
    }

    pub fn render(&self) -> String {
        let mut rows = vec![["variant", "commits", "tput x", "msg/txn", "msg x", "read_req", "valid_req", "rounds/txn"]
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()];
        for row in &self.rows {
            let m = &row.result.metrics;
            let rounds: u64 = m.rounds.by_shape.iter().map(|((_, r), n)| *r as u64 * n).sum();
            rows.push(vec![
                row.result.spec.label.clone(),
                m.committed.to_string(),
                format!("{:.2}", row.speedup),
                format!("{:.2}", m.per_commit(m.messages.total())),
                format!("{:.2}", row.message_ratio),
                m.messages.get(MsgKind::ReadReq).to_string(),
                m.messages.get(MsgKind::ValidateReq).to_string(),
                format!("{:.2}", m.per_commit(rounds)),
            ]);
        }
        align(&rows)
    }
}

/// The variants a factor analysis walks through, starting from no
/// techniques and enabling one more per row.
pub fn factor_specs(base: &ExperimentSpec) -> Vec<ExperimentSpec> {
    let mut steps = vec![
        ("base", ProtocolToggles::NONE),
        ("+LR", ProtocolToggles { local_read: true, ..ProtocolToggles::NONE }),
        ("+LR+LV", ProtocolToggles { local_read: true, local_validation: true, ..ProtocolToggles::NONE }),
        ("+LR+LV+TS", ProtocolToggles { plv: false, ..ProtocolToggles::ALL }),
    ];
    if base.cluster.isolation == Isolation::SnapshotIsolation {
        steps.push(("+LR+LV+TS+PLV", ProtocolToggles::ALL));
    }
    let mut specs: Vec<ExperimentSpec> = steps
        .into_iter()
        .map(|(name, toggles)| {
            let mut s = base.clone();
            s.label = format!("scar {name}");
            s.cluster.protocol = Protocol::Scar;
            s.cluster.toggles = toggles;
            s
        })
        .collect();
    // The baselines run serializable only.
    for protocol in [Protocol::Occ, Protocol::Rc] {
        for (name, lr) in [("base", false), ("+LR", true)] {
            let mut s = base.clone();
            s.label = format!("{protocol} {name}");
            s.cluster.protocol = protocol;
            s.cluster.isolation = Isolation::Serializable;
            s.cluster.toggles = ProtocolToggles { local_read: lr, ..ProtocolToggles::NONE };
            specs.push(s);
        }
    }
    specs
}

pub fn factor_analysis(base: &ExperimentSpec) -> Result<FactorTable, BenchError> {
    let results = factor_specs(base).iter().map(run_experiment).collect::<Result<Vec<_>, _>>()?;
    let first = &results[0].metrics;
    let (t0, m0) = (first.throughput(), first.per_commit(first.messages.total()));
    let rows = results
        .into_iter()
        .map(|result| {
            let m = &result.metrics;
            let speedup = if t0 > 0.0 { m.throughput() / t0 } else { 0.0 };
            let message_ratio = if m0 > 0.0 { m.per_commit(m.messages.total()) / m0 } else { 0.0 };
            FactorRow { result, speedup, message_ratio }
        })
        .collect();
    Ok(FactorTable { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Skew,
    Cross,
    Replicas,
    Nodes,
    EpochMs,
}

impl FromStr for SweepParam {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "skew" => Ok(SweepParam::Skew),
            "cross" => Ok(SweepParam::Cross),
            "replicas" => Ok(SweepParam::Replicas),
            "nodes" => Ok(SweepParam::Nodes),
            "epoch-ms" | "epoch_ms" | "epoch" => Ok(SweepParam::EpochMs),
            other => Err(format!("cannot sweep {other:?} (expected skew, cross, replicas, nodes or epoch-ms)")),
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::Skew => "skew",
            SweepParam::Cross => "cross",
            SweepParam::Replicas => "replicas",
            SweepParam::Nodes => "nodes",
            SweepParam::EpochMs => "epoch-ms",
        })
    }
}

/// Copy of `base` with one parameter changed. Changing the node count
/// rescales the uniform latency profile and keeps at least one partition
/// per node.
pub fn with_param(base: &ExperimentSpec, param: SweepParam, value: f64) -> Result<ExperimentSpec, BenchError> {
    let mut s = base.clone();
    let c = &mut s.cluster;
    let whole = |v: f64| -> Result<u16, BenchError> {
        if v >= 1.0 && v.fract() == 0.0 && v <= u16::MAX as f64 {
            Ok(v as u16)
        } else {
            Err(BenchError::Config(format!("{param} takes a positive integer, got {v}")))
        }
    };
    match param {
        SweepParam::Skew => c.workload.set_skew(value),
        SweepParam::Cross => c.workload.set_cross_ratio(value),
        SweepParam::Replicas => c.replicas = whole(value)?,
        SweepParam::Nodes => {
            let n = whole(value)?;
            if c.latency.nodes() != n as usize {
                let one_way = c.latency.one_way(0, 1.min(c.latency.nodes() as NodeId - 1));
                c.latency = LatencyProfile::uniform(n as usize, one_way, c.latency.jitter);
            }
            c.nodes = n;
            c.partitions = c.partitions.max(n as u32);
        }
        SweepParam::EpochMs => {
            if value.is_nan() || value <= 0.0 {
                return Err(BenchError::Config(format!("epoch-ms must be positive, got {value}")));
            }
            c.epoch_interval = (value * 1e6) as u64;
        }
    }
    s.label = format!("{} {param}={value}", base.label);
    Ok(s)
}

pub fn sweep(base: &ExperimentSpec, param: SweepParam, values: &[f64]) -> Result<Vec<ExperimentResult>, BenchError> {
    values.iter().map(|&v| run_experiment(&with_param(base, param, v)?)).collect()
}
