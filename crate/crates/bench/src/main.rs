use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use scar::bench::{
    factor_analysis, latency_cdf_csv, render_table, run_experiment, sweep, to_csv, BenchError, ExperimentResult,
    ExperimentSpec, SweepParam, TransportKind,
};
use scar::cluster::{ClusterConfig, Protocol};
use scar::epoch_replication::FailureEvent;
use scar::oracle::{check_history, History};
use scar::scar_engine::{Isolation, ProtocolToggles};
use scar::transport::{millis, LatencyProfile};
use scar::workloads::WorkloadConfig;

#[derive(Parser)]
#[command(name = "scar", version, about = "Simulated partitioned, replicated transaction engine benchmarks")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and print its metrics.
    Run {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Also write the commit-latency CDF here.
        #[arg(long)]
        cdf: Option<PathBuf>,
    },
    /// Enable the coordination-reduction techniques one at a time.
    Factor {
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Run the same experiment over a list of values for one parameter.
    Sweep {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// skew, cross, replicas, nodes or epoch-ms.
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Check a recorded history file against the oracle.
    Check {
        history: PathBuf,
    },
}

#[derive(Args, Clone)]
struct ExperimentArgs {
    #[arg(long, default_value = "scar")]
    protocol: Protocol,
    /// sr or si.
    #[arg(long, default_value = "sr")]
    isolation: Isolation,
    /// Comma-separated subset of lr,lv,ts,plv, or all / none.
    #[arg(long, default_value = "all")]
    toggles: String,
    /// ycsb, retwis or tpcc.
    #[arg(long, default_value = "ycsb")]
    workload: String,
    /// Workload config file of key=value pairs; flags given explicitly win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    skew: Option<f64>,
    /// Fraction of cross-partition transactions.
    #[arg(long)]
    cross: Option<f64>,
    /// Rows per partition (ycsb, retwis).
    #[arg(long)]
    rows: Option<u64>,
    #[arg(long, default_value_t = 4)]
    nodes: u16,
    #[arg(long, default_value_t = 3)]
    replicas: u16,
    #[arg(long, default_value_t = 4)]
    workers: u16,
    #[arg(long)]
    partitions: Option<u32>,
    #[arg(long, default_value_t = 10.0)]
    epoch_ms: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Transactions to generate across the cluster.
    #[arg(long, default_value_t = 50_000)]
    txns: u64,
    /// Stop generating after this much simulated time instead.
    #[arg(long)]
    duration_ms: Option<f64>,
    /// lan, wan3, or a latency matrix file.
    #[arg(long, default_value = "lan")]
    latency_profile: String,
    /// Write the committed history here (and check it).
    #[arg(long)]
    record_history: Option<PathBuf>,
    /// `<time>:<fail|recover>:<node>`, e.g. 15ms:fail:2. Repeatable.
    #[arg(long = "failure-at")]
    failures: Vec<FailureEvent>,
    /// sim or socket.
    #[arg(long, default_value = "sim")]
    transport: TransportKind,
    /// Write the CSV rows here in addition to printing the table.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn parse_toggles(s: &str) -> Result<ProtocolToggles> {
    match s.trim().to_ascii_lowercase().as_str() {
        "all" => return Ok(ProtocolToggles::ALL),
        "none" | "base" | "" => return Ok(ProtocolToggles::NONE),
        _ => {}
    }
    let mut t = ProtocolToggles::NONE;
    for part in s.split(',') {
        match part.trim().to_ascii_lowercase().as_str() {
            "lr" => t.local_read = true,
            "lv" => t.local_validation = true,
            "ts" => t.ts_sync = true,
            "plv" => t.plv = true,
            other => bail!("unknown technique {other:?} in --toggles (expected lr, lv, ts, plv)"),
        }
    }
    Ok(t)
}

fn latency_profile(arg: &str, nodes: u16) -> Result<LatencyProfile> {
    Ok(match arg {
        "lan" => LatencyProfile::lan(nodes as usize),
        "wan3" => LatencyProfile::wan3(),
        path => LatencyProfile::load(Path::new(path)).with_context(|| format!("loading latency profile {path}"))?,
    })
}

impl ExperimentArgs {
    fn workload(&self) -> Result<WorkloadConfig> {
        let mut text = format!("workload={} rows=10000\n", self.workload);
        if let Some(path) = &self.config {
            text += &fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        }
        let mut w: WorkloadConfig = text.parse().context("workload config")?;
        if let Some(s) = self.skew {
            w.set_skew(s);
        }
        if let Some(c) = self.cross {
            w.set_cross_ratio(c);
        }
        if let Some(r) = self.rows {
            w.set_rows(r);
        }
        Ok(w)
    }

    fn spec(&self, label: String) -> Result<ExperimentSpec> {
        if self.epoch_ms.is_nan() || self.epoch_ms <= 0.0 {
            bail!("--epoch-ms must be positive");
        }
        let cluster = ClusterConfig {
            protocol: self.protocol,
            isolation: self.isolation,
            toggles: parse_toggles(&self.toggles)?,
            nodes: self.nodes,
            replicas: self.replicas,
            workers_per_node: self.workers,
            workload: self.workload()?,
            partitions: self.partitions.unwrap_or(self.nodes as u32),
            latency: latency_profile(&self.latency_profile, self.nodes)?,
            epoch_interval: (self.epoch_ms * millis(1) as f64) as u64,
            seed: self.seed,
            txn_budget: if self.duration_ms.is_some() { None } else { Some(self.txns) },
            duration: self.duration_ms.map(|d| (d * millis(1) as f64) as u64),
            failures: self.failures.clone(),
            record_history: self.record_history.is_some(),
            audit_failures: !self.failures.is_empty(),
            ..ClusterConfig::default()
        };
        let spec = ExperimentSpec { label, cluster, transport: self.transport };
        spec.validate()?;
        Ok(spec)
    }

    fn label(&self) -> String {
        format!("{} {}", self.protocol, self.isolation)
    }
}

fn write_history(path: &Path, h: &History) -> Result<()> {
    h.write_to(path).with_context(|| format!("writing {}", path.display()))
}

/// History path for the `i`th of several runs.
fn nth_path(path: &Path, i: usize) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(format!(".{i}"));
    PathBuf::from(s)
}

fn emit(exp: &ExperimentArgs, results: &[ExperimentResult], table: String) -> Result<()> {
    print!("{table}");
    if let Some(path) = &exp.record_history {
        for (i, r) in results.iter().enumerate() {
            let target = if results.len() == 1 { path.clone() } else { nth_path(path, i) };
            if let Some(h) = &r.history {
                write_history(&target, h)?;
                println!("history ({} txns, oracle ok): {}", h.records.len(), target.display());
            }
        }
    }
    for r in results {
        for a in &r.failure_audits {
            println!(
                "failure of node {} at {} us: rolled back {} txns to epoch {}",
                a.node,
                a.at / 1_000,
                a.rolled_back.len(),
                a.closed_epoch
            );
        }
    }
    let csv = to_csv(results);
    match &exp.csv {
        Some(path) => fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?,
        None => print!("\n{csv}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let unrecoverable = e
                .downcast_ref::<BenchError>()
                .is_some_and(|b| matches!(b, BenchError::Cluster(scar::cluster::ClusterError::Unrecoverable { .. })));
            ExitCode::from(if unrecoverable { 3 } else { 2 })
        }
    }
}

fn real_main() -> Result<ExitCode> {
    match Cli::parse().cmd {
        Command::Run { exp, cdf } => {
            let spec = exp.spec(exp.label())?;
            let r = run_experiment(&spec)?;
            if let Some(path) = cdf {
                fs::write(&path, latency_cdf_csv(&r, 200)).with_context(|| format!("writing {}", path.display()))?;
            }
            let table = render_table(std::slice::from_ref(&r));
            emit(&exp, &[r], table)?;
        }
        Command::Factor { exp } => {
            let base = exp.spec(exp.label())?;
            let t = factor_analysis(&base)?;
            emit(&exp, &t.results(), t.render())?;
        }
        Command::Sweep { exp, param, values } => {
            let base = exp.spec(exp.label())?;
            let results = sweep(&base, param, &values)?;
            let table = render_table(&results);
            emit(&exp, &results, table)?;
        }
        Command::Check { history } => {
            let h = History::read_from(&history).with_context(|| format!("parsing {}", history.display()))?;
            return Ok(match check_history(&h) {
                Ok(()) => {
                    println!("{}: {} transactions, {} ok", history.display(), h.records.len(), h.protocol);
                    ExitCode::SUCCESS
                }
                Err(v) => {
                    println!("{}: violation: {v}", history.display());
                    ExitCode::FAILURE
                }
            });
        }
    }
    Ok(ExitCode::SUCCESS)
}
