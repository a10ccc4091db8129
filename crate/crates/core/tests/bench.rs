use scar::bench::{
    csv_header, factor_analysis, latency_cdf_csv, render_table, run_experiment, sweep, to_csv, with_param, BenchError,
    ExperimentSpec, SweepParam,
};
use scar::cluster::{ClusterConfig, ClusterError, Protocol};
use scar::scar_engine::Isolation;
use scar::transport::MsgKind;
use scar::workloads::{WorkloadConfig, YcsbConfig};

fn spec(label: &str, skew: f64, cross: f64, txns: u64) -> ExperimentSpec {
    ExperimentSpec::new(
        label,
        ClusterConfig {
            workload: WorkloadConfig::Ycsb(YcsbConfig {
                rows_per_partition: 10_000,
                skew,
                cross_ratio: cross,
                ..Default::default()
            }),
            txn_budget: Some(txns),
            ..ClusterConfig::default()
        },
    )
}

fn validate_per_commit(s: &ExperimentSpec) -> f64 {
    let m = run_experiment(s).unwrap().metrics;
    m.per_commit(m.messages.get(MsgKind::ValidateReq))
}

#[test]
fn scar_needs_fewer_validations_than_occ() {
    let scar = spec("scar", 1.2, 0.5, 8_000);
    let mut occ = scar.clone();
    occ.cluster.protocol = Protocol::Occ;
    assert!(validate_per_commit(&scar) < validate_per_commit(&occ));
}

#[test]
fn factor_analysis_removes_messages_step_by_step() {
    let t = factor_analysis(&spec("f", 1.2, 0.5, 8_000)).unwrap();
    let msgs = |label: &str, kind| t.get(label).unwrap().metrics.messages.get(kind);
    assert!(msgs("scar +LR", MsgKind::ReadReq) < msgs("scar base", MsgKind::ReadReq));
    assert!(msgs("scar +LR+LV", MsgKind::ValidateReq) < msgs("scar +LR", MsgKind::ValidateReq));
    assert!(msgs("occ +LR", MsgKind::ReadReq) < msgs("occ base", MsgKind::ReadReq));
    assert_eq!(msgs("rc base", MsgKind::ValidateReq), 0);
    assert!(t.get("scar +LR+LV+TS+PLV").is_none());
    assert_eq!(t.rows[0].speedup, 1.0);
    let table = t.render();
    assert_eq!(table.lines().count(), t.rows.len() + 1);
}

#[test]
fn plv_saves_a_round_for_snapshot_txns() {
    let mut base = spec("si", 1.2, 1.0, 4_000);
    base.cluster.isolation = Isolation::SnapshotIsolation;
    let t = factor_analysis(&base).unwrap();
    let rounds = |label: &str| {
        let m = &t.get(label).unwrap().metrics;
        let eligible = m.rounds.eligible();
        assert!(eligible > 0, "{label}: no txn locked and validated remotely");
        (m.rounds.eligible_with(1), m.rounds.eligible_with(2), eligible)
    };
    let (one, _, all) = rounds("scar +LR+LV+TS+PLV");
    assert_eq!(one, all);
    let (_, two, all) = rounds("scar +LR+LV+TS");
    assert_eq!(two, all);
}

#[test]
fn more_replicas_serve_more_reads_locally() {
    let mut base = spec("r", 0.0, 0.5, 4_000);
    base = with_param(&base, SweepParam::Nodes, 8.0).unwrap();
    let results = sweep(&base, SweepParam::Replicas, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
    let reads: Vec<u64> = results.iter().map(|r| r.metrics.messages.get(MsgKind::ReadReq)).collect();
    assert!(reads.windows(2).all(|w| w[1] <= w[0]), "{reads:?}");
    assert_eq!(*reads.last().unwrap(), 0);
}

#[test]
fn failure_schedule_runs_to_convergence() {
    let mut s = spec("fail", 0.8, 0.5, 10_000);
    s.cluster.workload.set_rows(200);
    s.cluster.record_history = true;
    s.cluster.audit_failures = true;
    s.cluster.failures = vec!["2ms:fail:3".parse().unwrap(), "12ms:recover:3".parse().unwrap()];
    let r = run_experiment(&s).unwrap();
    assert_eq!(r.failure_audits.len(), 1);
    assert!(r.history.is_some());
    assert!(r.metrics.committed > 0);
}

#[test]
fn too_many_failures_are_reported_as_unrecoverable() {
    let mut s = spec("halt", 0.0, 0.0, 10_000);
    s.cluster.replicas = 2;
    s.cluster.failures = vec!["1ms:fail:2".parse().unwrap(), "2ms:fail:3".parse().unwrap()];
    match run_experiment(&s) {
        Err(BenchError::Cluster(ClusterError::Unrecoverable { .. })) => {}
        other => panic!("expected an unrecoverable error, got {other:?}"),
    }
}

#[test]
fn invalid_specs_are_rejected_before_running() {
    let mut s = spec("bad", 0.0, 0.0, 100);
    s.cluster.replicas = 9;
    assert!(matches!(run_experiment(&s), Err(BenchError::Cluster(ClusterError::Config(_)))));
    let mut s = spec("bad", 0.0, 0.0, 100);
    s.cluster.txn_budget = None;
    assert!(matches!(run_experiment(&s), Err(BenchError::Config(_))));
    assert!(with_param(&s, SweepParam::Replicas, 2.5).is_err());
}

#[test]
fn csv_is_reproducible_and_well_formed() {
    let specs = [spec("a", 1.2, 0.5, 2_000), spec("b,quoted", 0.0, 0.0, 2_000)];
    let first: Vec<_> = specs.iter().map(|s| run_experiment(s).unwrap()).collect();
    let again: Vec<_> = specs.iter().map(|s| run_experiment(s).unwrap()).collect();
    let csv = to_csv(&first);
    assert_eq!(csv, to_csv(&again));
    let columns = csv_header().split(',').count();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), csv_header());
    let row = lines.next().unwrap();
    assert_eq!(row.split(',').count(), columns);
    assert!(lines.next().unwrap().starts_with("\"b,quoted\","));

    let cdf = latency_cdf_csv(&first[0], 50);
    assert!(cdf.starts_with("latency_ns,fraction\n"));
    assert!(cdf.trim_end().ends_with(",1.000000"));
    assert_eq!(render_table(&first).lines().count(), 3);
}
