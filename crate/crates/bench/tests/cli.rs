use std::fs;
use std::process::{Command, Output};

fn scar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scar")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_prints_table_and_csv() {
    let o = scar(&["run", "--skew", "1.2", "--cross", "0.5", "--txns", "2000", "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.starts_with("experiment"));
    assert!(out.contains("\nlabel,transport,protocol,"));
    assert!(out.contains("scar SR,sim,scar,SR,LR+LV+TS+PLV,ycsb,1.200,0.500,4,3,3,2000,"));
}

#[test]
fn same_seed_same_csv() {
    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<_> = (0..2).map(|i| dir.path().join(format!("{i}.csv"))).collect();
    for p in &paths {
        let o = scar(&["run", "--protocol", "occ", "--skew", "0.9", "--txns", "1500", "--csv", p.to_str().unwrap()]);
        assert!(o.status.success());
    }
    assert_eq!(fs::read(&paths[0]).unwrap(), fs::read(&paths[1]).unwrap());
}

#[test]
fn recorded_history_checks_clean_and_tampering_is_caught() {
    let dir = tempfile::tempdir().unwrap();
    let h = dir.path().join("h.txt");
    let o = scar(&[
        "run", "--isolation", "si", "--rows", "20", "--skew", "1.0", "--cross", "0.5", "--txns", "1000", "--record-history",
        h.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = scar(&["check", h.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("1000 transactions"));

    // Point every final state at a version nobody wrote.
    let text = fs::read_to_string(&h).unwrap();
    let bad: String = text
        .lines()
        .map(|l| if l.starts_with("state ") { l.replacen(" wts=", " wts=9999999", 1) } else { l.to_string() })
        .collect::<Vec<_>>()
        .join("\n");
    fs::write(&h, bad).unwrap();
    let o = scar(&["check", h.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("violation"));
}

#[test]
fn factor_and_sweep_subcommands() {
    let o = scar(&["factor", "--isolation", "si", "--skew", "1.2", "--cross", "0.5", "--txns", "1000"]);
    assert!(o.status.success());
    let out = stdout(&o);
    for row in ["scar base", "scar +LR+LV+TS+PLV", "occ +LR", "rc base"] {
        assert!(out.contains(row), "missing {row}");
    }
    let o = scar(&["sweep", "--param", "skew", "--values", "0,1.2", "--txns", "1000"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("skew=1.2"));
}

#[test]
fn failures_and_bad_configs_exit_with_errors() {
    let o = scar(&["run", "--txns", "3000", "--cross", "0.5", "--failure-at", "2ms:fail:1", "--failure-at", "8ms:recover:1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("failure of node 1"));

    let o = scar(&["run", "--replicas", "5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("replicas"));

    let o = scar(&["run", "--replicas", "2", "--failure-at", "1ms:fail:0", "--failure-at", "2ms:fail:1"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unrecoverable"));

    let o = scar(&["run", "--protocol", "occ", "--isolation", "si"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn workload_config_file_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("w.cfg");
    fs::write(&cfg, "# retwis mix\nworkload=retwis\nmix=0.5 rows=300\n").unwrap();
    let o = scar(&["run", "--config", cfg.to_str().unwrap(), "--workload", "retwis", "--skew", "0.7", "--txns", "800"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains(",retwis,0.700,"));
    let o = scar(&["run", "--workload", "tpcc", "--txns", "500", "--latency-profile", "wan3", "--nodes", "3", "--replicas", "2", "--partitions", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains(",tpcc,"));
}
