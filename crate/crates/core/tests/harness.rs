//! Workload driver, reports, and the TCP cluster.

use elfstore_core::harness::{
    emit_report, render_table, ClusterSpec, FailurePolicy, MetricsReport, OpMix, ReportFormat, SimCluster,
    SocketCluster, Transport, Weighted, WorkloadSpec,
};

fn mixed() -> WorkloadSpec {
    let mut w = WorkloadSpec::puts(4, 30, 2048, 0.99, (1, 5));
    w.op_mix = OpMix::parse("put=0.5,get=0.3,find=0.1,meta=0.1").unwrap();
    w.block_sizes = vec![Weighted::new(1024, 0.5), Weighted::new(4096, 0.5)];
    w
}

#[test]
fn report_has_every_section() {
    let mut c = SimCluster::spawn(&ClusterSpec::d20(11)).unwrap();
    let r = c.run_workload(&mixed()).unwrap();
    assert_eq!(r.transport, "simulated");
    assert_eq!((r.fogs, r.edges, r.seed), (4, 16, 11));
    for op in ["put", "get", "find", "meta_update"] {
        assert!(r.ops.contains_key(op), "missing {op}: {:?}", r.ops.keys());
    }
    let puts = r.ops["put"].ok;
    assert_eq!(
        r.replication.histogram.values().sum::<u64>(),
        puts,
        "every put lands in one q bin"
    );
    assert!(r.local_reads.gets > 0 && r.find.finds > 0 && r.meta.attempts > 0);
    assert_eq!(r.find.missed, 0);
    assert!(r.meta.ledger_consistent);
    assert!(r.audits.iter().all(|a| a.passed));
    assert!(!r.matrix_series.is_empty());

    let v: serde_json::Value = serde_json::from_str(&emit_report(&r, ReportFormat::Json, None).unwrap()).unwrap();
    for key in [
        "schema_version",
        "ops",
        "replication",
        "local_reads",
        "find",
        "meta",
        "leases",
        "traffic",
        "recovery",
        "audits",
        "matrix_series",
    ] {
        assert!(v.get(key).is_some(), "json lacks {key}");
    }
}

#[test]
fn table_agrees_with_json() {
    let mut c = SimCluster::spawn(&ClusterSpec::d20(5)).unwrap();
    c.run_workload(&WorkloadSpec::puts(4, 25, 1024, 0.99, (2, 5))).unwrap();
    c.run_workload(&WorkloadSpec::puts(4, 25, 1024, 0.99, (2, 5)).with_mix(OpMix::gets()))
        .unwrap();
    c.inject_edge_failure(FailurePolicy::LeastReliable).unwrap();
    c.await_recovery().unwrap();
    let r = c.report();
    let table = render_table(&r);
    let json = emit_report(&r, ReportFormat::Json, None).unwrap();
    let back: MetricsReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
    let line = |prefix: &str| table.lines().find(|l| l.starts_with(prefix)).unwrap().to_owned();
    assert_eq!(line("puts"), format!("puts           {}", r.replication.puts));
    assert!(line("mean q").ends_with(&r.replication.mean_q.to_string()));
    assert!(line("gets").contains(&format!("fraction {}", r.local_reads.fraction)));
    let rec = &r.recovery[0];
    assert!(line("recovery").contains(&format!("lost {} recovered {}", rec.blocks_lost, rec.blocks_recovered)));
    assert_eq!(table.lines().filter(|l| l.starts_with("audit")).count(), r.audits.len());
}

#[test]
fn empty_report_is_valid() {
    let mut c = SimCluster::spawn(&ClusterSpec::smoke(1)).unwrap();
    let r = c.report();
    let v: serde_json::Value = serde_json::from_str(&emit_report(&r, ReportFormat::Json, None).unwrap()).unwrap();
    assert_eq!(v["replication"]["puts"], 0);
    assert!(r.recovery.is_empty());
    assert!(render_table(&r).starts_with("schema_version"));
    let empty = c.run_workload(&WorkloadSpec::puts(0, 0, 1, 0.9, (1, 1))).unwrap();
    assert!(empty.ops.is_empty());
}

#[test]
fn report_is_written_to_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    let mut c = SimCluster::spawn(&ClusterSpec::smoke(2)).unwrap();
    let r = c.report();
    let text = emit_report(&r, ReportFormat::Json, Some(&path)).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), text);
}

#[test]
fn invalid_specs_are_rejected() {
    let mut s = ClusterSpec::d20(1);
    s.b = 4;
    assert!(SimCluster::spawn(&s).is_err());
    let mut w = WorkloadSpec::puts(1, 1, 1, 0.9, (1, 2));
    w.block_sizes = vec![Weighted::new(1, 0.5)];
    let mut c = SimCluster::spawn(&ClusterSpec::smoke(1)).unwrap();
    assert!(c.run_workload(&w).is_err());
    assert!(OpMix::parse("put=1,teleport=1").is_err());
}

#[test]
fn socket_cluster_survives_a_failure() {
    let mut spec = ClusterSpec::d20(3);
    spec.transport = Transport::Socket;
    spec.edges_per_fog = 3;
    spec.heartbeat_interval_ms = 50;
    let mut c = SocketCluster::spawn(&spec).unwrap();
    let put = c.run_workload(&WorkloadSpec::puts(4, 10, 2048, 0.99, (2, 5))).unwrap();
    assert_eq!(put.ops["put"].ok, 40, "{:?}", put.ops["put"].errors);
    assert!(put.audits.iter().all(|a| a.passed));
    let get = c
        .run_workload(&WorkloadSpec::puts(4, 10, 2048, 0.99, (2, 5)).with_mix(OpMix::gets()))
        .unwrap();
    assert_eq!(get.ops["get"].failed, 0);
    assert_eq!(get.local_reads.checksum_failures, 0);

    c.inject_edge_failure(FailurePolicy::LeastReliable).unwrap();
    let rec = c.await_recovery().unwrap();
    assert!(rec.complete, "{rec:?}");
    assert!(rec.audit.passed);
    let after = c
        .run_workload(&WorkloadSpec::puts(4, 10, 2048, 0.99, (2, 5)).with_mix(OpMix::gets()))
        .unwrap();
    assert_eq!(after.ops["get"].failed, 0, "{:?}", after.ops["get"].errors);
    assert_eq!(c.report().transport, "socket");
    c.shutdown();
}
