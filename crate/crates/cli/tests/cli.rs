use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use elfstore_core::fog::{GetReply, PutAck};
use elfstore_core::net::call_fog_at;
use elfstore_core::wire::{decode, FogRequest};
use elfstore_core::{md5_hex, BlockId, StreamId};

fn elfstore(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elfstore"))
        .args(args)
        .output()
        .unwrap()
}

fn json_of(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

const CHAIN: [&str; 24] = [
    "sim",
    "--fogs",
    "4",
    "--edges-per-fog",
    "4",
    "--buddies",
    "1",
    "--rel-mean",
    "0.9",
    "--rel-std",
    "0.03",
    "--capacity",
    "64M",
    "--seed",
    "9",
    "workload",
    "--clients",
    "4",
    "--blocks",
    "20",
    "--size",
    "2K",
    "report",
    "--format",
];

#[test]
fn sim_chain_produces_a_json_report() {
    let mut args = CHAIN.to_vec();
    args.push("json");
    let out = elfstore(&args);
    let v = json_of(&out);
    assert_eq!(v["fogs"], 4);
    assert_eq!(v["edges"], 16);
    assert_eq!(v["ops"]["put"]["ok"], 80);
    assert_eq!(v["replication"]["puts"], 80);
    assert!(String::from_utf8_lossy(&out.stderr).contains("workload 0:"));
    // same flags, same bytes
    assert_eq!(elfstore(&args).stdout, out.stdout);
}

#[test]
fn fail_and_table_report() {
    let out = elfstore(&[
        "sim",
        "--seed",
        "4",
        "workload",
        "--clients",
        "4",
        "--blocks",
        "25",
        "--size",
        "1K",
        "--reliability",
        "0.99",
        "--min-rep",
        "2",
        "--max-rep",
        "5",
        "fail",
        "--policy",
        "least-reliable",
        "workload",
        "--mix",
        "get=1",
        "--clients",
        "4",
        "--blocks",
        "10",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(table.starts_with("schema_version"));
    assert!(table
        .lines()
        .any(|l| l.starts_with("recovery") && l.contains("complete true audit true")));
    assert!(stderr.contains("audit passed"));
}

#[test]
fn weighted_lists_and_leases() {
    let mut args = vec![
        "sim",
        "--fogs",
        "4",
        "--edges-per-fog",
        "4",
        "--buddies",
        "1",
        "--seed",
        "2",
        "workload",
        "--clients",
        "3",
        "--blocks",
        "10",
        "--sizes-list",
        "1K:0.5,4K:0.5",
        "--reliabilities-list",
        "0.9,0.99,0.999,0.9999",
        "--lease",
        "--lease-ms",
        "2000",
        "--shared-streams",
        "1",
        "report",
        "--format",
    ];
    args.push("json");
    let v = json_of(&elfstore(&args));
    assert_eq!(v["leases"]["exclusive"], true);
    assert_eq!(v["leases"]["leased_commits"], 30);
}

#[test]
fn config_files_mirror_the_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cluster = dir.path().join("cluster.json");
    let workload = dir.path().join("workload.json");
    std::fs::write(
        &cluster,
        r#"{"fog_count": 4, "edges_per_fog": 4, "b": 1,
            "reliability_dist": {"mean": 0.9, "stddev": 0.03},
            "edge_capacity": 67108864, "seed": 9}"#,
    )
    .unwrap();
    std::fs::write(
        &workload,
        r#"{"clients": 4, "blocks_per_client": 20,
            "op_mix": {"put": 1.0, "get": 0.0, "find": 0.0, "meta_update": 0.0},
            "block_sizes": [{"value": 2048, "p": 1.0}],
            "stream_reliabilities": [{"value": 0.99, "p": 1.0}],
            "min_replicas": 1, "max_replicas": 5}"#,
    )
    .unwrap();
    let report = dir.path().join("out.json");
    let out = elfstore(&[
        "sim",
        "--config",
        cluster.to_str().unwrap(),
        "workload",
        "--config",
        workload.to_str().unwrap(),
        "report",
        "--format",
        "json",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());
    let from_file: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let mut args = CHAIN.to_vec();
    args.push("json");
    assert_eq!(from_file, json_of(&elfstore(&args)));
}

#[test]
fn bad_input_fails_cleanly() {
    for args in [
        vec!["sim", "--fogs", "2", "--buddies", "2"],
        vec!["sim", "workload", "--reliability", "1.5"],
        vec!["sim", "workload", "--mix", "put=1,jump=1"],
        vec!["sim", "teleport"],
        vec!["sim", "fail", "--policy", "edge"],
        vec!["sim", "--config", "/nonexistent.json"],
    ] {
        let out = elfstore(&args);
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(!out.stderr.is_empty());
    }
}

struct Procs(Vec<Child>);

impl Drop for Procs {
    fn drop(&mut self) {
        for c in &mut self.0 {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

fn free_port_block(n: u16) -> u16 {
    // find a base with n consecutive free ports
    'outer: for _ in 0..50 {
        let base = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        if base as u32 + n as u32 >= 65535 {
            continue;
        }
        for p in base..base + n {
            if TcpListener::bind(("127.0.0.1", p)).is_err() {
                continue 'outer;
            }
        }
        return base;
    }
    panic!("no free port range");
}

fn serve(dir: &Path, role: &str, file: &str) -> Child {
    Command::new(env!("CARGO_BIN_EXE_elfstore"))
        .args(["serve", "--role", role, "--config"])
        .arg(dir.join(file))
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap()
}

#[test]
fn served_processes_form_a_cluster() {
    let dir = tempfile::tempdir().unwrap();
    let base = free_port_block(6);
    let out = elfstore(&[
        "config",
        "--fogs",
        "2",
        "--edges-per-fog",
        "2",
        "--buddies",
        "1",
        "--heartbeat-ms",
        "100",
        "--base-port",
        &base.to_string(),
        "--data-dir",
        dir.path().join("data").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut procs = Procs(Vec::new());
    for f in ["fog1.json", "fog2.json"] {
        procs.0.push(serve(dir.path(), "fog", f));
    }
    for e in 1..=4 {
        procs.0.push(serve(dir.path(), "edge", &format!("edge{e}.json")));
    }
    let fog1 = format!("127.0.0.1:{base}");
    let fog2 = format!("127.0.0.1:{}", base + 1);
    let sid = StreamId::from("cam");
    let create = FogRequest::CreateStream {
        stream_id: sid.clone(),
        props: vec![],
        reliability: 0.9,
        bounds: None,
    };
    let deadline = Instant::now() + Duration::from_secs(20);
    loop {
        if call_fog_at(&fog1, &create, None).is_ok() {
            break;
        }
        assert!(Instant::now() < deadline, "fog1 never accepted a stream");
        thread::sleep(Duration::from_millis(100));
    }
    let data = b"frame 0001".to_vec();
    let put = FogRequest::PutBlock {
        stream_id: sid.clone(),
        block_id: BlockId::from("f1"),
        props: vec![],
        lease: None,
        client_is_edge: true,
    };
    let ack: PutAck = loop {
        // placement waits for the global matrix to form
        match call_fog_at(&fog1, &put, Some(&data)) {
            Ok((v, _)) => break decode(v).unwrap(),
            Err(e) => {
                assert!(Instant::now() < deadline, "put never succeeded: {e}");
                thread::sleep(Duration::from_millis(100));
            }
        }
    };
    assert!(ack.q >= 1);
    let get = FogRequest::GetBlock {
        stream_id: sid,
        block_id: BlockId::from("f1"),
    };
    let (reply, payload) = loop {
        match call_fog_at(&fog2, &get, None) {
            Ok((v, Some(p))) => break (decode::<GetReply>(v).unwrap(), p),
            other => {
                assert!(Instant::now() < deadline, "get from fog2 failed: {other:?}");
                thread::sleep(Duration::from_millis(100));
            }
        }
    };
    assert_eq!(payload, data);
    assert_eq!(reply.md5, md5_hex(&data));
    // replicas went to disk under the data directory
    let files = walk(&dir.path().join("data"));
    assert!(files.iter().any(|p| p.ends_with("f1.blk")), "{files:?}");
}

fn walk(p: &Path) -> Vec<String> {
    let mut out = Vec::new();
    if let Ok(rd) = std::fs::read_dir(p) {
        for e in rd.flatten() {
            let path = e.path();
            if path.is_dir() {
                out.extend(walk(&path));
            } else {
                out.push(path.display().to_string());
            }
        }
    }
    out
}
