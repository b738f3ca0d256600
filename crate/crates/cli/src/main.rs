use std::collections::BTreeMap;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use elfstore_core::edge::{EdgeConfig, EdgeNode};
use elfstore_core::fog::{FogConfig, FogNode, FogParams};
use elfstore_core::harness::{
    edge_id_of, emit_report, spawn_cluster, ClusterHandle, ClusterSpec, FailurePolicy, MetricsReport, NormalDist,
    OpMix, ReportFormat, Transport, Weighted, WorkloadSpec,
};
use elfstore_core::net::{serve_edge, serve_fog, SystemClock, TcpPeers};
use elfstore_core::overlay::{build_overlay, Endpoint};
use elfstore_core::{EdgeId, Error, FogId, Result};

#[derive(Parser)]
#[command(name = "elfstore", version, about = "Edge-local federated block store")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Spawn a cluster, then run the chained steps against it in order.
    Sim(SimArgs),
    /// Run one fog or edge process from a config file.
    Serve(ServeArgs),
    /// Write fog and edge config files for a localhost deployment.
    Config(ConfigArgs),
}

#[derive(Args)]
struct SimArgs {
    /// Cluster spec as JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    fogs: Option<usize>,
    #[arg(long)]
    edges_per_fog: Option<usize>,
    #[arg(long)]
    buddies: Option<usize>,
    #[arg(long)]
    rel_mean: Option<f64>,
    #[arg(long)]
    rel_std: Option<f64>,
    /// Edge capacity in bytes (K, M, G suffixes allowed).
    #[arg(long, value_parser = parse_bytes)]
    capacity: Option<u64>,
    #[arg(long)]
    heartbeat_ms: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    transport: Option<TransportArg>,
    /// Steps run in order: `workload [..]`, `fail [..]`, `report [..]`.
    /// Each accepts `--help`. A table report is printed at the end when no
    /// `report` step is given.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "STEP")]
    steps: Vec<String>,
}

/// One step of a `sim` chain.
#[derive(Parser)]
#[command(name = "elfstore sim")]
struct StepCli {
    #[command(subcommand)]
    step: Step,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Sim,
    Socket,
}

#[derive(Subcommand)]
enum Step {
    /// Run client operations.
    Workload(Box<WorkloadArgs>),
    /// Kill an edge and wait for its blocks to be re-replicated.
    Fail(FailArgs),
    /// Print everything observed so far.
    Report(ReportArgs),
}

#[derive(Args)]
struct WorkloadArgs {
    /// Workload spec as JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    clients: Option<usize>,
    /// Operations per client.
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long, value_parser = parse_bytes)]
    size: Option<u64>,
    /// Weighted sizes, e.g. `1K:0.5,10K:0.5`; weights default to uniform.
    #[arg(long, conflicts_with = "size")]
    sizes_list: Option<String>,
    #[arg(long)]
    reliability: Option<f64>,
    /// Weighted reliabilities, e.g. `0.9,0.99,0.999,0.9999`.
    #[arg(long, conflicts_with = "reliability")]
    reliabilities_list: Option<String>,
    /// Take a lease on each stream before writing to it.
    #[arg(long)]
    lease: bool,
    #[arg(long)]
    lease_ms: Option<u64>,
    #[arg(long)]
    min_rep: Option<usize>,
    #[arg(long)]
    max_rep: Option<usize>,
    /// Operation weights, e.g. `put=0.5,get=0.5`.
    #[arg(long)]
    mix: Option<String>,
    /// Streams shared by all clients instead of one per client.
    #[arg(long)]
    shared_streams: Option<usize>,
    #[arg(long)]
    workload_seed: Option<u64>,
}

#[derive(Args)]
struct FailArgs {
    #[arg(long, value_enum, default_value = "least-reliable")]
    policy: PolicyArg,
    /// Edge to kill with `--policy edge`.
    #[arg(long, required_if_eq("policy", "edge"))]
    edge: Option<u32>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum PolicyArg {
    LeastReliable,
    Edge,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, value_enum, default_value = "table")]
    format: FormatArg,
    /// Write to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Table,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, value_enum)]
    role: Role,
    #[arg(long)]
    config: PathBuf,
    /// Exit after this many milliseconds instead of running until killed.
    #[arg(long)]
    run_for_ms: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    Fog,
    Edge,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long, default_value_t = 4)]
    fogs: usize,
    #[arg(long, default_value_t = 4)]
    edges_per_fog: usize,
    #[arg(long, default_value_t = 1)]
    buddies: usize,
    #[arg(long, default_value_t = 0.9)]
    rel_mean: f64,
    #[arg(long, default_value_t = 0.03)]
    rel_std: f64,
    #[arg(long, value_parser = parse_bytes, default_value = "64M")]
    capacity: u64,
    #[arg(long, default_value_t = 30_000)]
    heartbeat_ms: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Fogs listen from this port up, edges after them.
    #[arg(long, default_value_t = 7400)]
    base_port: u16,
    /// Directory under which each edge keeps its replicas on disk.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_bytes(s: &str) -> std::result::Result<u64, String> {
    let s = s.trim();
    let (num, mult) = match s.char_indices().find(|(_, c)| c.is_ascii_alphabetic()) {
        Some((i, _)) => {
            let mult = match s[i..].to_ascii_uppercase().trim_end_matches('B').trim_end_matches('I') {
                "" => 1,
                "K" => 1 << 10,
                "M" => 1 << 20,
                "G" => 1 << 30,
                other => return Err(format!("unknown size unit `{other}`")),
            };
            (&s[..i], mult)
        }
        None => (s, 1),
    };
    num.trim()
        .parse::<u64>()
        .map(|n| n * mult)
        .map_err(|e| format!("size `{s}`: {e}"))
}

/// `a:p,b:q` with each weight optional; missing weights share what is left.
fn parse_weighted<T>(s: &str, value: impl Fn(&str) -> std::result::Result<T, String>) -> Result<Vec<Weighted<T>>> {
    let mut out = Vec::new();
    let mut open = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (v, p) = match part.split_once(':') {
            Some((v, p)) => (v, Some(p)),
            None => (part, None),
        };
        let v = value(v).map_err(Error::InvalidConfig)?;
        let p = match p {
            Some(p) => p
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidConfig(format!("weight `{p}`")))?,
            None => {
                open.push(out.len());
                0.0
            }
        };
        out.push(Weighted::new(v, p));
    }
    if out.is_empty() {
        return Err(Error::InvalidConfig(format!("empty list `{s}`")));
    }
    if !open.is_empty() {
        let rest = (1.0 - out.iter().map(|w| w.p).sum::<f64>()) / open.len() as f64;
        for i in open {
            out[i].p = rest;
        }
    }
    Ok(out)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

fn cluster_spec(a: &SimArgs) -> Result<ClusterSpec> {
    let mut s = match &a.config {
        Some(p) => read_json(p)?,
        None => ClusterSpec::d20(0),
    };
    if let Some(v) = a.fogs {
        s.fog_count = v;
    }
    if let Some(v) = a.edges_per_fog {
        s.edges_per_fog = v;
    }
    if let Some(v) = a.buddies {
        s.b = v;
    }
    if let Some(v) = a.rel_mean {
        s.reliability_dist.mean = v;
    }
    if let Some(v) = a.rel_std {
        s.reliability_dist.stddev = v;
    }
    if let Some(v) = a.capacity {
        s.edge_capacity = v;
    }
    if let Some(v) = a.heartbeat_ms {
        s.heartbeat_interval_ms = v;
    }
    if let Some(v) = a.seed {
        s.seed = v;
    }
    if let Some(t) = a.transport {
        s.transport = match t {
            TransportArg::Sim => Transport::Simulated,
            TransportArg::Socket => Transport::Socket,
        };
    }
    s.validate()?;
    Ok(s)
}

fn workload_spec(a: &WorkloadArgs) -> Result<WorkloadSpec> {
    let mut w = match &a.config {
        Some(p) => read_json(p)?,
        None => WorkloadSpec::puts(16, 100, 10 << 10, 0.99, (1, 5)),
    };
    if let Some(v) = a.clients {
        w.clients = v;
    }
    if let Some(v) = a.blocks {
        w.blocks_per_client = v;
    }
    if let Some(v) = a.size {
        w.block_sizes = vec![Weighted::new(v, 1.0)];
    }
    if let Some(s) = &a.sizes_list {
        w.block_sizes = parse_weighted(s, parse_bytes)?;
    }
    if let Some(v) = a.reliability {
        w.stream_reliabilities = vec![Weighted::new(v, 1.0)];
    }
    if let Some(s) = &a.reliabilities_list {
        w.stream_reliabilities = parse_weighted(s, |v| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}")))?;
    }
    if a.lease {
        w.leasing = true;
    }
    if a.lease_ms.is_some() {
        w.lease_ms = a.lease_ms;
    }
    if let Some(v) = a.min_rep {
        w.min_replicas = v;
    }
    if let Some(v) = a.max_rep {
        w.max_replicas = v;
    }
    if let Some(m) = &a.mix {
        w.op_mix = OpMix::parse(m)?;
    }
    if let Some(v) = a.shared_streams {
        w.shared_streams = v;
    }
    if a.workload_seed.is_some() {
        w.seed = a.workload_seed;
    }
    w.validate()?;
    Ok(w)
}

fn summarize(i: usize, r: &MetricsReport) -> String {
    let ops: Vec<String> = r
        .ops
        .iter()
        .map(|(name, s)| format!("{name} {}/{}", s.ok, s.count))
        .collect();
    let mut line = format!(
        "workload {i}: {}",
        if ops.is_empty() {
            "no ops".into()
        } else {
            ops.join(", ")
        }
    );
    if r.replication.puts > 0 {
        line += &format!(", mean q {:.2}", r.replication.mean_q);
    }
    if r.local_reads.gets > 0 {
        line += &format!(", local reads {:.3}", r.local_reads.fraction);
    }
    if let Some(a) = r.audits.last() {
        line += &format!(", audit {}", if a.passed { "passed" } else { "FAILED" });
    }
    line
}

const STEP_NAMES: [&str; 3] = ["workload", "fail", "report"];

/// Flags that take no value, so a step name right after one starts a step.
const SWITCHES: [&str; 3] = ["--lease", "--help", "-h"];

/// Cut the trailing arguments of `sim` into one slice per step.
fn split_steps(args: &[String]) -> Result<Vec<Vec<String>>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for (i, a) in args.iter().enumerate() {
        let after_value_flag = i > 0 && {
            let prev = &args[i - 1];
            prev.starts_with('-') && !prev.contains('=') && !SWITCHES.contains(&prev.as_str())
        };
        if STEP_NAMES.contains(&a.as_str()) && !after_value_flag {
            out.push(vec![a.clone()]);
        } else if let Some(cur) = out.last_mut() {
            cur.push(a.clone());
        } else {
            return Err(Error::InvalidConfig(format!(
                "expected one of {} but found `{a}`",
                STEP_NAMES.join(", ")
            )));
        }
    }
    Ok(out)
}

fn parse_steps(args: &[String]) -> Result<Vec<Step>> {
    split_steps(args)?
        .into_iter()
        .map(|seg| {
            let argv = std::iter::once("elfstore sim".to_owned()).chain(seg);
            StepCli::try_parse_from(argv)
                .map(|c| c.step)
                .unwrap_or_else(|e| e.exit())
        })
        .map(Ok)
        .collect()
}

fn run_sim(a: SimArgs) -> Result<()> {
    let spec = cluster_spec(&a)?;
    let steps = parse_steps(&a.steps)?;
    eprintln!(
        "spawning {} fogs x {} edges (b = {}, seed {})",
        spec.fog_count, spec.edges_per_fog, spec.b, spec.seed
    );
    let mut cluster = spawn_cluster(&spec)?;
    let result = run_steps(&mut cluster, steps);
    cluster.shutdown();
    result
}

fn run_steps(cluster: &mut ClusterHandle, steps: Vec<Step>) -> Result<()> {
    let mut workloads = 0;
    let mut reported = false;
    for step in steps {
        match step {
            Step::Workload(w) => {
                let spec = workload_spec(&w)?;
                let r = cluster.run_workload(&spec)?;
                eprintln!("{}", summarize(workloads, &r));
                workloads += 1;
            }
            Step::Fail(f) => {
                let policy = match f.policy {
                    PolicyArg::LeastReliable => FailurePolicy::LeastReliable,
                    PolicyArg::Edge => FailurePolicy::Edge(EdgeId(f.edge.expect("required by clap"))),
                };
                let edge = cluster.inject_edge_failure(policy)?;
                let rec = cluster.await_recovery()?;
                eprintln!(
                    "failed {edge} (r = {:.4}) under {}: lost {}, recovered {}, audit {}",
                    rec.edge_reliability,
                    rec.fog_id,
                    rec.blocks_lost,
                    rec.blocks_recovered,
                    if rec.audit.passed { "passed" } else { "FAILED" }
                );
            }
            Step::Report(r) => {
                let format = match r.format {
                    FormatArg::Json => ReportFormat::Json,
                    FormatArg::Table => ReportFormat::Table,
                };
                let text = emit_report(&cluster.report(), format, r.out.as_deref())?;
                if r.out.is_none() {
                    print!("{text}");
                }
                reported = true;
            }
        }
    }
    if !reported {
        print!("{}", emit_report(&cluster.report(), ReportFormat::Table, None)?);
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let handle = match a.role {
        Role::Fog => {
            let cfg: FogConfig = read_json(&a.config)?;
            let me = cfg.overlay.descriptor(cfg.fog_id)?.address.clone();
            let peers: BTreeMap<FogId, Endpoint> = cfg
                .overlay
                .fogs
                .iter()
                .map(|(id, d)| (*id, d.address.clone()))
                .collect();
            let interval = Duration::from_millis(cfg.params.heartbeat_interval_ms);
            let listener = TcpListener::bind(me.addr())?;
            let node = Arc::new(FogNode::new(cfg, Arc::new(TcpPeers::new(peers)))?);
            eprintln!("{} listening on {}", node.id(), me.addr());
            serve_fog(listener, node, interval)?
        }
        Role::Edge => {
            let cfg: EdgeConfig = read_json(&a.config)?;
            let listener = TcpListener::bind(cfg.listen.addr())?;
            let parent = cfg.parent_fog.clone();
            let interval = Duration::from_millis(cfg.heartbeat_interval_ms);
            eprintln!(
                "{} listening on {}, parent {}",
                cfg.edge_id,
                cfg.listen.addr(),
                parent.addr()
            );
            let node = Arc::new(EdgeNode::new(cfg, Arc::new(SystemClock))?);
            serve_edge(listener, node, parent, interval)?
        }
    };
    match a.run_for_ms {
        Some(ms) => std::thread::sleep(Duration::from_millis(ms)),
        None => loop {
            std::thread::park();
        },
    }
    handle.stop();
    Ok(())
}

fn write_configs(a: ConfigArgs) -> Result<()> {
    let spec = ClusterSpec {
        fog_count: a.fogs,
        edges_per_fog: a.edges_per_fog,
        b: a.buddies,
        reliability_dist: NormalDist {
            mean: a.rel_mean,
            stddev: a.rel_std,
        },
        edge_capacity: a.capacity,
        heartbeat_interval_ms: a.heartbeat_ms,
        seed: a.seed,
        transport: Transport::Socket,
        cost: Default::default(),
    };
    spec.validate()?;
    let ports = a.fogs * (1 + a.edges_per_fog);
    if a.base_port as usize + ports > u16::MAX as usize {
        return Err(Error::InvalidConfig(format!(
            "{ports} ports do not fit above {}",
            a.base_port
        )));
    }
    use rand::SeedableRng;
    let reliabilities = spec.sample_reliabilities(&mut rand_chacha::ChaCha8Rng::seed_from_u64(a.seed))?;
    let ids: Vec<FogId> = (1..=a.fogs as u32).map(FogId).collect();
    let mut overlay = build_overlay(&ids, a.buddies)?;
    for (i, &id) in ids.iter().enumerate() {
        overlay.set_endpoint(id, Endpoint::new(a.host.clone(), a.base_port + i as u16))?;
    }
    std::fs::create_dir_all(&a.out)?;
    let params = FogParams {
        heartbeat_interval_ms: a.heartbeat_ms,
        ..FogParams::default()
    };
    let mut port = a.base_port + a.fogs as u16;
    for (i, &id) in ids.iter().enumerate() {
        let fog = FogConfig {
            fog_id: id,
            overlay: overlay.clone(),
            params: params.clone(),
            seed: a.seed,
        };
        std::fs::write(
            a.out.join(format!("fog{}.json", id.0)),
            serde_json::to_string_pretty(&fog)?,
        )?;
        for j in 0..a.edges_per_fog {
            let edge_id = edge_id_of(i, j, a.edges_per_fog);
            let edge = EdgeConfig {
                edge_id,
                parent_fog: overlay.descriptor(id)?.address.clone(),
                reliability: reliabilities[i * a.edges_per_fog + j],
                capacity: a.capacity,
                heartbeat_interval_ms: a.heartbeat_ms,
                listen: Endpoint::new(a.host.clone(), port),
                store_dir: a.data_dir.as_ref().map(|d| d.join(format!("edge{}", edge_id.0))),
            };
            port += 1;
            std::fs::write(
                a.out.join(format!("edge{}.json", edge_id.0)),
                serde_json::to_string_pretty(&edge)?,
            )?;
        }
    }
    eprintln!(
        "wrote {} fog and {} edge configs to {}",
        a.fogs,
        a.fogs * a.edges_per_fog,
        a.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let r = match cli.cmd {
        Command::Sim(a) => run_sim(a),
        Command::Serve(a) => serve(a),
        Command::Config(a) => write_configs(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_sizes() {
        assert_eq!(parse_bytes("10").unwrap(), 10);
        assert_eq!(parse_bytes("10K").unwrap(), 10 << 10);
        assert_eq!(parse_bytes("64MiB").unwrap(), 64 << 20);
        assert_eq!(parse_bytes("2gb").unwrap(), 2 << 30);
        assert!(parse_bytes("3X").is_err());
        assert!(parse_bytes("K").is_err());
    }

    #[test]
    fn weighted_lists() {
        let w = parse_weighted("1K:0.25,10K", parse_bytes).unwrap();
        assert_eq!((w[0].value, w[0].p, w[1].value, w[1].p), (1024, 0.25, 10240, 0.75));
        let u = parse_weighted("0.9,0.99,0.999,0.9999", |v| v.parse::<f64>().map_err(|e| e.to_string())).unwrap();
        assert!(u.iter().all(|x| x.p == 0.25));
        assert!(parse_weighted("", parse_bytes).is_err());
    }

    #[test]
    fn chained_steps_parse() {
        let cli = Cli::try_parse_from([
            "elfstore",
            "sim",
            "--fogs",
            "4",
            "workload",
            "--clients",
            "2",
            "--lease",
            "fail",
            "--policy",
            "least-reliable",
            "workload",
            "--mix",
            "get=1",
            "report",
            "--format",
            "json",
        ])
        .unwrap();
        let Command::Sim(a) = cli.cmd else { panic!() };
        assert_eq!(a.fogs, Some(4));
        let names: Vec<&str> = parse_steps(&a.steps)
            .unwrap()
            .iter()
            .map(|s| match s {
                Step::Workload(_) => "workload",
                Step::Fail(_) => "fail",
                Step::Report(_) => "report",
            })
            .collect();
        assert_eq!(names, ["workload", "fail", "workload", "report"]);
    }

    #[test]
    fn step_names_as_values_do_not_split() {
        let args: Vec<String> = ["report", "--out", "report", "workload"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let segs = split_steps(&args).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0], ["report", "--out", "report"]);
        assert!(split_steps(&["--fogs".to_string()]).is_err());
    }
}
