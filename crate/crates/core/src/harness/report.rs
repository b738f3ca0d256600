//! Metrics collected while a cluster runs and the report built from them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::audit::AuditSection;
use super::client::{CommitRecord, LeaseEvent, MetaLedgerEntry, MetaResult};
use crate::error::{Error, Result};
use crate::fog::BlockRecovery;
use crate::types::{BlockId, EdgeId, FogId, Quadrant, StreamId};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Table,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub count: usize,
    pub min: f64,
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
}

impl Distribution {
    /// Nearest-rank percentiles.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Distribution::default();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let rank = |p: f64| v[((p * n as f64).ceil() as usize).clamp(1, n) - 1];
        Distribution {
            count: n,
            min: v[0],
            mean: v.iter().sum::<f64>() / n as f64,
            p50: rank(0.5),
            p90: rank(0.9),
            p99: rank(0.99),
            max: v[n - 1],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OpStats {
    pub count: u64,
    pub ok: u64,
    pub failed: u64,
    pub errors: BTreeMap<String, u64>,
    pub latency_us: Distribution,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplicationSection {
    pub puts: u64,
    /// Successful puts by replica count.
    pub histogram: BTreeMap<usize, u64>,
    pub mean_q: f64,
    pub reliability_unmet: u64,
    /// Hops from the client to the edge on the longest replica path.
    pub data_hops: BTreeMap<u32, u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalReadSection {
    pub gets: u64,
    pub local: u64,
    pub fraction: f64,
    /// `1/F + (1 - 1/F)(q - 1)/F` for the mean replica count of the
    /// blocks read.
    pub expected: f64,
    pub checksum_failures: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FindSection {
    pub finds: u64,
    pub found: u64,
    pub missed: u64,
    /// Misses on blocks committed within the gossip window; their filters
    /// had not reached every fog yet.
    #[serde(default)]
    pub unsettled: u64,
    /// Forwarding hops before the answering index was consulted.
    pub hops: BTreeMap<u32, u64>,
    pub max_hops: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetaStream {
    pub successes: u64,
    pub stale: u64,
    pub final_version: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetaSection {
    pub attempts: u64,
    pub succeeded: u64,
    pub stale: u64,
    pub other_failures: u64,
    pub streams: BTreeMap<StreamId, MetaStream>,
    pub ledger_consistent: bool,
    pub violations: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LeaseSection {
    pub grants: u64,
    pub renewals: u64,
    pub polls: u64,
    pub leased_commits: u64,
    /// Registry runs of consecutive blocks written under one lease.
    pub runs: u64,
    pub exclusive: bool,
    pub contiguous: bool,
    pub violations: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrafficSection {
    pub op_messages: u64,
    pub op_bytes: u64,
    pub background_messages: u64,
    pub background_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoverySection {
    pub failed_edge: EdgeId,
    pub fog_id: FogId,
    pub edge_reliability: f64,
    pub failed_at_ms: u64,
    pub detected_at_ms: u64,
    pub blocks_lost: usize,
    pub blocks_recovered: usize,
    pub complete: bool,
    pub outcomes: BTreeMap<String, u64>,
    pub per_block: Vec<BlockRecovery>,
    pub audit: AuditSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixSample {
    pub at_ms: u64,
    pub fog_id: FogId,
    pub r_med: f64,
    pub s_med: f64,
    pub quadrant_counts: BTreeMap<Quadrant, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub transport: String,
    pub fogs: usize,
    pub edges: usize,
    pub seed: u64,
    pub skipped_ops: u64,
    pub ops: BTreeMap<String, OpStats>,
    pub replication: ReplicationSection,
    pub local_reads: LocalReadSection,
    pub find: FindSection,
    pub meta: MetaSection,
    pub leases: LeaseSection,
    pub traffic: TrafficSection,
    pub recovery: Vec<RecoverySection>,
    pub audits: Vec<AuditSection>,
    pub matrix_series: Vec<MatrixSample>,
}

/// What a report needs from the cluster besides the raw samples.
#[derive(Debug, Clone, Default)]
pub(crate) struct ReportContext {
    pub transport: String,
    pub fogs: usize,
    pub edges: usize,
    pub seed: u64,
    pub final_versions: BTreeMap<StreamId, u64>,
    pub registries: BTreeMap<StreamId, Vec<BlockId>>,
}

/// Raw samples. Merging two of these concatenates them.
#[derive(Debug, Clone, Default)]
pub(crate) struct Metrics {
    pub latencies: BTreeMap<String, Vec<f64>>,
    pub errors: BTreeMap<String, BTreeMap<String, u64>>,
    pub skipped: u64,
    pub q: Vec<usize>,
    pub unmet: u64,
    pub data_hops: Vec<u32>,
    pub gets: u64,
    pub local_gets: u64,
    pub read_q: Vec<usize>,
    pub checksum_failures: u64,
    pub find_hops: Vec<u32>,
    pub find_misses: u64,
    pub find_unsettled: u64,
    pub meta_ledger: Vec<MetaLedgerEntry>,
    pub lease_events: Vec<LeaseEvent>,
    pub lease_polls: u64,
    pub commits: Vec<CommitRecord>,
    pub traffic: TrafficSection,
    pub recoveries: Vec<RecoverySection>,
    pub audits: Vec<AuditSection>,
    pub matrix: Vec<MatrixSample>,
}

fn histogram<K: Ord + Copy>(values: impl IntoIterator<Item = K>) -> BTreeMap<K, u64> {
    let mut h = BTreeMap::new();
    for v in values {
        *h.entry(v).or_insert(0) += 1;
    }
    h
}

impl Metrics {
    pub fn op(&mut self, name: &str, latency_us: f64, result: std::result::Result<(), &Error>) {
        self.latencies.entry(name.to_owned()).or_default().push(latency_us);
        if let Err(e) = result {
            *self
                .errors
                .entry(name.to_owned())
                .or_default()
                .entry(e.category().to_owned())
                .or_insert(0) += 1;
        }
    }

    pub fn merge(&mut self, other: Metrics) {
        for (k, v) in other.latencies {
            self.latencies.entry(k).or_default().extend(v);
        }
        for (op, errs) in other.errors {
            let e = self.errors.entry(op).or_default();
            for (c, n) in errs {
                *e.entry(c).or_insert(0) += n;
            }
        }
        self.skipped += other.skipped;
        self.q.extend(other.q);
        self.unmet += other.unmet;
        self.data_hops.extend(other.data_hops);
        self.gets += other.gets;
        self.local_gets += other.local_gets;
        self.read_q.extend(other.read_q);
        self.checksum_failures += other.checksum_failures;
        self.find_hops.extend(other.find_hops);
        self.find_misses += other.find_misses;
        self.find_unsettled += other.find_unsettled;
        self.meta_ledger.extend(other.meta_ledger);
        self.lease_events.extend(other.lease_events);
        self.lease_polls += other.lease_polls;
        self.commits.extend(other.commits);
        self.traffic.op_messages += other.traffic.op_messages;
        self.traffic.op_bytes += other.traffic.op_bytes;
        self.traffic.background_messages += other.traffic.background_messages;
        self.traffic.background_bytes += other.traffic.background_bytes;
        self.recoveries.extend(other.recoveries);
        self.audits.extend(other.audits);
        self.matrix.extend(other.matrix);
    }

    pub fn report(&self, ctx: &ReportContext) -> MetricsReport {
        let ops = self
            .latencies
            .iter()
            .map(|(name, lat)| {
                let errors = self.errors.get(name).cloned().unwrap_or_default();
                let failed: u64 = errors.values().sum();
                let stats = OpStats {
                    count: lat.len() as u64,
                    ok: lat.len() as u64 - failed,
                    failed,
                    errors,
                    latency_us: Distribution::of(lat),
                };
                (name.clone(), stats)
            })
            .collect();
        let mean = |v: &[usize]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<usize>() as f64 / v.len() as f64
            }
        };
        let replication = ReplicationSection {
            puts: self.q.len() as u64,
            histogram: histogram(self.q.iter().copied()),
            mean_q: mean(&self.q),
            reliability_unmet: self.unmet,
            data_hops: histogram(self.data_hops.iter().copied()),
        };
        let f = ctx.fogs.max(1) as f64;
        let read_q = mean(&self.read_q);
        let local_reads = LocalReadSection {
            gets: self.gets,
            local: self.local_gets,
            fraction: if self.gets == 0 {
                0.0
            } else {
                self.local_gets as f64 / self.gets as f64
            },
            expected: if self.read_q.is_empty() {
                0.0
            } else {
                1.0 / f + (1.0 - 1.0 / f) * (read_q - 1.0) / f
            },
            checksum_failures: self.checksum_failures,
        };
        let find = FindSection {
            finds: self.find_hops.len() as u64 + self.find_misses + self.find_unsettled,
            found: self.find_hops.len() as u64,
            missed: self.find_misses,
            unsettled: self.find_unsettled,
            hops: histogram(self.find_hops.iter().copied()),
            max_hops: self.find_hops.iter().copied().max().unwrap_or(0),
        };
        MetricsReport {
            schema_version: SCHEMA_VERSION,
            transport: ctx.transport.clone(),
            fogs: ctx.fogs,
            edges: ctx.edges,
            seed: ctx.seed,
            skipped_ops: self.skipped,
            ops,
            replication,
            local_reads,
            find,
            meta: check_meta(&self.meta_ledger, &ctx.final_versions),
            leases: check_leases(&self.lease_events, &self.commits, self.lease_polls, &ctx.registries),
            traffic: self.traffic.clone(),
            recovery: self.recoveries.clone(),
            audits: self.audits.clone(),
            matrix_series: self.matrix.clone(),
        }
    }
}

/// Every success moves its stream up by exactly one version, every
/// rejection names a version that really was stale, and the owner's final
/// version is one more than the successes.
fn check_meta(ledger: &[MetaLedgerEntry], finals: &BTreeMap<StreamId, u64>) -> MetaSection {
    let mut s = MetaSection {
        ledger_consistent: true,
        ..Default::default()
    };
    let mut new_versions: BTreeMap<&StreamId, BTreeSet<u64>> = BTreeMap::new();
    for e in ledger {
        s.attempts += 1;
        let entry = s.streams.entry(e.stream.clone()).or_default();
        match &e.result {
            MetaResult::Updated(v) => {
                s.succeeded += 1;
                entry.successes += 1;
                if *v != e.passed + 1 {
                    s.violations
                        .push(format!("{} moved {} from {} to {v}", e.client, e.stream, e.passed));
                }
                if !new_versions.entry(&e.stream).or_default().insert(*v) {
                    s.violations.push(format!("{} reached version {v} twice", e.stream));
                }
            }
            MetaResult::Stale(current) => {
                s.stale += 1;
                entry.stale += 1;
                if *current <= e.passed {
                    s.violations.push(format!(
                        "{} rejected on {} with version {} while current was {current}",
                        e.client, e.stream, e.passed
                    ));
                }
            }
            MetaResult::Failed(_) => s.other_failures += 1,
        }
    }
    for (sid, st) in s.streams.iter_mut() {
        st.final_version = finals.get(sid).copied().unwrap_or(0);
        if st.final_version != st.successes + 1 {
            s.violations.push(format!(
                "{sid}: final version {} after {} successful updates",
                st.final_version, st.successes
            ));
        }
    }
    s.ledger_consistent = s.violations.is_empty();
    s
}

struct Tenure<'a> {
    client: &'a str,
    stream: &'a StreamId,
    start: u64,
    end: u64,
}

fn check_leases(
    events: &[LeaseEvent],
    commits: &[CommitRecord],
    polls: u64,
    registries: &BTreeMap<StreamId, Vec<BlockId>>,
) -> LeaseSection {
    let mut s = LeaseSection {
        polls,
        exclusive: true,
        contiguous: true,
        ..Default::default()
    };
    let mut tenures: BTreeMap<&str, Tenure> = BTreeMap::new();
    for e in events {
        match e {
            LeaseEvent::Granted {
                client,
                stream,
                session_key,
                at_ms,
                expiry_ms,
            } => {
                s.grants += 1;
                tenures.insert(
                    session_key,
                    Tenure {
                        client,
                        stream,
                        start: *at_ms,
                        end: *expiry_ms,
                    },
                );
            }
            LeaseEvent::Renewed {
                session_key, expiry_ms, ..
            } => {
                s.renewals += 1;
                if let Some(t) = tenures.get_mut(session_key.as_str()) {
                    t.end = t.end.max(*expiry_ms);
                }
            }
        }
    }
    let list: Vec<(&str, &Tenure)> = tenures.iter().map(|(k, t)| (*k, t)).collect();
    for (i, (ka, a)) in list.iter().enumerate() {
        for (kb, b) in &list[i + 1..] {
            if a.stream == b.stream && a.client != b.client && a.start < b.end && b.start < a.end {
                s.violations.push(format!(
                    "leases {ka} ({}) and {kb} ({}) on {} overlap",
                    a.client, b.client, a.stream
                ));
            }
        }
    }
    let mut session_of: BTreeMap<(&StreamId, &BlockId), &str> = BTreeMap::new();
    for c in commits {
        let Some(key) = c.session_key.as_deref() else { continue };
        s.leased_commits += 1;
        session_of.insert((&c.block.stream_id, &c.block.block_id), key);
        match tenures.get(key) {
            Some(t) if t.start <= c.at_ms && c.at_ms < t.end => {}
            _ => s
                .violations
                .push(format!("{} committed {} outside its lease", c.client, c.block)),
        }
        for (k, t) in &list {
            if *k != key
                && t.stream == &c.block.stream_id
                && t.client != c.client
                && t.start <= c.at_ms
                && c.at_ms < t.end
            {
                s.violations.push(format!(
                    "{} committed {} during {}'s lease",
                    c.client, c.block, t.client
                ));
            }
        }
    }
    s.exclusive = s.violations.is_empty();
    for (sid, reg) in registries {
        let mut seen = BTreeSet::new();
        let mut last: Option<&str> = None;
        for bid in reg {
            let Some(key) = session_of.get(&(sid, bid)).copied() else {
                last = None;
                continue;
            };
            if last != Some(key) {
                s.runs += 1;
                if !seen.insert(key) {
                    s.contiguous = false;
                    s.violations
                        .push(format!("lease {key} on {sid} is split in the registry"));
                }
            }
            last = Some(key);
        }
    }
    s
}

fn fmt_map<K: std::fmt::Display, V: std::fmt::Display>(m: &BTreeMap<K, V>) -> String {
    if m.is_empty() {
        return "-".into();
    }
    m.iter().map(|(k, v)| format!("{k}:{v}")).collect::<Vec<_>>().join(" ")
}

/// Human-readable rendering; numbers print exactly as in the JSON form.
pub fn render_table(r: &MetricsReport) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "schema_version {}", r.schema_version);
    let _ = writeln!(
        t,
        "cluster        {} fogs, {} edges, seed {}, {}",
        r.fogs, r.edges, r.seed, r.transport
    );
    let _ = writeln!(
        t,
        "{:<14} {:>7} {:>7} {:>7} {:>12} {:>12} {:>12}",
        "op", "count", "ok", "failed", "p50_us", "p99_us", "max_us"
    );
    for (name, s) in &r.ops {
        let _ = writeln!(
            t,
            "{:<14} {:>7} {:>7} {:>7} {:>12} {:>12} {:>12}",
            name, s.count, s.ok, s.failed, s.latency_us.p50, s.latency_us.p99, s.latency_us.max
        );
        if !s.errors.is_empty() {
            let _ = writeln!(t, "  errors       {}", fmt_map(&s.errors));
        }
    }
    let rep = &r.replication;
    let _ = writeln!(t, "puts           {}", rep.puts);
    let _ = writeln!(t, "q histogram    {}", fmt_map(&rep.histogram));
    let _ = writeln!(t, "mean q         {}", rep.mean_q);
    let _ = writeln!(t, "unmet          {}", rep.reliability_unmet);
    let _ = writeln!(t, "data hops      {}", fmt_map(&rep.data_hops));
    let lr = &r.local_reads;
    let _ = writeln!(
        t,
        "gets           {} local {} fraction {} expected {}",
        lr.gets, lr.local, lr.fraction, lr.expected
    );
    let f = &r.find;
    let _ = writeln!(
        t,
        "finds          {} found {} missed {} unsettled {} max hops {}",
        f.finds, f.found, f.missed, f.unsettled, f.max_hops
    );
    let _ = writeln!(t, "find hops      {}", fmt_map(&f.hops));
    let m = &r.meta;
    let _ = writeln!(
        t,
        "meta updates   {} ok {} stale {} other {} consistent {}",
        m.attempts, m.succeeded, m.stale, m.other_failures, m.ledger_consistent
    );
    let l = &r.leases;
    let _ = writeln!(
        t,
        "leases         grants {} renewals {} polls {} commits {} runs {} exclusive {} contiguous {}",
        l.grants, l.renewals, l.polls, l.leased_commits, l.runs, l.exclusive, l.contiguous
    );
    let tr = &r.traffic;
    let _ = writeln!(
        t,
        "traffic        ops {} msgs {} bytes, background {} msgs {} bytes",
        tr.op_messages, tr.op_bytes, tr.background_messages, tr.background_bytes
    );
    for rec in &r.recovery {
        let _ = writeln!(
            t,
            "recovery       edge {} at {} lost {} recovered {} complete {} audit {}",
            rec.failed_edge, rec.fog_id, rec.blocks_lost, rec.blocks_recovered, rec.complete, rec.audit.passed
        );
    }
    for a in &r.audits {
        let _ = writeln!(
            t,
            "audit          {} blocks {} satisfied {} shortfall {} violated {} lost {} passed {}",
            a.label, a.blocks, a.satisfied, a.accepted_shortfall, a.violated, a.lost, a.passed
        );
    }
    if let (Some(first), Some(last)) = (r.matrix_series.first(), r.matrix_series.last()) {
        let _ = writeln!(
            t,
            "matrix         {} samples, r_med {} -> {}, s_med {} -> {}",
            r.matrix_series.len(),
            first.r_med,
            last.r_med,
            first.s_med,
            last.s_med
        );
    }
    t
}

/// Render `r` and write it to `out`, or return it for stdout.
pub fn emit_report(r: &MetricsReport, format: ReportFormat, out: Option<&Path>) -> Result<String> {
    let text = match format {
        ReportFormat::Json => serde_json::to_string_pretty(r)? + "\n",
        ReportFormat::Table => render_table(r),
    };
    if let Some(path) = out {
        std::fs::write(path, &text)?;
    }
    Ok(text)
}
