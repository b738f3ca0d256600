//! In-process cluster on a virtual clock.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use super::audit::{audit_blocks, AuditSection};
use super::client::{ClientActor, Ctx, Gateway, OpCost, Shared};
use super::report::{MatrixSample, Metrics, MetricsReport, RecoverySection, ReportContext};
use super::{edge_id_of, pick, ClusterSpec, FailurePolicy, WorkloadSpec, SETTLE_HEARTBEATS};
use crate::edge::{EdgeConfig, EdgeNode, HeartbeatAck};
use crate::error::{Error, Result};
use crate::fog::{FogConfig, FogNode, FogParams, RecoveryReport, ReplicaBounds, StreamRecord};
use crate::net::{trace, Clock, CostModel, ManualClock, Peers};
use crate::overlay::{build_overlay, OverlayTopology};
use crate::types::{BlockRef, EdgeId, FogId, StreamId, StreamProperty};
use crate::wire::{self, EdgeRequest, FogRequest};

/// Transport between in-process nodes. Every request and response goes
/// through the wire encoding, and each exchange is charged to the calling
/// thread's trace.
pub struct SimNet {
    clock: Arc<ManualClock>,
    cost: CostModel,
    fogs: RwLock<BTreeMap<FogId, Arc<FogNode>>>,
    edges: RwLock<BTreeMap<EdgeId, Arc<EdgeNode>>>,
    down: RwLock<BTreeSet<EdgeId>>,
    next_id: AtomicU64,
}

type Reply = Result<(Value, Option<Vec<u8>>)>;

impl SimNet {
    pub fn new(clock: Arc<ManualClock>, cost: CostModel) -> Self {
        SimNet {
            clock,
            cost,
            fogs: RwLock::default(),
            edges: RwLock::default(),
            down: RwLock::default(),
            next_id: AtomicU64::new(1),
        }
    }

    pub fn add_fog(&self, node: Arc<FogNode>) {
        self.fogs.write().unwrap().insert(node.id(), node);
    }

    pub fn add_edge(&self, node: Arc<EdgeNode>) {
        self.edges.write().unwrap().insert(node.id(), node);
    }

    /// The edge stops answering.
    pub fn kill_edge(&self, edge: EdgeId) {
        self.down.write().unwrap().insert(edge);
    }

    pub fn revive_edge(&self, edge: EdgeId) {
        self.down.write().unwrap().remove(&edge);
    }

    pub fn is_down(&self, edge: EdgeId) -> bool {
        self.down.read().unwrap().contains(&edge)
    }

    fn exchange<R: Serialize + DeserializeOwned>(
        &self,
        req: &R,
        data: Option<&[u8]>,
        handler: impl FnOnce(R, Option<Vec<u8>>) -> Reply,
    ) -> Reply {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let header = wire::request_header(id, req)?;
        let mut bytes = serde_json::to_vec(&header)?.len() + data.map_or(0, <[u8]>::len);
        let (_, req) = wire::parse_request::<R>(header)?;
        let (value, payload) = match handler(req, data.map(<[u8]>::to_vec)) {
            Ok((v, p)) => (Ok(v), p),
            Err(e) => (Err(e), None),
        };
        let resp = wire::response_header(id, &value);
        bytes += serde_json::to_vec(&resp)?.len() + payload.as_ref().map_or(0, Vec::len);
        trace::exchange(&self.cost, bytes as u64);
        Ok((wire::parse_response(resp, id)?, payload))
    }

    /// Send `req` to `fog` as an outside party (a client or an edge).
    pub fn send_to_fog(&self, fog: FogId, req: &FogRequest, data: Option<&[u8]>) -> Reply {
        let node = self
            .fogs
            .read()
            .unwrap()
            .get(&fog)
            .cloned()
            .ok_or_else(|| Error::Unavailable(format!("no fog {fog}")))?;
        self.exchange(req, data, |r, d| node.handle(r, d))
    }
}

impl Peers for SimNet {
    fn call_fog(&self, _from: FogId, to: FogId, req: &FogRequest, data: Option<&[u8]>) -> Reply {
        self.send_to_fog(to, req, data)
    }

    fn call_edge(&self, _from: FogId, to: EdgeId, req: &EdgeRequest, data: Option<&[u8]>) -> Reply {
        if self.is_down(to) {
            return Err(Error::EdgeDown(to));
        }
        let node = self
            .edges
            .read()
            .unwrap()
            .get(&to)
            .cloned()
            .ok_or(Error::EdgeDown(to))?;
        self.exchange(req, data, |r, d| node.handle(r, d))
    }

    fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    fn concurrent(&self) -> bool {
        false
    }
}

struct SimGateway {
    net: Arc<SimNet>,
}

impl Gateway for SimGateway {
    fn call(&self, fog: FogId, req: FogRequest, data: Option<Vec<u8>>) -> (Reply, OpCost) {
        trace::take();
        let r = self.net.send_to_fog(fog, &req, data.as_deref());
        let t = trace::take();
        (
            r,
            OpCost {
                latency_us: t.elapsed_us,
                messages: t.messages,
                bytes: t.bytes,
            },
        )
    }

    fn now_ms(&self) -> u64 {
        self.net.now_ms()
    }
}

/// Interval between global matrix samples.
const SAMPLE_EVERY_MS: u64 = 1_000;

pub struct SimCluster {
    spec: ClusterSpec,
    clock: Arc<ManualClock>,
    net: Arc<SimNet>,
    overlay: OverlayTopology,
    fogs: Vec<Arc<FogNode>>,
    edges: Vec<Arc<EdgeNode>>,
    parent: BTreeMap<EdgeId, FogId>,
    now_us: u64,
    next_tick_us: u64,
    last_sample_ms: Option<u64>,
    catalog: Vec<super::client::CatalogEntry>,
    history: Metrics,
    /// Samples from ticks not yet attributed to a workload.
    pending: Metrics,
    failures: VecDeque<(EdgeId, u64)>,
    workloads: u64,
}

impl SimCluster {
    /// Build the cluster and run heartbeats until every fog has every
    /// partition summary.
    pub fn spawn(spec: &ClusterSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let reliabilities = spec.sample_reliabilities(&mut rng)?;
        let clock = Arc::new(ManualClock::default());
        let net = Arc::new(SimNet::new(clock.clone(), spec.cost));
        let ids: Vec<FogId> = (1..=spec.fog_count as u32).map(FogId).collect();
        let overlay = build_overlay(&ids, spec.b)?;
        let params = FogParams {
            heartbeat_interval_ms: spec.heartbeat_interval_ms,
            ..FogParams::default()
        };
        let mut fogs = Vec::new();
        let mut edges = Vec::new();
        let mut parent = BTreeMap::new();
        for (i, &fog_id) in ids.iter().enumerate() {
            let fog = Arc::new(FogNode::new(
                FogConfig {
                    fog_id,
                    overlay: overlay.clone(),
                    params: params.clone(),
                    seed: spec.seed,
                },
                net.clone(),
            )?);
            net.add_fog(fog.clone());
            fogs.push(fog);
            for j in 0..spec.edges_per_fog {
                let edge_id = edge_id_of(i, j, spec.edges_per_fog);
                let edge = Arc::new(EdgeNode::new(
                    EdgeConfig {
                        edge_id,
                        parent_fog: Default::default(),
                        reliability: reliabilities[i * spec.edges_per_fog + j],
                        capacity: spec.edge_capacity,
                        heartbeat_interval_ms: spec.heartbeat_interval_ms,
                        listen: Default::default(),
                        store_dir: None,
                    },
                    clock.clone(),
                )?);
                net.add_edge(edge.clone());
                parent.insert(edge_id, fog_id);
                edges.push(edge);
            }
        }
        let mut c = SimCluster {
            spec: spec.clone(),
            clock,
            net,
            overlay,
            fogs,
            edges,
            parent,
            now_us: 0,
            next_tick_us: 0,
            last_sample_ms: None,
            catalog: Vec::new(),
            history: Metrics::default(),
            pending: Metrics::default(),
            failures: VecDeque::new(),
            workloads: 0,
        };
        for _ in 0..4 {
            c.tick();
            if c.converged() {
                return Ok(c);
            }
        }
        Err(Error::Unavailable("global matrices did not converge".into()))
    }

    pub fn spec(&self) -> &ClusterSpec {
        &self.spec
    }

    pub fn net(&self) -> &Arc<SimNet> {
        &self.net
    }

    pub fn overlay(&self) -> &OverlayTopology {
        &self.overlay
    }

    pub fn fogs(&self) -> &[Arc<FogNode>] {
        &self.fogs
    }

    pub fn fog(&self, id: FogId) -> Option<&Arc<FogNode>> {
        self.fogs.iter().find(|f| f.id() == id)
    }

    pub fn edges(&self) -> &[Arc<EdgeNode>] {
        &self.edges
    }

    pub fn parent_of(&self, edge: EdgeId) -> Option<FogId> {
        self.parent.get(&edge).copied()
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    /// Every fog knows a summary for every fog and has a matrix.
    pub fn converged(&self) -> bool {
        self.fogs.iter().all(|f| {
            let known = f.known_summaries();
            known.len() == self.fogs.len() && known.values().all(|r| r.summary.is_some()) && f.matrix().is_some()
        })
    }

    fn set_time(&mut self, t_us: u64) {
        self.now_us = self.now_us.max(t_us);
        self.clock.set(self.now_us / 1000);
    }

    /// Run the next scheduled heartbeat round.
    pub fn tick(&mut self) {
        let t = self.next_tick_us;
        self.set_time(t);
        self.next_tick_us = t + self.spec.heartbeat_interval_ms * 1000;
        let now = self.clock.now_ms();
        trace::take();
        for edge in &self.edges {
            if self.net.is_down(edge.id()) {
                continue;
            }
            let fog = self.parent[&edge.id()];
            let hb = FogRequest::EdgeHeartbeat(edge.heartbeat_payload());
            match self
                .net
                .send_to_fog(fog, &hb, None)
                .and_then(|(v, _)| wire::decode::<HeartbeatAck>(v))
            {
                Ok(ack) => edge.ack(ack),
                Err(e) => log::warn!("heartbeat of {} failed: {e}", edge.id()),
            }
        }
        for fog in &self.fogs {
            fog.tick(now);
        }
        let buddies: BTreeSet<FogId> = self.overlay.buddy_set.iter().copied().collect();
        let deliver = |from: &FogNode, to_buddies: Option<bool>| {
            for (to, msg) in from.gossip_out() {
                if to_buddies.is_some_and(|b| b != buddies.contains(&to)) {
                    continue;
                }
                if let Err(e) = from.send_gossip(to, msg) {
                    log::warn!("gossip {} -> {to} failed: {e}", from.id());
                }
            }
        };
        for f in self.fogs.iter().filter(|f| !buddies.contains(&f.id())) {
            deliver(f, None);
        }
        for f in self.fogs.iter().filter(|f| buddies.contains(&f.id())) {
            deliver(f, Some(true));
        }
        for f in self.fogs.iter().filter(|f| buddies.contains(&f.id())) {
            deliver(f, Some(false));
        }
        let bg = trace::take();
        self.pending.traffic.background_messages += bg.messages;
        self.pending.traffic.background_bytes += bg.bytes;
        if self.last_sample_ms.is_none_or(|l| now >= l + SAMPLE_EVERY_MS) {
            self.sample_matrix();
        }
    }

    pub fn run_ticks(&mut self, n: usize) {
        for _ in 0..n {
            self.tick();
        }
    }

    fn sample_matrix(&mut self) {
        let now = self.clock.now_ms();
        self.last_sample_ms = Some(now);
        let fog = &self.fogs[0];
        if let Some(g) = fog.matrix() {
            self.pending.matrix.push(MatrixSample {
                at_ms: now,
                fog_id: fog.id(),
                r_med: g.r_med_g,
                s_med: g.s_med_g,
                quadrant_counts: g.quadrant_counts.clone(),
            });
        }
    }

    /// Run ticks due up to `t_us`, then move the clock there.
    fn advance_to(&mut self, t_us: u64) {
        while self.next_tick_us <= t_us {
            self.tick();
        }
        self.set_time(t_us);
    }

    fn gateway(&self) -> SimGateway {
        SimGateway { net: self.net.clone() }
    }

    pub fn run_workload(&mut self, w: &WorkloadSpec) -> Result<MetricsReport> {
        w.validate()?;
        let widx = self.workloads;
        self.workloads += 1;
        let seed = w
            .seed
            .unwrap_or(self.spec.seed ^ (widx + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shared = Mutex::new(Shared {
            catalog: std::mem::take(&mut self.catalog),
            metrics: Metrics::default(),
        });
        let gw = self.gateway();
        let cx = Ctx {
            w,
            gw: &gw,
            shared: &shared,
            settle_ms: SETTLE_HEARTBEATS * self.spec.heartbeat_interval_ms,
        };
        let ops = w.clients * w.blocks_per_client;
        if ops > 0 {
            let fog_ids: Vec<FogId> = self.fogs.iter().map(|f| f.id()).collect();
            let mut actors = setup_workload(w, widx, &fog_ids, &mut rng, &gw, &shared)?;
            // let the new streams' filters reach every fog
            let next = self.next_tick_us;
            self.advance_to(next);
            let mut queue = BinaryHeap::new();
            let mut seq = 0u64;
            for a in 0..actors.len() {
                queue.push(Reverse((self.now_us + rng.gen_range(0..1000), seq, a)));
                seq += 1;
            }
            while let Some(Reverse((t, _, a))) = queue.pop() {
                self.advance_to(t);
                if let Some(delay) = actors[a].step(&cx) {
                    queue.push(Reverse((t + (delay.round() as u64).max(1), seq, a)));
                    seq += 1;
                }
            }
            trace::take();
            let next = self.next_tick_us;
            self.advance_to(next);
        }
        let Shared { catalog, mut metrics } = shared.into_inner().unwrap();
        self.catalog = catalog;
        if ops > 0 {
            let audit = self.audit(&format!("workload {widx}"));
            metrics.audits.push(audit);
        }
        metrics.merge(std::mem::take(&mut self.pending));
        let report = metrics.report(&self.context());
        self.history.merge(metrics);
        Ok(report)
    }

    /// Live edges holding each block.
    pub fn hosting(&self) -> BTreeMap<BlockRef, Vec<(EdgeId, f64)>> {
        hosting_of(self.alive_edges())
    }

    pub fn audit(&self, label: &str) -> AuditSection {
        audit_blocks(label, self.now_ms(), &streams_of(&self.fogs), &self.hosting())
    }

    fn context(&self) -> ReportContext {
        report_context("simulated", &self.fogs, self.edges.len(), self.spec.seed)
    }

    pub fn alive_edges(&self) -> Vec<&Arc<EdgeNode>> {
        self.edges.iter().filter(|e| !self.net.is_down(e.id())).collect()
    }

    pub fn inject_edge_failure(&mut self, policy: FailurePolicy) -> Result<EdgeId> {
        let alive = self.alive_edges();
        if alive.is_empty() {
            return Err(Error::NothingToFail);
        }
        let victim = match policy {
            FailurePolicy::LeastReliable => alive
                .iter()
                .min_by(|a, b| a.reliability().total_cmp(&b.reliability()).then(a.id().cmp(&b.id())))
                .map(|e| e.id())
                .expect("non-empty"),
            FailurePolicy::Edge(id) => {
                if !alive.iter().any(|e| e.id() == id) {
                    return Err(Error::NotFound(format!("live edge {id}")));
                }
                id
            }
        };
        self.net.kill_edge(victim);
        self.failures.push_back((victim, self.now_ms()));
        Ok(victim)
    }

    /// Bring a failed edge back with whatever it still stores. Its parent
    /// asks for a full report on the next heartbeat.
    pub fn rejoin_edge(&mut self, edge: EdgeId) -> Result<()> {
        if !self.net.is_down(edge) {
            return Err(Error::InvalidArgument(format!("{edge} is not down")));
        }
        self.net.revive_edge(edge);
        Ok(())
    }

    /// Tick until the parent fog reports the oldest pending failure
    /// recovered, then audit.
    pub fn await_recovery(&mut self) -> Result<RecoverySection> {
        let (edge, failed_at) = self
            .failures
            .pop_front()
            .ok_or_else(|| Error::InvalidArgument("no failure to await".into()))?;
        let fog = self.fog(self.parent[&edge]).cloned().expect("parent fog");
        let reliability = self
            .edges
            .iter()
            .find(|e| e.id() == edge)
            .map_or(0.0, |e| e.reliability());
        let limit = fog.params().miss_threshold as usize + 3;
        let mut found = None;
        for _ in 0..limit {
            self.tick();
            found = fog.recoveries().into_iter().find(|r| r.failed_edge == edge);
            if found.is_some() {
                break;
            }
        }
        let rep = found.ok_or_else(|| Error::Unavailable(format!("no recovery reported for {edge}")))?;
        // spread the new summaries before auditing
        self.tick();
        let audit = self.audit(&format!("after failure of {edge}"));
        let section = recovery_section(rep, reliability, failed_at, audit)?;
        self.pending.recoveries.push(section.clone());
        Ok(section)
    }

    /// Everything observed since spawn.
    pub fn report(&mut self) -> MetricsReport {
        self.history.merge(std::mem::take(&mut self.pending));
        self.history.report(&self.context())
    }

    /// Blocks committed so far, in commit order.
    pub fn committed_blocks(&self) -> Vec<BlockRef> {
        self.catalog.iter().map(|c| c.block.clone()).collect()
    }
}

/// Create the workload's streams and its clients.
pub(super) fn setup_workload(
    w: &WorkloadSpec,
    widx: u64,
    fog_ids: &[FogId],
    rng: &mut ChaCha8Rng,
    gw: &dyn Gateway,
    shared: &Mutex<Shared>,
) -> Result<Vec<ClientActor>> {
    let fog_of = |i: usize| fog_ids[i % fog_ids.len()];
    let streams: Vec<(StreamId, FogId)> = if w.shared_streams == 0 {
        (0..w.clients)
            .map(|c| (StreamId(format!("w{widx}-c{c}")), fog_of(c)))
            .collect()
    } else {
        (0..w.shared_streams)
            .map(|k| (StreamId(format!("w{widx}-s{k}")), fog_of(k)))
            .collect()
    };
    for (sid, fog) in &streams {
        let req = FogRequest::CreateStream {
            stream_id: sid.clone(),
            props: vec![
                StreamProperty::fixed("workload", widx as i64),
                StreamProperty::dynamic("counter", 0i64),
            ],
            reliability: *pick(rng, &w.stream_reliabilities),
            bounds: Some(ReplicaBounds {
                min: w.min_replicas,
                max: w.max_replicas,
            }),
        };
        let (r, cost) = gw.call(*fog, req, None);
        shared
            .lock()
            .unwrap()
            .metrics
            .op("create_stream", cost.latency_us, r.as_ref().map(|_| ()));
        r?;
    }
    let all: Vec<StreamId> = streams.into_iter().map(|(s, _)| s).collect();
    Ok((0..w.clients)
        .map(|c| {
            let puts = if w.shared_streams == 0 {
                vec![all[c].clone()]
            } else {
                all.clone()
            };
            ClientActor::new(
                format!("client-{c}"),
                fog_of(c),
                rng.gen(),
                w.blocks_per_client,
                puts,
                all.clone(),
                format!("w{widx}-c{c}"),
            )
        })
        .collect())
}

pub(super) fn streams_of(fogs: &[Arc<FogNode>]) -> Vec<StreamRecord> {
    fogs.iter().flat_map(|f| f.owned_streams()).collect()
}

pub(super) fn hosting_of<'a>(
    edges: impl IntoIterator<Item = &'a Arc<EdgeNode>>,
) -> BTreeMap<BlockRef, Vec<(EdgeId, f64)>> {
    let mut m: BTreeMap<BlockRef, Vec<(EdgeId, f64)>> = BTreeMap::new();
    for e in edges {
        for b in e.hosted() {
            m.entry(b).or_default().push((e.id(), e.reliability()));
        }
    }
    m
}

pub(super) fn report_context(transport: &str, fogs: &[Arc<FogNode>], edges: usize, seed: u64) -> ReportContext {
    let streams = streams_of(fogs);
    ReportContext {
        transport: transport.into(),
        fogs: fogs.len(),
        edges,
        seed,
        final_versions: streams.iter().map(|s| (s.stream_id.clone(), s.version)).collect(),
        registries: streams
            .iter()
            .map(|s| {
                (
                    s.stream_id.clone(),
                    s.block_registry.iter().map(|(b, _)| b.clone()).collect(),
                )
            })
            .collect(),
    }
}

pub(super) fn recovery_section(
    rep: RecoveryReport,
    edge_reliability: f64,
    failed_at_ms: u64,
    audit: AuditSection,
) -> Result<RecoverySection> {
    let mut outcomes = BTreeMap::new();
    for b in &rep.per_block {
        let name = serde_json::to_value(b.outcome)?.as_str().unwrap_or_default().to_owned();
        *outcomes.entry(name).or_insert(0) += 1;
    }
    Ok(RecoverySection {
        failed_edge: rep.failed_edge,
        fog_id: rep.fog_id,
        edge_reliability,
        failed_at_ms,
        detected_at_ms: rep.detected_at_ms,
        blocks_lost: rep.blocks_lost,
        blocks_recovered: rep.blocks_recovered,
        complete: rep.blocks_recovered == rep.blocks_lost,
        outcomes,
        per_block: rep.per_block,
        audit,
    })
}
