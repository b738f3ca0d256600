//! The same cluster as real TCP servers on localhost. Timing is wall
//! clock and runs are not deterministic.

use std::collections::{BTreeMap, VecDeque};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::audit::{audit_blocks, AuditSection};
use super::client::{CatalogEntry, Ctx, Gateway, OpCost, Shared};
use super::report::{Metrics, MetricsReport, RecoverySection};
use super::sim::{hosting_of, recovery_section, report_context, setup_workload, streams_of};
use super::{edge_id_of, ClusterSpec, FailurePolicy, WorkloadSpec, SETTLE_HEARTBEATS};
use crate::edge::{EdgeConfig, EdgeNode};
use crate::error::{Error, Result};
use crate::fog::{FogConfig, FogNode, FogParams};
use crate::net::{call_fog_at, serve_edge, serve_fog, Clock, ServerHandle, SystemClock, TcpPeers};
use crate::overlay::{build_overlay, Endpoint, OverlayTopology};
use crate::types::{EdgeId, FogId};
use crate::wire::FogRequest;

struct TcpGateway {
    fogs: BTreeMap<FogId, Endpoint>,
}

impl Gateway for TcpGateway {
    fn call(
        &self,
        fog: FogId,
        req: FogRequest,
        data: Option<Vec<u8>>,
    ) -> (Result<(serde_json::Value, Option<Vec<u8>>)>, OpCost) {
        let start = Instant::now();
        let r = match self.fogs.get(&fog) {
            Some(ep) => call_fog_at(&ep.addr(), &req, data.as_deref()),
            None => Err(Error::NotFound(format!("address of {fog}"))),
        };
        let bytes =
            data.as_ref().map_or(0, Vec::len) + r.as_ref().ok().and_then(|(_, p)| p.as_ref()).map_or(0, Vec::len);
        (
            r,
            OpCost {
                latency_us: start.elapsed().as_secs_f64() * 1e6,
                messages: 1,
                bytes: bytes as u64,
            },
        )
    }

    fn now_ms(&self) -> u64 {
        SystemClock.now_ms()
    }
}

fn bind() -> Result<(TcpListener, Endpoint)> {
    let l = TcpListener::bind("127.0.0.1:0")?;
    let a = l.local_addr()?;
    Ok((l, Endpoint::new(a.ip().to_string(), a.port())))
}

pub struct SocketCluster {
    spec: ClusterSpec,
    overlay: OverlayTopology,
    fogs: Vec<Arc<FogNode>>,
    fog_eps: BTreeMap<FogId, Endpoint>,
    servers: Vec<ServerHandle>,
    edges: Vec<Arc<EdgeNode>>,
    edge_servers: BTreeMap<EdgeId, ServerHandle>,
    parent: BTreeMap<EdgeId, FogId>,
    catalog: Vec<CatalogEntry>,
    history: Metrics,
    failures: VecDeque<(EdgeId, u64)>,
    workloads: u64,
}

impl SocketCluster {
    pub fn spawn(spec: &ClusterSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let reliabilities = spec.sample_reliabilities(&mut rng)?;
        let interval = Duration::from_millis(spec.heartbeat_interval_ms);
        let ids: Vec<FogId> = (1..=spec.fog_count as u32).map(FogId).collect();
        let mut overlay = build_overlay(&ids, spec.b)?;
        let mut listeners = Vec::new();
        let mut fog_eps = BTreeMap::new();
        for &id in &ids {
            let (l, ep) = bind()?;
            overlay.set_endpoint(id, ep.clone())?;
            fog_eps.insert(id, ep);
            listeners.push(l);
        }
        let peers = Arc::new(TcpPeers::new(fog_eps.clone()));
        let params = FogParams {
            heartbeat_interval_ms: spec.heartbeat_interval_ms,
            ..FogParams::default()
        };
        let mut c = SocketCluster {
            spec: spec.clone(),
            overlay: overlay.clone(),
            fogs: Vec::new(),
            fog_eps: fog_eps.clone(),
            servers: Vec::new(),
            edges: Vec::new(),
            edge_servers: BTreeMap::new(),
            parent: BTreeMap::new(),
            catalog: Vec::new(),
            history: Metrics::default(),
            failures: VecDeque::new(),
            workloads: 0,
        };
        for (i, (&fog_id, listener)) in ids.iter().zip(listeners).enumerate() {
            let fog = Arc::new(FogNode::new(
                FogConfig {
                    fog_id,
                    overlay: overlay.clone(),
                    params: params.clone(),
                    seed: spec.seed,
                },
                peers.clone(),
            )?);
            c.servers.push(serve_fog(listener, fog.clone(), interval)?);
            c.fogs.push(fog);
            for j in 0..spec.edges_per_fog {
                let edge_id = edge_id_of(i, j, spec.edges_per_fog);
                let (l, ep) = bind()?;
                let edge = Arc::new(EdgeNode::new(
                    EdgeConfig {
                        edge_id,
                        parent_fog: fog_eps[&fog_id].clone(),
                        reliability: reliabilities[i * spec.edges_per_fog + j],
                        capacity: spec.edge_capacity,
                        heartbeat_interval_ms: spec.heartbeat_interval_ms,
                        listen: ep,
                        store_dir: None,
                    },
                    Arc::new(SystemClock),
                )?);
                let server = serve_edge(l, edge.clone(), fog_eps[&fog_id].clone(), interval)?;
                c.edge_servers.insert(edge_id, server);
                c.parent.insert(edge_id, fog_id);
                c.edges.push(edge);
            }
        }
        let deadline = Instant::now() + interval * 50 + Duration::from_secs(5);
        while !c.converged() {
            if Instant::now() > deadline {
                c.shutdown();
                return Err(Error::Unavailable("global matrices did not converge".into()));
            }
            thread::sleep(interval / 2);
        }
        Ok(c)
    }

    pub fn converged(&self) -> bool {
        self.fogs.iter().all(|f| {
            let known = f.known_summaries();
            known.len() == self.fogs.len() && known.values().all(|r| r.summary.is_some()) && f.matrix().is_some()
        })
    }

    pub fn overlay(&self) -> &OverlayTopology {
        &self.overlay
    }

    pub fn fogs(&self) -> &[Arc<FogNode>] {
        &self.fogs
    }

    pub fn fog_endpoint(&self, fog: FogId) -> Option<&Endpoint> {
        self.fog_eps.get(&fog)
    }

    fn interval(&self) -> Duration {
        Duration::from_millis(self.spec.heartbeat_interval_ms)
    }

    pub fn run_workload(&mut self, w: &WorkloadSpec) -> Result<MetricsReport> {
        w.validate()?;
        let widx = self.workloads;
        self.workloads += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(w.seed.unwrap_or(self.spec.seed ^ (widx + 1)));
        let shared = Mutex::new(Shared {
            catalog: std::mem::take(&mut self.catalog),
            metrics: Metrics::default(),
        });
        let gw = TcpGateway {
            fogs: self.fog_eps.clone(),
        };
        let ops = w.clients * w.blocks_per_client;
        if ops > 0 {
            let fog_ids: Vec<FogId> = self.fogs.iter().map(|f| f.id()).collect();
            let actors = setup_workload(w, widx, &fog_ids, &mut rng, &gw, &shared);
            let actors = match actors {
                Ok(a) => a,
                Err(e) => {
                    self.catalog = shared.into_inner().unwrap().catalog;
                    return Err(e);
                }
            };
            thread::sleep(self.interval() * 2);
            let cx = Ctx {
                w,
                gw: &gw,
                shared: &shared,
                settle_ms: SETTLE_HEARTBEATS * self.spec.heartbeat_interval_ms,
            };
            thread::scope(|s| {
                for mut a in actors {
                    let cx = &cx;
                    s.spawn(move || loop {
                        let start = Instant::now();
                        let Some(delay) = a.step(cx) else { break };
                        let until = start + Duration::from_micros(delay as u64);
                        if let Some(wait) = until.checked_duration_since(Instant::now()) {
                            thread::sleep(wait);
                        }
                    });
                }
            });
            thread::sleep(self.interval() * 2);
        }
        let Shared { catalog, mut metrics } = shared.into_inner().unwrap();
        self.catalog = catalog;
        if ops > 0 {
            metrics.audits.push(self.audit(&format!("workload {widx}")));
        }
        let report = metrics.report(&report_context("socket", &self.fogs, self.edges.len(), self.spec.seed));
        self.history.merge(metrics);
        Ok(report)
    }

    fn alive_edges(&self) -> Vec<&Arc<EdgeNode>> {
        self.edges
            .iter()
            .filter(|e| self.edge_servers.contains_key(&e.id()))
            .collect()
    }

    pub fn audit(&self, label: &str) -> AuditSection {
        audit_blocks(
            label,
            SystemClock.now_ms(),
            &streams_of(&self.fogs),
            &hosting_of(self.alive_edges()),
        )
    }

    pub fn inject_edge_failure(&mut self, policy: FailurePolicy) -> Result<EdgeId> {
        let alive = self.alive_edges();
        let victim = match policy {
            FailurePolicy::LeastReliable => alive
                .iter()
                .min_by(|a, b| a.reliability().total_cmp(&b.reliability()).then(a.id().cmp(&b.id())))
                .map(|e| e.id())
                .ok_or(Error::NothingToFail)?,
            FailurePolicy::Edge(id) => {
                if alive.is_empty() {
                    return Err(Error::NothingToFail);
                }
                if !alive.iter().any(|e| e.id() == id) {
                    return Err(Error::NotFound(format!("live edge {id}")));
                }
                id
            }
        };
        if let Some(server) = self.edge_servers.remove(&victim) {
            server.stop();
        }
        self.failures.push_back((victim, SystemClock.now_ms()));
        Ok(victim)
    }

    pub fn await_recovery(&mut self) -> Result<RecoverySection> {
        let (edge, failed_at) = self
            .failures
            .pop_front()
            .ok_or_else(|| Error::InvalidArgument("no failure to await".into()))?;
        let fog = self
            .fogs
            .iter()
            .find(|f| f.id() == self.parent[&edge])
            .cloned()
            .expect("parent fog");
        let reliability = self
            .edges
            .iter()
            .find(|e| e.id() == edge)
            .map_or(0.0, |e| e.reliability());
        let deadline = Instant::now() + self.interval() * (fog.params().miss_threshold + 10) + Duration::from_secs(10);
        let rep = loop {
            if let Some(r) = fog.recoveries().into_iter().find(|r| r.failed_edge == edge) {
                break r;
            }
            if Instant::now() > deadline {
                return Err(Error::Unavailable(format!("no recovery reported for {edge}")));
            }
            thread::sleep(self.interval() / 2);
        };
        thread::sleep(self.interval() * 2);
        let audit = self.audit(&format!("after failure of {edge}"));
        let section = recovery_section(rep, reliability, failed_at, audit)?;
        self.history.recoveries.push(section.clone());
        Ok(section)
    }

    pub fn report(&mut self) -> MetricsReport {
        self.history
            .report(&report_context("socket", &self.fogs, self.edges.len(), self.spec.seed))
    }

    pub fn shutdown(self) {
        for (_, s) in self.edge_servers {
            s.stop();
        }
        for s in self.servers {
            s.stop();
        }
    }
}
