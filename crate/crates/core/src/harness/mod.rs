//! Cluster construction, workloads, failure injection and metrics.
//!
//! The simulated transport runs every fog and edge in one process on a
//! virtual clock with a single deterministic scheduler, so equal specs and
//! seeds give byte-identical reports. The socket transport runs the same
//! nodes as TCP servers on localhost.

mod audit;
mod client;
mod report;
mod sim;
mod socket;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

pub use audit::{audit_blocks, AuditOutcome, AuditSection, BlockAudit};
pub use client::{CommitRecord, LeaseEvent, MetaLedgerEntry};
pub use report::{
    emit_report, render_table, Distribution, FindSection, LeaseSection, LocalReadSection, MatrixSample, MetaSection,
    MetricsReport, OpStats, RecoverySection, ReplicationSection, ReportFormat, TrafficSection, SCHEMA_VERSION,
};
pub use sim::{SimCluster, SimNet};
pub use socket::SocketCluster;

use crate::error::{Error, Result};
use crate::net::CostModel;
use crate::types::EdgeId;

/// Edge reliabilities are clamped into this range when sampled.
pub const RELIABILITY_CLAMP: (f64, f64) = (0.5, 0.999);

/// Heartbeats for a new block to become findable everywhere: the edge
/// report, the neighbor's filter to its buddy, the buddy's to the rest.
pub const SETTLE_HEARTBEATS: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    #[default]
    Simulated,
    Socket,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalDist {
    pub mean: f64,
    pub stddev: f64,
}

fn default_heartbeat() -> u64 {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub fog_count: usize,
    pub edges_per_fog: usize,
    /// Buddy parameter of the overlay: `b + 1` buddy pools.
    pub b: usize,
    pub reliability_dist: NormalDist,
    pub edge_capacity: u64,
    #[serde(default = "default_heartbeat")]
    pub heartbeat_interval_ms: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub transport: Transport,
    #[serde(default)]
    pub cost: CostModel,
}

impl ClusterSpec {
    /// Four fogs of four edges each.
    pub fn d20(seed: u64) -> Self {
        ClusterSpec {
            fog_count: 4,
            edges_per_fog: 4,
            b: 1,
            reliability_dist: NormalDist {
                mean: 0.90,
                stddev: 0.03,
            },
            edge_capacity: 64 << 20,
            heartbeat_interval_ms: default_heartbeat(),
            seed,
            transport: Transport::Simulated,
            cost: CostModel::default(),
        }
    }

    /// Sixteen fogs of sixteen edges each.
    pub fn d272(seed: u64) -> Self {
        ClusterSpec {
            fog_count: 16,
            edges_per_fog: 16,
            b: 3,
            reliability_dist: NormalDist {
                mean: 0.80,
                stddev: 0.05,
            },
            ..Self::d20(seed)
        }
    }

    pub fn smoke(seed: u64) -> Self {
        ClusterSpec {
            fog_count: 1,
            edges_per_fog: 1,
            b: 0,
            ..Self::d20(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fog_count == 0 || self.edges_per_fog == 0 {
            return Err(Error::InvalidConfig(
                "need at least one fog and one edge per fog".into(),
            ));
        }
        if self.b >= self.fog_count {
            return Err(Error::InvalidConfig(format!(
                "b = {} must be below the fog count {}",
                self.b, self.fog_count
            )));
        }
        let d = self.reliability_dist;
        if !(d.mean > 0.0 && d.mean < 1.0) || d.stddev < 0.0 || !d.stddev.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "reliability distribution N({}, {})",
                d.mean, d.stddev
            )));
        }
        if self.edge_capacity == 0 || self.heartbeat_interval_ms == 0 {
            return Err(Error::InvalidConfig(
                "capacity and heartbeat interval must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Edge reliabilities in fog then edge order, drawn from the seed.
    pub fn sample_reliabilities(&self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let d = self.reliability_dist;
        let normal = Normal::new(d.mean, d.stddev).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let (lo, hi) = RELIABILITY_CLAMP;
        Ok((0..self.fog_count * self.edges_per_fog)
            .map(|_| normal.sample(rng).clamp(lo, hi))
            .collect())
    }
}

/// Edge ids are dense and grouped by parent fog.
pub fn edge_id_of(fog_index: usize, edge_index: usize, edges_per_fog: usize) -> EdgeId {
    EdgeId((fog_index * edges_per_fog + edge_index + 1) as u32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weighted<T> {
    pub value: T,
    pub p: f64,
}

impl<T> Weighted<T> {
    pub fn new(value: T, p: f64) -> Self {
        Weighted { value, p }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpMix {
    #[serde(default)]
    pub put: f64,
    #[serde(default)]
    pub get: f64,
    #[serde(default)]
    pub find: f64,
    #[serde(default)]
    pub meta_update: f64,
}

impl OpMix {
    pub fn puts() -> Self {
        OpMix {
            put: 1.0,
            get: 0.0,
            find: 0.0,
            meta_update: 0.0,
        }
    }

    pub fn gets() -> Self {
        OpMix {
            put: 0.0,
            get: 1.0,
            ..Self::puts()
        }
    }

    pub fn finds() -> Self {
        OpMix {
            put: 0.0,
            find: 1.0,
            ..Self::puts()
        }
    }

    pub fn meta_updates() -> Self {
        OpMix {
            put: 0.0,
            meta_update: 1.0,
            ..Self::puts()
        }
    }

    fn weights(&self) -> [f64; 4] {
        [self.put, self.get, self.find, self.meta_update]
    }

    /// Parse `put=0.5,get=0.5` style mixes.
    pub fn parse(s: &str) -> Result<Self> {
        let mut mix = OpMix {
            put: 0.0,
            get: 0.0,
            find: 0.0,
            meta_update: 0.0,
        };
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("mix entry `{part}`")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("mix weight `{v}`")))?;
            match k.trim() {
                "put" => mix.put = v,
                "get" => mix.get = v,
                "find" => mix.find = v,
                "meta_update" | "meta" => mix.meta_update = v,
                other => return Err(Error::InvalidConfig(format!("unknown op `{other}`"))),
            }
        }
        Ok(mix)
    }
}

fn default_poll_ms() -> u64 {
    1_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub clients: usize,
    pub op_mix: OpMix,
    /// Operations each client performs.
    pub blocks_per_client: usize,
    pub block_sizes: Vec<Weighted<u64>>,
    pub stream_reliabilities: Vec<Weighted<f64>>,
    #[serde(default)]
    pub leasing: bool,
    pub min_replicas: usize,
    pub max_replicas: usize,
    /// Streams shared by all clients; zero gives every client its own
    /// stream on its local fog.
    #[serde(default)]
    pub shared_streams: usize,
    /// Lease duration requested by clients; the fog default when absent.
    #[serde(default)]
    pub lease_ms: Option<u64>,
    /// Wait before a client retries a stream whose lease is held.
    #[serde(default = "default_poll_ms")]
    pub lease_poll_ms: u64,
    /// Seed for client choices; derived from the cluster seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl WorkloadSpec {
    /// Puts of `size` bytes at a single stream reliability.
    pub fn puts(clients: usize, per_client: usize, size: u64, reliability: f64, bounds: (usize, usize)) -> Self {
        WorkloadSpec {
            clients,
            op_mix: OpMix::puts(),
            blocks_per_client: per_client,
            block_sizes: vec![Weighted::new(size, 1.0)],
            stream_reliabilities: vec![Weighted::new(reliability, 1.0)],
            leasing: false,
            min_replicas: bounds.0,
            max_replicas: bounds.1,
            shared_streams: 0,
            lease_ms: None,
            lease_poll_ms: default_poll_ms(),
            seed: None,
        }
    }

    pub fn with_mix(mut self, mix: OpMix) -> Self {
        self.op_mix = mix;
        self
    }

    pub fn validate(&self) -> Result<()> {
        fn sums_to_one<T>(name: &str, list: &[Weighted<T>]) -> Result<()> {
            if list.is_empty() || list.iter().any(|w| w.p.is_nan() || w.p < 0.0) {
                return Err(Error::InvalidConfig(format!("{name}: empty or negative probability")));
            }
            let total: f64 = list.iter().map(|w| w.p).sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidConfig(format!("{name}: probabilities sum to {total}")));
            }
            Ok(())
        }
        sums_to_one("block_sizes", &self.block_sizes)?;
        sums_to_one("stream_reliabilities", &self.stream_reliabilities)?;
        if self
            .stream_reliabilities
            .iter()
            .any(|w| !(w.value > 0.0 && w.value < 1.0))
        {
            return Err(Error::InvalidConfig("stream reliability outside (0, 1)".into()));
        }
        let w = self.op_mix.weights();
        if w.iter().any(|x| x.is_nan() || *x < 0.0) || (self.blocks_per_client > 0 && w.iter().sum::<f64>() <= 0.0) {
            return Err(Error::InvalidConfig("op mix needs non-negative weights".into()));
        }
        if self.min_replicas == 0 || self.min_replicas > self.max_replicas {
            return Err(Error::InvalidConfig(format!(
                "replica bounds [{}, {}]",
                self.min_replicas, self.max_replicas
            )));
        }
        if self.leasing && self.lease_poll_ms == 0 {
            return Err(Error::InvalidConfig("lease poll interval must be positive".into()));
        }
        Ok(())
    }
}

pub(crate) fn pick<'a, T>(rng: &mut ChaCha8Rng, list: &'a [Weighted<T>]) -> &'a T {
    let mut x: f64 = rng.gen();
    for w in list {
        if x < w.p {
            return &w.value;
        }
        x -= w.p;
    }
    &list[list.len() - 1].value
}

/// Which edge to fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    LeastReliable,
    Edge(EdgeId),
}

/// A cluster on either transport.
pub enum ClusterHandle {
    Sim(Box<SimCluster>),
    Socket(Box<SocketCluster>),
}

pub fn spawn_cluster(spec: &ClusterSpec) -> Result<ClusterHandle> {
    Ok(match spec.transport {
        Transport::Simulated => ClusterHandle::Sim(Box::new(SimCluster::spawn(spec)?)),
        Transport::Socket => ClusterHandle::Socket(Box::new(SocketCluster::spawn(spec)?)),
    })
}

impl ClusterHandle {
    pub fn run_workload(&mut self, w: &WorkloadSpec) -> Result<MetricsReport> {
        match self {
            ClusterHandle::Sim(c) => c.run_workload(w),
            ClusterHandle::Socket(c) => c.run_workload(w),
        }
    }

    pub fn inject_edge_failure(&mut self, policy: FailurePolicy) -> Result<EdgeId> {
        match self {
            ClusterHandle::Sim(c) => c.inject_edge_failure(policy),
            ClusterHandle::Socket(c) => c.inject_edge_failure(policy),
        }
    }

    pub fn await_recovery(&mut self) -> Result<RecoverySection> {
        match self {
            ClusterHandle::Sim(c) => c.await_recovery(),
            ClusterHandle::Socket(c) => c.await_recovery(),
        }
    }

    /// Everything observed since the cluster was spawned.
    pub fn report(&mut self) -> MetricsReport {
        match self {
            ClusterHandle::Sim(c) => c.report(),
            ClusterHandle::Socket(c) => c.report(),
        }
    }

    pub fn shutdown(self) {
        if let ClusterHandle::Socket(c) = self {
            c.shutdown();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn presets_validate() {
        for s in [ClusterSpec::d20(1), ClusterSpec::d272(1), ClusterSpec::smoke(1)] {
            s.validate().unwrap();
        }
        let mut bad = ClusterSpec::d20(1);
        bad.b = 4;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sampled_reliabilities_are_clamped_and_seeded() {
        let mut spec = ClusterSpec::d272(3);
        spec.reliability_dist.stddev = 0.4;
        let a = spec.sample_reliabilities(&mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = spec.sample_reliabilities(&mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 256);
        assert!(a.iter().all(|r| (0.5..=0.999).contains(r)));
    }

    #[test]
    fn workload_probabilities_must_sum_to_one() {
        let mut w = WorkloadSpec::puts(2, 3, 1024, 0.99, (2, 5));
        w.validate().unwrap();
        w.block_sizes.push(Weighted::new(10, 0.5));
        assert!(w.validate().is_err());
    }

    #[test]
    fn mix_parsing() {
        let m = OpMix::parse("put=0.5, get=0.25,find=0.25").unwrap();
        assert_eq!(m.put, 0.5);
        assert_eq!(m.find, 0.25);
        assert!(OpMix::parse("delete=1").is_err());
    }

    #[test]
    fn weighted_pick_follows_probabilities() {
        let list = vec![Weighted::new(1u8, 0.25), Weighted::new(2u8, 0.75)];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let twos = (0..10_000).filter(|_| *pick(&mut rng, &list) == 2).count();
        assert!((7_200..7_800).contains(&twos));
    }
}
