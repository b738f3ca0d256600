//! The fog service.
//!
//! A fog owns the metadata of the streams created through it, indexes the
//! blocks stored on its edges, keeps the Bloom filters and summaries it
//! hears from its overlay peers, and coordinates puts, gets, searches and
//! recovery. State sits behind one mutex that is never held across a call
//! to another node.

mod data;
mod meta;
mod plane;
mod records;
mod search;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex, MutexGuard};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use records::*;

use crate::bloom::{FilterSet, PartitionIndex};
use crate::error::{Error, Result};
use crate::net::{fan_out, Peers};
use crate::overlay::OverlayTopology;
use crate::stats::{GlobalMatrix, DEFAULT_BUCKETS};
use crate::types::{EdgeId, FogId, StreamId};
use crate::wire::{self, EdgeRequest, FogRequest, SummaryRecord};

fn default_lease_ms() -> u64 {
    100_000
}
fn default_heartbeat_ms() -> u64 {
    30_000
}
fn default_miss_threshold() -> u32 {
    3
}
fn default_buckets() -> usize {
    DEFAULT_BUCKETS
}
fn default_workers() -> usize {
    10
}
fn default_max_block() -> u64 {
    64 << 20
}
fn default_cache() -> usize {
    10_000
}

/// Tunables shared by every fog of a deployment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FogParams {
    #[serde(default = "default_lease_ms")]
    pub lease_ms: u64,
    #[serde(default = "default_heartbeat_ms")]
    pub heartbeat_interval_ms: u64,
    #[serde(default = "default_miss_threshold")]
    pub miss_threshold: u32,
    #[serde(default = "default_buckets")]
    pub bucket_count: usize,
    #[serde(default = "default_workers")]
    pub recovery_workers: usize,
    #[serde(default = "default_max_block")]
    pub max_block_bytes: u64,
    #[serde(default = "default_cache")]
    pub cache_capacity: usize,
    #[serde(default)]
    pub default_bounds: ReplicaBounds,
}

impl Default for FogParams {
    fn default() -> Self {
        FogParams {
            lease_ms: default_lease_ms(),
            heartbeat_interval_ms: default_heartbeat_ms(),
            miss_threshold: default_miss_threshold(),
            bucket_count: default_buckets(),
            recovery_workers: default_workers(),
            max_block_bytes: default_max_block(),
            cache_capacity: default_cache(),
            default_bounds: ReplicaBounds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FogConfig {
    pub fog_id: FogId,
    pub overlay: OverlayTopology,
    #[serde(default)]
    pub params: FogParams,
    #[serde(default)]
    pub seed: u64,
}

struct FogState {
    streams: BTreeMap<StreamId, StreamRecord>,
    leases: BTreeMap<StreamId, Lease>,
    edges: BTreeMap<EdgeId, EdgeEntry>,
    index: PartitionIndex,
    filters: FilterSet,
    filters_stale: bool,
    summaries: BTreeMap<FogId, SummaryRecord>,
    summary_dirty: bool,
    matrix: Option<Arc<GlobalMatrix>>,
    matrix_dirty: bool,
    cache: BTreeMap<StreamId, MetadataCacheEntry>,
    cache_clock: u64,
    owners: BTreeMap<StreamId, FogId>,
    lease_log: Vec<LeaseLogEntry>,
    recoveries: Vec<RecoveryReport>,
    rng: ChaCha8Rng,
}

pub struct FogNode {
    cfg: FogConfig,
    peers: Arc<dyn Peers>,
    state: Mutex<FogState>,
}

/// Filter keys are namespaced so block and stream properties of the same
/// name do not share a filter.
pub(crate) fn filter_key(kind: SearchKind, name: &str) -> String {
    match kind {
        SearchKind::Block => format!("block:{name}"),
        SearchKind::Stream => format!("stream:{name}"),
    }
}

impl FogNode {
    pub fn new(cfg: FogConfig, peers: Arc<dyn Peers>) -> Result<Self> {
        cfg.overlay.descriptor(cfg.fog_id)?;
        if cfg.params.bucket_count < 2 || cfg.params.miss_threshold == 0 {
            return Err(Error::InvalidConfig("bucket count or miss threshold".into()));
        }
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (u64::from(cfg.fog_id.0) << 32));
        Ok(FogNode {
            peers,
            state: Mutex::new(FogState {
                streams: BTreeMap::new(),
                leases: BTreeMap::new(),
                edges: BTreeMap::new(),
                index: PartitionIndex::default(),
                filters: FilterSet::default(),
                filters_stale: false,
                summaries: BTreeMap::new(),
                summary_dirty: true,
                matrix: None,
                matrix_dirty: true,
                cache: BTreeMap::new(),
                cache_clock: 0,
                owners: BTreeMap::new(),
                lease_log: Vec::new(),
                recoveries: Vec::new(),
                rng,
            }),
            cfg,
        })
    }

    pub fn id(&self) -> FogId {
        self.cfg.fog_id
    }

    pub fn config(&self) -> &FogConfig {
        &self.cfg
    }

    pub fn params(&self) -> &FogParams {
        &self.cfg.params
    }

    pub fn now_ms(&self) -> u64 {
        self.peers.now_ms()
    }

    fn lock(&self) -> MutexGuard<'_, FogState> {
        self.state.lock().unwrap()
    }

    fn next_seed(&self) -> u64 {
        self.lock().rng.gen()
    }

    /// Call another fog, or handle the request directly when it is this one.
    fn call_fog(&self, to: FogId, req: &FogRequest, data: Option<&[u8]>) -> Result<(Value, Option<Vec<u8>>)> {
        if to == self.cfg.fog_id {
            return self.handle(req.clone(), data.map(<[u8]>::to_vec));
        }
        self.peers.call_fog(self.cfg.fog_id, to, req, data)
    }

    fn ask<T: DeserializeOwned>(&self, to: FogId, req: &FogRequest) -> Result<T> {
        let (v, _) = self.call_fog(to, req, None)?;
        wire::decode(v)
    }

    fn call_edge(&self, to: EdgeId, req: &EdgeRequest, data: Option<&[u8]>) -> Result<(Value, Option<Vec<u8>>)> {
        self.peers.call_edge(self.cfg.fog_id, to, req, data)
    }

    fn fan_out<T: Send, R: Send>(&self, workers: usize, items: Vec<T>, f: impl Fn(T) -> R + Sync) -> Vec<(R, u32)> {
        fan_out(self.peers.concurrent(), workers, items, f)
    }

    /// Entry point for every request, local or remote.
    pub fn handle(&self, req: FogRequest, data: Option<Vec<u8>>) -> Result<(Value, Option<Vec<u8>>)> {
        fn ok<T: Serialize>(v: T) -> Result<(Value, Option<Vec<u8>>)> {
            Ok((serde_json::to_value(v)?, None))
        }
        match req {
            FogRequest::CreateStream {
                stream_id,
                props,
                reliability,
                bounds,
            } => ok(self.create_stream(&stream_id, props, reliability, bounds)?),
            FogRequest::OpenStream {
                stream_id,
                client_id,
                duration_ms,
            } => ok(self.open_stream(&stream_id, &client_id, duration_ms)?),
            FogRequest::RenewLease {
                stream_id,
                client_id,
                session_key,
            } => ok(self.renew_lease(&stream_id, &client_id, &session_key)?),
            FogRequest::PutBlock {
                stream_id,
                block_id,
                props,
                lease,
                client_is_edge,
            } => ok(self.put_block(
                &stream_id,
                &block_id,
                props,
                data.unwrap_or_default(),
                lease,
                client_is_edge,
            )?),
            FogRequest::UpdateBlock {
                stream_id,
                block_id,
                lease,
            } => ok(self.update_block(&stream_id, &block_id, data.unwrap_or_default(), lease)?),
            FogRequest::FindBlock { query, exhaustive } => ok(self.find_block(&query, exhaustive)?),
            FogRequest::FindStream { query, exhaustive } => ok(self.find_stream(&query, exhaustive)?),
            FogRequest::GetBlock { stream_id, block_id } => {
                let (reply, payload) = self.get_block(&stream_id, &block_id)?;
                Ok((serde_json::to_value(reply)?, Some(payload)))
            }
            FogRequest::GetStreamMeta { stream_id, latest } => ok(self.get_stream_meta(&stream_id, latest)?),
            FogRequest::UpdateStreamMeta {
                stream_id,
                props,
                version,
            } => ok(self.update_stream_meta(&stream_id, props, version)?),
            FogRequest::SearchAt {
                kind,
                query,
                tier,
                origin,
                exhaustive,
            } => ok(self.search_at(kind, &query, tier, origin, exhaustive)?),
            FogRequest::PrepareBlock {
                stream_id,
                block_id,
                lease,
            } => ok(self.prepare_block(&stream_id, &block_id, lease.as_ref())?),
            FogRequest::AppendBlock { record, lease } => ok(self.append_block(record, lease.as_ref())?),
            FogRequest::BlockInfo { stream_id, block_id } => ok(self.block_info(&stream_id, &block_id)?),
            FogRequest::SetBlockReplicas {
                stream_id,
                block_id,
                remove,
                add,
                reliability_unmet,
            } => ok(self.set_block_replicas(&stream_id, &block_id, &remove, add, reliability_unmet)?),
            FogRequest::SetBlockMd5 {
                stream_id,
                block_id,
                md5,
                phase,
                lease,
                size,
            } => ok(self.set_block_md5(&stream_id, &block_id, &md5, phase, lease.as_ref(), size)?),
            FogRequest::StoreReplica {
                block,
                props,
                hint,
                lease,
            } => ok(self.store_replica(&block, props, hint, data.unwrap_or_default(), lease)?),
            FogRequest::ReadReplica { block } => self.read_replica(&block),
            FogRequest::OverwriteReplica { block } => ok(self.overwrite_replica(&block, data.unwrap_or_default())?),
            FogRequest::EdgeHeartbeat(hb) => ok(self.on_edge_heartbeat(hb)?),
            FogRequest::FogHeartbeat(g) => {
                self.on_fog_heartbeat(g);
                Ok((Value::Null, None))
            }
        }
    }

    // Introspection used by the harness and tests.

    pub fn stream_record(&self, sid: &StreamId) -> Option<StreamRecord> {
        self.lock().streams.get(sid).cloned()
    }

    pub fn owned_streams(&self) -> Vec<StreamRecord> {
        self.lock().streams.values().cloned().collect()
    }

    pub fn lease_log(&self) -> Vec<LeaseLogEntry> {
        self.lock().lease_log.clone()
    }

    pub fn edge_registry(&self) -> BTreeMap<EdgeId, EdgeEntry> {
        self.lock().edges.clone()
    }

    pub fn recoveries(&self) -> Vec<RecoveryReport> {
        self.lock().recoveries.clone()
    }

    pub fn known_summaries(&self) -> BTreeMap<FogId, SummaryRecord> {
        self.lock().summaries.clone()
    }

    pub fn filters(&self) -> FilterSet {
        self.lock().filters.clone()
    }

    /// True when the index pairs equal the union of the edges' hosted sets.
    pub fn index_coherent(&self) -> bool {
        let st = self.lock();
        let from_edges: BTreeSet<_> = st
            .edges
            .iter()
            .flat_map(|(e, entry)| entry.hosted.iter().map(move |b| (*e, b.clone())))
            .collect();
        st.index.hosted_pairs() == from_edges
    }
}
