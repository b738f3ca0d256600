use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::overlay::Endpoint;
use crate::stats::EdgeStat;
use crate::types::{BlockId, BlockRef, EdgeId, FogId, PropValue, Property, StreamId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaBounds {
    pub min: usize,
    pub max: usize,
}

impl Default for ReplicaBounds {
    fn default() -> Self {
        ReplicaBounds { min: 1, max: 5 }
    }
}

/// Where one replica lives, with the hosting edge's reliability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicaLoc {
    pub fog_id: FogId,
    pub edge_id: EdgeId,
    pub reliability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub block_id: BlockId,
    pub stream_id: StreamId,
    pub static_props: Vec<Property>,
    pub replicas: Vec<ReplicaLoc>,
    pub size: u64,
    pub md5_checksum: String,
    /// New digest while an update is being applied to the replicas.
    #[serde(default)]
    pub pending_md5: Option<String>,
    /// Client that held the lease the block was written under.
    #[serde(default)]
    pub writer: Option<String>,
    #[serde(default)]
    pub reliability_unmet: bool,
}

impl BlockRecord {
    pub fn block_ref(&self) -> BlockRef {
        BlockRef::new(self.stream_id.clone(), self.block_id.clone())
    }

    pub fn replica_fogs(&self) -> BTreeSet<FogId> {
        self.replicas.iter().map(|r| r.fog_id).collect()
    }

    pub fn accepts_md5(&self, md5: &str) -> bool {
        self.md5_checksum == md5 || self.pending_md5.as_deref() == Some(md5)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub stream_id: StreamId,
    pub owner_fog: FogId,
    pub reliability: f64,
    pub bounds: ReplicaBounds,
    pub static_props: BTreeMap<String, PropValue>,
    pub dynamic_props: BTreeMap<String, PropValue>,
    pub version: u64,
    /// Block ids with their digests, in append order.
    pub block_registry: Vec<(BlockId, String)>,
    pub block_count: u64,
    pub blocks: BTreeMap<BlockId, BlockRecord>,
}

impl StreamRecord {
    pub fn meta(&self, from_cache: bool) -> StreamMeta {
        StreamMeta {
            stream_id: self.stream_id.clone(),
            owner_fog: self.owner_fog,
            reliability: self.reliability,
            bounds: self.bounds,
            static_props: self.static_props.clone(),
            dynamic_props: self.dynamic_props.clone(),
            version: self.version,
            block_count: self.block_count,
            from_cache,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamMeta {
    pub stream_id: StreamId,
    pub owner_fog: FogId,
    pub reliability: f64,
    pub bounds: ReplicaBounds,
    pub static_props: BTreeMap<String, PropValue>,
    pub dynamic_props: BTreeMap<String, PropValue>,
    pub version: u64,
    pub block_count: u64,
    #[serde(default)]
    pub from_cache: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub stream_id: StreamId,
    pub client_id: String,
    pub session_key: String,
    pub duration_ms: u64,
    pub expiry_ms: u64,
    pub renew_count: u32,
}

/// What a client presents with a leased put.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeaseToken {
    pub client_id: String,
    pub session_key: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeaseGrant {
    pub duration_ms: u64,
    pub session_key: String,
    pub expiry_ms: u64,
}

/// A put logged at a replica fog under a lease.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeaseLogEntry {
    pub client_id: String,
    pub session_key: String,
    pub block: BlockRef,
    pub at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeEntry {
    pub stat: EdgeStat,
    pub last_heartbeat_ms: u64,
    pub hosted: BTreeSet<BlockRef>,
    pub alive: bool,
    pub endpoint: Option<Endpoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataCacheEntry {
    pub meta: StreamMeta,
    pub fetched_at_ms: u64,
    pub last_used: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Md5Phase {
    Begin,
    Commit,
    Abort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchKind {
    Block,
    Stream,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchTier {
    /// Exact check of the receiving fog's own index only.
    Local,
    /// Own index, then neighbors whose filters pass.
    Pool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchHits {
    #[serde(with = "crate::pairs")]
    pub blocks: BTreeMap<BlockRef, BTreeSet<FogId>>,
    pub streams: BTreeMap<StreamId, BTreeSet<FogId>>,
    /// Forwarding hops used to reach the fogs that answered.
    pub hops: u32,
}

impl SearchHits {
    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty() && self.streams.is_empty()
    }

    pub fn merge(&mut self, other: SearchHits, hops: u32) {
        if !other.is_empty() {
            self.hops = self.hops.max(hops);
        }
        for (b, fogs) in other.blocks {
            self.blocks.entry(b).or_default().extend(fogs);
        }
        for (s, fogs) in other.streams {
            self.streams.entry(s).or_default().extend(fogs);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FindHit {
    pub stream_id: StreamId,
    pub block_id: BlockId,
    pub candidate_fogs: Vec<FogId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FindResult {
    pub hits: Vec<FindHit>,
    pub hops: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FindStreamResult {
    pub streams: Vec<StreamId>,
    pub hops: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreateAck {
    pub owner_fog: FogId,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PutAck {
    pub replicas: Vec<ReplicaLoc>,
    pub q: usize,
    /// Replica count of the initial plan, before any top-up.
    pub planned_q: usize,
    pub reliability_unmet: bool,
    pub warnings: Vec<String>,
    /// Hops from the receiving fog to the farthest replica's edge.
    pub data_hops: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredAt {
    pub fog_id: FogId,
    pub edge_id: EdgeId,
    pub reliability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GetReply {
    pub stream_id: StreamId,
    pub block_id: BlockId,
    pub props: Vec<Property>,
    pub md5: String,
    pub served_by: FogId,
    pub local: bool,
    pub remote_fetches: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateAck {
    pub replicas: usize,
    pub md5: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub record: BlockRecord,
    pub reliability: f64,
    pub bounds: ReplicaBounds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryOutcome {
    Recovered,
    DataLoss,
    Stalled,
    /// The block is no longer registered at its owner.
    Orphan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecovery {
    pub block: BlockRef,
    pub outcome: RecoveryOutcome,
    pub targets: Vec<ReplicaLoc>,
    pub reliability_unmet: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub fog_id: FogId,
    pub failed_edge: EdgeId,
    pub detected_at_ms: u64,
    pub blocks_lost: usize,
    pub blocks_recovered: usize,
    pub per_block: Vec<BlockRecovery>,
}
