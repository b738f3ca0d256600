//! Edge peer: stores block replicas and reports to its parent fog.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::net::Clock;
use crate::overlay::Endpoint;
use crate::stats::EdgeStat;
use crate::types::{md5_hex, BlockId, BlockRef, EdgeId, Property, StreamId};
use crate::wire::EdgeRequest;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeConfig {
    pub edge_id: EdgeId,
    pub parent_fog: Endpoint,
    pub reliability: f64,
    pub capacity: u64,
    pub heartbeat_interval_ms: u64,
    #[serde(default)]
    pub listen: Endpoint,
    /// Directory for replicas; in-memory storage when absent.
    #[serde(default)]
    pub store_dir: Option<PathBuf>,
}

impl EdgeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.reliability > 0.0 && self.reliability < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "edge reliability {} outside (0, 1)",
                self.reliability
            )));
        }
        if self.capacity == 0 {
            return Err(Error::InvalidConfig("edge capacity must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredReplica {
    pub stream_id: StreamId,
    pub block_id: BlockId,
    #[serde(skip)]
    pub payload: Vec<u8>,
    pub static_props: Vec<Property>,
    pub md5_checksum: String,
    pub stored_at: u64,
}

impl StoredReplica {
    pub fn block_ref(&self) -> BlockRef {
        BlockRef::new(self.stream_id.clone(), self.block_id.clone())
    }

    fn verify(&self) -> Result<()> {
        let actual = md5_hex(&self.payload);
        if actual != self.md5_checksum {
            return Err(Error::Integrity(format!(
                "{} has md5 {actual}, expected {}",
                self.block_ref(),
                self.md5_checksum
            )));
        }
        Ok(())
    }
}

/// Where an edge keeps its replicas.
pub trait ReplicaStore: Send {
    fn put(&mut self, replica: StoredReplica) -> Result<()>;
    fn get(&self, block: &BlockRef) -> Result<StoredReplica>;
    /// Size of the stored payload, if present.
    fn size_of(&self, block: &BlockRef) -> Option<u64>;
    fn list(&self) -> Vec<(BlockRef, Vec<Property>, u64)>;
}

#[derive(Debug, Default)]
pub struct MemStore {
    replicas: BTreeMap<BlockRef, StoredReplica>,
}

impl ReplicaStore for MemStore {
    fn put(&mut self, replica: StoredReplica) -> Result<()> {
        self.replicas.insert(replica.block_ref(), replica);
        Ok(())
    }

    fn get(&self, block: &BlockRef) -> Result<StoredReplica> {
        self.replicas
            .get(block)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("replica {block}")))
    }

    fn size_of(&self, block: &BlockRef) -> Option<u64> {
        self.replicas.get(block).map(|r| r.payload.len() as u64)
    }

    fn list(&self) -> Vec<(BlockRef, Vec<Property>, u64)> {
        self.replicas
            .iter()
            .map(|(b, r)| (b.clone(), r.static_props.clone(), r.payload.len() as u64))
            .collect()
    }
}

/// One `<root>/<stream>/<block>.blk` file per replica with a JSON
/// `<block>.meta` sidecar.
#[derive(Debug)]
pub struct DiskStore {
    root: PathBuf,
    sizes: BTreeMap<BlockRef, (u64, Vec<Property>)>,
}

fn safe_component(s: &str) -> Result<&str> {
    if s.is_empty() || s == "." || s == ".." || s.contains(['/', '\\', '\0']) {
        return Err(Error::InvalidArgument(format!("unsafe id {s:?}")));
    }
    Ok(s)
}

impl DiskStore {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        let mut sizes = BTreeMap::new();
        for dir in fs::read_dir(&root)? {
            let dir = dir?;
            if !dir.file_type()?.is_dir() {
                continue;
            }
            for f in fs::read_dir(dir.path())? {
                let path = f?.path();
                if path.extension().is_some_and(|e| e == "meta") {
                    let meta: StoredReplica = serde_json::from_slice(&fs::read(&path)?)?;
                    let blk = path.with_extension("blk");
                    let len = fs::metadata(&blk)?.len();
                    sizes.insert(meta.block_ref(), (len, meta.static_props));
                }
            }
        }
        Ok(DiskStore { root, sizes })
    }

    fn paths(&self, block: &BlockRef) -> Result<(PathBuf, PathBuf, PathBuf)> {
        let dir = self.root.join(safe_component(&block.stream_id.0)?);
        let bid = safe_component(&block.block_id.0)?;
        Ok((
            dir.clone(),
            dir.join(format!("{bid}.blk")),
            dir.join(format!("{bid}.meta")),
        ))
    }
}

impl ReplicaStore for DiskStore {
    fn put(&mut self, replica: StoredReplica) -> Result<()> {
        let block = replica.block_ref();
        let (dir, blk, meta) = self.paths(&block)?;
        fs::create_dir_all(dir)?;
        fs::write(&blk, &replica.payload)?;
        fs::write(&meta, serde_json::to_vec(&replica)?)?;
        self.sizes
            .insert(block, (replica.payload.len() as u64, replica.static_props.clone()));
        Ok(())
    }

    fn get(&self, block: &BlockRef) -> Result<StoredReplica> {
        if !self.sizes.contains_key(block) {
            return Err(Error::NotFound(format!("replica {block}")));
        }
        let (_, blk, meta) = self.paths(block)?;
        let mut r: StoredReplica = serde_json::from_slice(&fs::read(meta)?)?;
        r.payload = fs::read(blk)?;
        Ok(r)
    }

    fn size_of(&self, block: &BlockRef) -> Option<u64> {
        self.sizes.get(block).map(|(s, _)| *s)
    }

    fn list(&self) -> Vec<(BlockRef, Vec<Property>, u64)> {
        self.sizes
            .iter()
            .map(|(b, (s, p))| (b.clone(), p.clone(), *s))
            .collect()
    }
}

/// Index tuple reported to the parent fog for one stored block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexTuple {
    pub seq: u64,
    pub block: BlockRef,
    pub props: Vec<Property>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeHeartbeat {
    pub edge_id: EdgeId,
    pub stat: EdgeStat,
    pub tuples: Vec<IndexTuple>,
    /// Set until the first ack after start: `tuples` then lists every
    /// hosted block and replaces what the fog knew about this edge.
    pub full_report: bool,
    pub endpoint: Option<Endpoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeartbeatAck {
    pub upto_seq: u64,
    /// The fog had this edge down as failed or unknown: send a full report
    /// next time.
    #[serde(default)]
    pub resync: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreAck {
    pub free_storage_after: u64,
}

struct EdgeInner {
    store: Box<dyn ReplicaStore>,
    used: u64,
    pending: Vec<IndexTuple>,
    next_seq: u64,
    full_report: bool,
}

pub struct EdgeNode {
    cfg: EdgeConfig,
    clock: Arc<dyn Clock>,
    inner: Mutex<EdgeInner>,
}

impl EdgeNode {
    pub fn new(cfg: EdgeConfig, clock: Arc<dyn Clock>) -> Result<Self> {
        cfg.validate()?;
        let store: Box<dyn ReplicaStore> = match &cfg.store_dir {
            Some(dir) => Box::new(DiskStore::open(dir)?),
            None => Box::<MemStore>::default(),
        };
        Self::with_store(cfg, clock, store)
    }

    pub fn with_store(cfg: EdgeConfig, clock: Arc<dyn Clock>, store: Box<dyn ReplicaStore>) -> Result<Self> {
        cfg.validate()?;
        let listed = store.list();
        let used = listed.iter().map(|(_, _, s)| s).sum();
        let pending: Vec<IndexTuple> = listed
            .into_iter()
            .enumerate()
            .map(|(i, (block, props, _))| IndexTuple {
                seq: i as u64 + 1,
                block,
                props,
            })
            .collect();
        let next_seq = pending.len() as u64 + 1;
        Ok(EdgeNode {
            cfg,
            clock,
            inner: Mutex::new(EdgeInner {
                store,
                used,
                pending,
                next_seq,
                full_report: true,
            }),
        })
    }

    pub fn id(&self) -> EdgeId {
        self.cfg.edge_id
    }

    pub fn config(&self) -> &EdgeConfig {
        &self.cfg
    }

    pub fn reliability(&self) -> f64 {
        self.cfg.reliability
    }

    pub fn free_storage(&self) -> u64 {
        self.cfg.capacity - self.inner.lock().unwrap().used
    }

    pub fn stat(&self) -> EdgeStat {
        EdgeStat::new(self.cfg.edge_id, self.cfg.reliability, self.free_storage())
    }

    pub fn hosted(&self) -> Vec<BlockRef> {
        let inner = self.inner.lock().unwrap();
        inner.store.list().into_iter().map(|(b, _, _)| b).collect()
    }

    pub fn store_replica(
        &self,
        block: &BlockRef,
        payload: Vec<u8>,
        props: Vec<Property>,
        checksum: &str,
    ) -> Result<StoreAck> {
        let replica = StoredReplica {
            stream_id: block.stream_id.clone(),
            block_id: block.block_id.clone(),
            payload,
            static_props: props.clone(),
            md5_checksum: checksum.to_owned(),
            stored_at: self.clock.now_ms(),
        };
        replica.verify()?;
        let size = replica.payload.len() as u64;
        let mut inner = self.inner.lock().unwrap();
        if inner.store.size_of(block).is_some() {
            return Err(Error::AlreadyExists(format!("replica {block}")));
        }
        if self.cfg.capacity - inner.used < size {
            return Err(Error::NoCapacity);
        }
        inner.store.put(replica)?;
        inner.used += size;
        let seq = inner.next_seq;
        inner.next_seq += 1;
        inner.pending.push(IndexTuple {
            seq,
            block: block.clone(),
            props,
        });
        Ok(StoreAck {
            free_storage_after: self.cfg.capacity - inner.used,
        })
    }

    pub fn overwrite_replica(&self, block: &BlockRef, payload: Vec<u8>, checksum: &str) -> Result<StoreAck> {
        let mut inner = self.inner.lock().unwrap();
        let mut replica = inner.store.get(block)?;
        let old = replica.payload.len() as u64;
        let new = payload.len() as u64;
        if self.cfg.capacity - inner.used + old < new {
            return Err(Error::NoCapacity);
        }
        replica.payload = payload;
        replica.md5_checksum = checksum.to_owned();
        replica.stored_at = self.clock.now_ms();
        replica.verify()?;
        inner.store.put(replica)?;
        inner.used = inner.used - old + new;
        Ok(StoreAck {
            free_storage_after: self.cfg.capacity - inner.used,
        })
    }

    pub fn read_replica(&self, block: &BlockRef) -> Result<StoredReplica> {
        let r = self.inner.lock().unwrap().store.get(block)?;
        r.verify()?;
        Ok(r)
    }

    pub fn heartbeat_payload(&self) -> EdgeHeartbeat {
        let inner = self.inner.lock().unwrap();
        EdgeHeartbeat {
            edge_id: self.cfg.edge_id,
            stat: EdgeStat::new(self.cfg.edge_id, self.cfg.reliability, self.cfg.capacity - inner.used),
            tuples: inner.pending.clone(),
            full_report: inner.full_report,
            endpoint: Some(self.cfg.listen.clone()),
        }
    }

    /// Drop tuples the fog has acknowledged.
    pub fn ack(&self, ack: HeartbeatAck) {
        let mut inner = self.inner.lock().unwrap();
        if ack.resync {
            let listed = inner.store.list();
            let first = inner.next_seq;
            inner.pending = listed
                .into_iter()
                .enumerate()
                .map(|(i, (block, props, _))| IndexTuple {
                    seq: first + i as u64,
                    block,
                    props,
                })
                .collect();
            inner.next_seq = first + inner.pending.len() as u64;
            inner.full_report = true;
            return;
        }
        inner.pending.retain(|t| t.seq > ack.upto_seq);
        inner.full_report = false;
    }

    pub fn handle(&self, req: EdgeRequest, data: Option<Vec<u8>>) -> Result<(Value, Option<Vec<u8>>)> {
        match req {
            EdgeRequest::StoreReplica { block, props, md5 } => {
                let ack = self.store_replica(&block, data.unwrap_or_default(), props, &md5)?;
                Ok((serde_json::to_value(ack)?, None))
            }
            EdgeRequest::OverwriteReplica { block, md5 } => {
                let ack = self.overwrite_replica(&block, data.unwrap_or_default(), &md5)?;
                Ok((serde_json::to_value(ack)?, None))
            }
            EdgeRequest::ReadReplica { block } => {
                let mut r = self.read_replica(&block)?;
                let payload = std::mem::take(&mut r.payload);
                Ok((serde_json::to_value(r)?, Some(payload)))
            }
            EdgeRequest::Stat => Ok((serde_json::to_value(self.stat())?, None)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::ManualClock;

    const MB: u64 = 1 << 20;

    fn edge(capacity: u64) -> EdgeNode {
        let cfg = EdgeConfig {
            edge_id: EdgeId(1),
            parent_fog: Endpoint::default(),
            reliability: 0.9,
            capacity,
            heartbeat_interval_ms: 30_000,
            listen: Endpoint::default(),
            store_dir: None,
        };
        EdgeNode::new(cfg, Arc::new(ManualClock::default())).unwrap()
    }

    fn put(e: &EdgeNode, bid: &str, data: Vec<u8>) -> Result<StoreAck> {
        let md5 = md5_hex(&data);
        e.store_replica(&BlockRef::new("s", bid), data, vec![], &md5)
    }

    #[test]
    fn accounting() {
        let e = edge(16 * 1024 * MB);
        let ack = put(&e, "b1", vec![7; MB as usize]).unwrap();
        assert_eq!(ack.free_storage_after, 16 * 1024 * MB - MB);
        assert_eq!(e.free_storage(), ack.free_storage_after);
    }

    #[test]
    fn beyond_capacity() {
        let e = edge(100);
        put(&e, "a", vec![0; 60]).unwrap();
        assert_eq!(put(&e, "b", vec![0; 60]), Err(Error::NoCapacity));
        assert_eq!(e.free_storage(), 40);
    }

    #[test]
    fn round_trip_and_errors() {
        let e = edge(1000);
        put(&e, "a", b"hello".to_vec()).unwrap();
        let r = e.read_replica(&BlockRef::new("s", "a")).unwrap();
        assert_eq!(r.payload, b"hello");
        assert!(matches!(
            e.read_replica(&BlockRef::new("s", "zz")),
            Err(Error::NotFound(_))
        ));
        let bad = e.store_replica(&BlockRef::new("s", "c"), b"x".to_vec(), vec![], "00");
        assert!(matches!(bad, Err(Error::Integrity(_))));
        assert!(matches!(put(&e, "a", b"again".to_vec()), Err(Error::AlreadyExists(_))));
    }

    #[test]
    fn heartbeat_tuples_cleared_on_ack() {
        let e = edge(1000);
        let hb = e.heartbeat_payload();
        assert!(hb.tuples.is_empty());
        assert!(hb.full_report);
        for b in ["a", "b", "c"] {
            put(&e, b, b.as_bytes().to_vec()).unwrap();
        }
        let hb = e.heartbeat_payload();
        assert_eq!(hb.tuples.len(), 3);
        e.ack(HeartbeatAck {
            upto_seq: 2,
            resync: false,
        });
        let hb = e.heartbeat_payload();
        assert_eq!(hb.tuples.len(), 1);
        assert!(!hb.full_report);

        // A fog that lost track of the edge asks for everything again.
        e.ack(HeartbeatAck {
            upto_seq: 3,
            resync: true,
        });
        let hb = e.heartbeat_payload();
        assert!(hb.full_report);
        assert_eq!(hb.tuples.len(), 3);
        assert!(hb.tuples.iter().all(|t| t.seq > 3));
    }

    #[test]
    fn overwrite_adjusts_space() {
        let e = edge(100);
        put(&e, "a", vec![1; 10]).unwrap();
        let data = vec![2; 30];
        let md5 = md5_hex(&data);
        e.overwrite_replica(&BlockRef::new("s", "a"), data.clone(), &md5)
            .unwrap();
        assert_eq!(e.free_storage(), 70);
        assert_eq!(e.read_replica(&BlockRef::new("s", "a")).unwrap().payload, data);
    }

    #[test]
    fn disk_store_survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = EdgeConfig {
            edge_id: EdgeId(3),
            parent_fog: Endpoint::default(),
            reliability: 0.8,
            capacity: 1 << 20,
            heartbeat_interval_ms: 1000,
            listen: Endpoint::default(),
            store_dir: Some(dir.path().to_path_buf()),
        };
        let clock: Arc<dyn Clock> = Arc::new(ManualClock::default());
        {
            let e = EdgeNode::new(cfg.clone(), clock.clone()).unwrap();
            put(&e, "b1", b"persisted".to_vec()).unwrap();
            assert!(matches!(put(&e, "../x", b"x".to_vec()), Err(Error::InvalidArgument(_))));
        }
        let e = EdgeNode::new(cfg, clock).unwrap();
        assert_eq!(e.free_storage(), (1 << 20) - 9);
        let hb = e.heartbeat_payload();
        assert!(hb.full_report);
        assert_eq!(hb.tuples.len(), 1);
        assert_eq!(e.read_replica(&BlockRef::new("s", "b1")).unwrap().payload, b"persisted");
    }
}
