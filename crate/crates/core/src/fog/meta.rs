//! Streams, leases and versioned stream metadata. The owner fog is the
//! single place each of these is mutated; other fogs forward to it.

use std::collections::BTreeMap;

use rand::Rng;

use super::*;
use crate::types::{BlockId, PropKind, Property, StreamProperty, BLOCK_ID_PROP, STREAM_ID_PROP};

fn reserved(name: &str) -> bool {
    name == BLOCK_ID_PROP || name == STREAM_ID_PROP
}

fn validate_bounds(b: ReplicaBounds) -> Result<()> {
    if b.min == 0 || b.min > b.max {
        return Err(Error::InvalidArgument(format!("replica bounds [{}, {}]", b.min, b.max)));
    }
    Ok(())
}

fn check_lease(st: &FogState, sid: &StreamId, token: &LeaseToken, now: u64) -> Result<()> {
    match st.leases.get(sid) {
        None => Err(Error::LeaseInvalid("no lease held".into())),
        Some(l) if l.client_id != token.client_id => {
            if l.expiry_ms > now {
                Err(Error::LeaseLost)
            } else {
                Err(Error::LeaseInvalid("lease expired".into()))
            }
        }
        Some(l) if l.session_key != token.session_key => Err(Error::LeaseInvalid("session key mismatch".into())),
        Some(l) if l.expiry_ms <= now => Err(Error::LeaseInvalid("lease expired".into())),
        Some(_) => Ok(()),
    }
}

impl FogNode {
    fn owns(&self, sid: &StreamId) -> bool {
        self.lock().streams.contains_key(sid)
    }

    /// The fog that owns `sid`, found through the cache or a search.
    pub fn locate_owner(&self, sid: &StreamId) -> Result<FogId> {
        {
            let st = self.lock();
            if st.streams.contains_key(sid) {
                return Ok(self.id());
            }
            if let Some(f) = st.owners.get(sid) {
                return Ok(*f);
            }
        }
        let query = vec![(STREAM_ID_PROP.to_owned(), sid.0.clone())];
        let hits = self.search(SearchKind::Stream, &query, false)?;
        let owner = hits
            .streams
            .get(sid)
            .and_then(|fogs| fogs.iter().next().copied())
            .ok_or_else(|| Error::NotFound(format!("stream {sid}")))?;
        self.lock().owners.insert(sid.clone(), owner);
        Ok(owner)
    }

    pub fn create_stream(
        &self,
        sid: &StreamId,
        props: Vec<StreamProperty>,
        reliability: f64,
        bounds: Option<ReplicaBounds>,
    ) -> Result<CreateAck> {
        if sid.0.is_empty() {
            return Err(Error::InvalidArgument("empty stream id".into()));
        }
        if !(reliability > 0.0 && reliability < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "reliability {reliability} outside (0, 1)"
            )));
        }
        let bounds = bounds.unwrap_or(self.cfg.params.default_bounds);
        validate_bounds(bounds)?;
        let mut static_props = BTreeMap::new();
        let mut dynamic_props = BTreeMap::new();
        for p in props {
            if reserved(&p.name) {
                return Err(Error::InvalidArgument(format!("`{}` is reserved", p.name)));
            }
            if static_props.contains_key(&p.name) || dynamic_props.contains_key(&p.name) {
                return Err(Error::InvalidArgument(format!("duplicate property `{}`", p.name)));
            }
            match p.kind {
                PropKind::Static => static_props.insert(p.name, p.value),
                PropKind::Dynamic => dynamic_props.insert(p.name, p.value),
            };
        }
        if self.owns(sid) {
            return Err(Error::AlreadyExists(format!("stream {sid}")));
        }
        let query = vec![(STREAM_ID_PROP.to_owned(), sid.0.clone())];
        if !self.search(SearchKind::Stream, &query, true)?.streams.is_empty() {
            return Err(Error::AlreadyExists(format!("stream {sid}")));
        }

        let mut st = self.lock();
        if st.streams.contains_key(sid) {
            return Err(Error::AlreadyExists(format!("stream {sid}")));
        }
        let canonical: Vec<(String, String)> = static_props.iter().map(|(n, v)| (n.clone(), v.canonical())).collect();
        for (name, value) in st.index.index_stream(sid, &canonical) {
            st.filters.insert_local(&filter_key(SearchKind::Stream, &name), &value);
        }
        st.streams.insert(
            sid.clone(),
            StreamRecord {
                stream_id: sid.clone(),
                owner_fog: self.id(),
                reliability,
                bounds,
                static_props,
                dynamic_props,
                version: 1,
                block_registry: Vec::new(),
                block_count: 0,
                blocks: BTreeMap::new(),
            },
        );
        Ok(CreateAck {
            owner_fog: self.id(),
            version: 1,
        })
    }

    pub fn open_stream(&self, sid: &StreamId, client_id: &str, duration_ms: Option<u64>) -> Result<LeaseGrant> {
        if !self.owns(sid) {
            let owner = self.locate_owner(sid)?;
            if owner == self.id() {
                return Err(Error::NotFound(format!("stream {sid}")));
            }
            return self.ask(
                owner,
                &FogRequest::OpenStream {
                    stream_id: sid.clone(),
                    client_id: client_id.to_owned(),
                    duration_ms,
                },
            );
        }
        let now = self.now_ms();
        let duration = duration_ms.unwrap_or(self.cfg.params.lease_ms);
        let mut st = self.lock();
        if !st.streams.contains_key(sid) {
            return Err(Error::NotFound(format!("stream {sid}")));
        }
        if let Some(l) = st.leases.get(sid) {
            if l.client_id != client_id && l.expiry_ms > now {
                return Err(Error::LeaseUnavailable {
                    holder: l.client_id.clone(),
                });
            }
        }
        let session_key = format!("{:016x}", st.rng.gen::<u64>());
        let lease = Lease {
            stream_id: sid.clone(),
            client_id: client_id.to_owned(),
            session_key: session_key.clone(),
            duration_ms: duration,
            expiry_ms: now + duration,
            renew_count: 0,
        };
        st.leases.insert(sid.clone(), lease);
        Ok(LeaseGrant {
            duration_ms: duration,
            session_key,
            expiry_ms: now + duration,
        })
    }

    /// Extend a lease. An expired lease is still renewed when nobody else
    /// acquired it in between.
    pub fn renew_lease(&self, sid: &StreamId, client_id: &str, session_key: &str) -> Result<LeaseGrant> {
        if !self.owns(sid) {
            let owner = self.locate_owner(sid)?;
            if owner == self.id() {
                return Err(Error::NotFound(format!("stream {sid}")));
            }
            return self.ask(
                owner,
                &FogRequest::RenewLease {
                    stream_id: sid.clone(),
                    client_id: client_id.to_owned(),
                    session_key: session_key.to_owned(),
                },
            );
        }
        let now = self.now_ms();
        let mut st = self.lock();
        match st.leases.get_mut(sid) {
            Some(l) if l.client_id == client_id && l.session_key == session_key => {
                l.expiry_ms = now + l.duration_ms;
                l.renew_count += 1;
                Ok(LeaseGrant {
                    duration_ms: l.duration_ms,
                    session_key: l.session_key.clone(),
                    expiry_ms: l.expiry_ms,
                })
            }
            _ => Err(Error::LeaseLost),
        }
    }

    pub fn lease_of(&self, sid: &StreamId) -> Option<Lease> {
        self.lock().leases.get(sid).cloned()
    }

    pub fn get_stream_meta(&self, sid: &StreamId, latest: bool) -> Result<StreamMeta> {
        let now = self.now_ms();
        {
            let mut st = self.lock();
            if let Some(r) = st.streams.get(sid) {
                return Ok(r.meta(false));
            }
            if !latest {
                st.cache_clock += 1;
                let tick = st.cache_clock;
                if let Some(e) = st.cache.get_mut(sid) {
                    e.last_used = tick;
                    let mut m = e.meta.clone();
                    m.from_cache = true;
                    return Ok(m);
                }
            }
        }
        let owner = self.locate_owner(sid)?;
        if owner == self.id() {
            return Err(Error::NotFound(format!("stream {sid}")));
        }
        let meta: StreamMeta = self.ask(
            owner,
            &FogRequest::GetStreamMeta {
                stream_id: sid.clone(),
                latest: true,
            },
        )?;
        let mut st = self.lock();
        st.cache_clock += 1;
        let tick = st.cache_clock;
        st.cache.insert(
            sid.clone(),
            MetadataCacheEntry {
                meta: meta.clone(),
                fetched_at_ms: now,
                last_used: tick,
            },
        );
        if st.cache.len() > self.cfg.params.cache_capacity {
            if let Some(victim) = st.cache.iter().min_by_key(|(_, e)| e.last_used).map(|(k, _)| k.clone()) {
                st.cache.remove(&victim);
            }
        }
        Ok(meta)
    }

    /// Test-and-set: applies only when `version` is the owner's current one.
    pub fn update_stream_meta(&self, sid: &StreamId, props: Vec<Property>, version: u64) -> Result<u64> {
        if !self.owns(sid) {
            let owner = self.locate_owner(sid)?;
            if owner == self.id() {
                return Err(Error::NotFound(format!("stream {sid}")));
            }
            let r = self.ask(
                owner,
                &FogRequest::UpdateStreamMeta {
                    stream_id: sid.clone(),
                    props,
                    version,
                },
            );
            self.lock().cache.remove(sid);
            return r;
        }
        let mut st = self.lock();
        let rec = st
            .streams
            .get_mut(sid)
            .ok_or_else(|| Error::NotFound(format!("stream {sid}")))?;
        for p in &props {
            if reserved(&p.name) || rec.static_props.contains_key(&p.name) {
                return Err(Error::InvalidArgument(format!(
                    "`{}` is not a dynamic property",
                    p.name
                )));
            }
        }
        if version != rec.version {
            return Err(Error::StaleVersion {
                passed: version,
                current: rec.version,
            });
        }
        for p in props {
            rec.dynamic_props.insert(p.name, p.value);
        }
        rec.version += 1;
        Ok(rec.version)
    }

    pub(super) fn prepare_block(
        &self,
        sid: &StreamId,
        bid: &BlockId,
        lease: Option<&LeaseToken>,
    ) -> Result<StreamMeta> {
        let now = self.now_ms();
        let st = self.lock();
        let rec = st
            .streams
            .get(sid)
            .ok_or_else(|| Error::NotFound(format!("stream {sid}")))?;
        if rec.blocks.contains_key(bid) {
            return Err(Error::AlreadyExists(format!("block {sid}/{bid}")));
        }
        if let Some(token) = lease {
            check_lease(&st, sid, token, now)?;
        }
        Ok(rec.meta(false))
    }

    pub(super) fn append_block(&self, mut record: BlockRecord, lease: Option<&LeaseToken>) -> Result<()> {
        let now = self.now_ms();
        let mut st = self.lock();
        if let Some(token) = lease {
            check_lease(&st, &record.stream_id, token, now)?;
            record.writer = Some(token.client_id.clone());
        }
        let rec = st
            .streams
            .get_mut(&record.stream_id)
            .ok_or_else(|| Error::NotFound(format!("stream {}", record.stream_id)))?;
        if rec.blocks.contains_key(&record.block_id) {
            return Err(Error::AlreadyExists(format!("block {}", record.block_ref())));
        }
        rec.block_registry
            .push((record.block_id.clone(), record.md5_checksum.clone()));
        rec.block_count += 1;
        rec.blocks.insert(record.block_id.clone(), record);
        Ok(())
    }

    pub(super) fn block_info(&self, sid: &StreamId, bid: &BlockId) -> Result<BlockInfo> {
        let st = self.lock();
        let rec = st
            .streams
            .get(sid)
            .ok_or_else(|| Error::NotFound(format!("stream {sid}")))?;
        let b = rec
            .blocks
            .get(bid)
            .ok_or_else(|| Error::NotFound(format!("block {sid}/{bid}")))?;
        Ok(BlockInfo {
            record: b.clone(),
            reliability: rec.reliability,
            bounds: rec.bounds,
        })
    }

    pub(super) fn set_block_replicas(
        &self,
        sid: &StreamId,
        bid: &BlockId,
        remove: &[ReplicaLoc],
        add: Vec<ReplicaLoc>,
        reliability_unmet: bool,
    ) -> Result<()> {
        let mut st = self.lock();
        let b = st
            .streams
            .get_mut(sid)
            .and_then(|r| r.blocks.get_mut(bid))
            .ok_or_else(|| Error::NotFound(format!("block {sid}/{bid}")))?;
        b.replicas
            .retain(|r| !remove.iter().any(|x| x.fog_id == r.fog_id && x.edge_id == r.edge_id));
        b.replicas.extend(add);
        b.reliability_unmet = reliability_unmet;
        Ok(())
    }

    pub(super) fn set_block_md5(
        &self,
        sid: &StreamId,
        bid: &BlockId,
        md5: &str,
        phase: Md5Phase,
        lease: Option<&LeaseToken>,
        size: Option<u64>,
    ) -> Result<BlockRecord> {
        let now = self.now_ms();
        let mut st = self.lock();
        if let (Some(token), Md5Phase::Begin) = (lease, phase) {
            check_lease(&st, sid, token, now)?;
        }
        let rec = st
            .streams
            .get_mut(sid)
            .ok_or_else(|| Error::NotFound(format!("stream {sid}")))?;
        let b = rec
            .blocks
            .get_mut(bid)
            .ok_or_else(|| Error::NotFound(format!("block {sid}/{bid}")))?;
        match phase {
            Md5Phase::Begin => b.pending_md5 = Some(md5.to_owned()),
            Md5Phase::Abort => b.pending_md5 = None,
            Md5Phase::Commit => {
                b.pending_md5 = None;
                b.md5_checksum = md5.to_owned();
                if let Some(n) = size {
                    b.size = n;
                }
                if let Some(entry) = rec.block_registry.iter_mut().find(|(id, _)| id == bid) {
                    entry.1 = md5.to_owned();
                }
            }
        }
        Ok(rec.blocks[bid].clone())
    }
}
