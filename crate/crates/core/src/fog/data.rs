//! Data path: put, update and get of blocks, the replica handlers run at
//! the fogs that host replicas, and recovery after an edge failure.

use std::collections::BTreeSet;

use crate::edge::{StoreAck, StoredReplica};
use crate::net::trace;
use crate::placement::{
    choose_edge_excluding, choose_recovery_fog, choose_replica_fogs, reliability_satisfied, ReplicaRequirement,
};
use crate::stats::summarize_partition;
use crate::types::{md5_hex, BlockId, BlockRef, Property, Quadrant, BLOCK_ID_PROP, STREAM_ID_PROP};

use super::plane::index_replica;
use super::*;

fn reliabilities(locs: &[ReplicaLoc]) -> Vec<f64> {
    locs.iter().map(|l| l.reliability).collect()
}

impl FogNode {
    fn ask_data<T: DeserializeOwned>(&self, to: FogId, req: &FogRequest, data: &[u8]) -> Result<T> {
        let (v, _) = self.call_fog(to, req, Some(data))?;
        wire::decode(v)
    }

    /// Store one replica at `fog`, retrying once when the payload arrives
    /// damaged.
    fn place_replica(
        &self,
        fog: FogId,
        block: &BlockRef,
        props: &[Property],
        hint: Quadrant,
        data: &[u8],
        lease: Option<&LeaseToken>,
    ) -> Result<StoredAt> {
        let req = FogRequest::StoreReplica {
            block: block.clone(),
            props: props.to_vec(),
            hint,
            lease: lease.cloned(),
        };
        match self.ask_data(fog, &req, data) {
            Err(Error::Integrity(_)) => self.ask_data(fog, &req, data),
            r => r,
        }
    }

    pub fn put_block(
        &self,
        sid: &StreamId,
        bid: &BlockId,
        props: Vec<Property>,
        data: Vec<u8>,
        lease: Option<LeaseToken>,
        client_is_edge: bool,
    ) -> Result<PutAck> {
        if bid.0.is_empty() {
            return Err(Error::InvalidArgument("empty block id".into()));
        }
        if data.len() as u64 > self.cfg.params.max_block_bytes {
            return Err(Error::InvalidArgument(format!(
                "block of {} bytes exceeds the {} byte cap",
                data.len(),
                self.cfg.params.max_block_bytes
            )));
        }
        if let Some(p) = props
            .iter()
            .find(|p| p.name == BLOCK_ID_PROP || p.name == STREAM_ID_PROP)
        {
            return Err(Error::InvalidArgument(format!("`{}` is reserved", p.name)));
        }
        let md5 = md5_hex(&data);
        let size = data.len() as u64;
        let owner = self.locate_owner(sid)?;
        let meta: StreamMeta = self.ask(
            owner,
            &FogRequest::PrepareBlock {
                stream_id: sid.clone(),
                block_id: bid.clone(),
                lease: lease.clone(),
            },
        )?;
        let (g, summaries) = self
            .planning_view()
            .ok_or_else(|| Error::PutFailed("no partition statistics yet".into()))?;
        let req = ReplicaRequirement {
            block_size: size,
            target_reliability: meta.reliability,
            min_replicas: meta.bounds.min,
            max_replicas: meta.bounds.max,
            client_fog: Some(self.id()),
            client_is_edge,
        };
        let plan =
            choose_replica_fogs(&g, &summaries, &req, self.next_seed()).map_err(|e| Error::PutFailed(e.to_string()))?;
        let block = BlockRef::new(sid.clone(), bid.clone());

        let results = self.fan_out(plan.choices.len(), plan.choices.clone(), |c| {
            (
                c.fog_id,
                self.place_replica(c.fog_id, &block, &props, c.hint, &data, lease.as_ref()),
            )
        });
        let mut stored: Vec<ReplicaLoc> = Vec::new();
        let mut bad = BTreeSet::new();
        let mut warnings = Vec::new();
        let mut data_hops = 0;
        for ((fog, r), depth) in results {
            match r {
                Ok(at) => {
                    data_hops = data_hops.max(depth);
                    stored.push(ReplicaLoc {
                        fog_id: at.fog_id,
                        edge_id: at.edge_id,
                        reliability: at.reliability,
                    });
                }
                Err(e) => {
                    warnings.push(format!("replica at {fog} failed: {e}"));
                    bad.insert(fog);
                }
            }
        }

        // Top up when a replica failed or the chosen edges fell short.
        let (min, max) = (meta.bounds.min, meta.bounds.max);
        let mut attempts = 0;
        while stored.len() < max
            && (stored.len() < min || !reliability_satisfied(meta.reliability, &reliabilities(&stored)))
            && attempts < 2 * max
        {
            attempts += 1;
            let used: BTreeSet<FogId> = stored.iter().map(|l| l.fog_id).collect();
            let mut pool: BTreeMap<FogId, _> = summaries
                .iter()
                .filter(|(f, _)| !bad.contains(*f) && !used.contains(*f))
                .map(|(f, s)| (*f, s.clone()))
                .collect();
            if pool.is_empty() {
                pool = summaries
                    .iter()
                    .filter(|(f, _)| !bad.contains(*f))
                    .map(|(f, s)| (*f, s.clone()))
                    .collect();
            }
            let one = ReplicaRequirement {
                min_replicas: 1,
                max_replicas: 1,
                client_fog: None,
                client_is_edge: false,
                ..req.clone()
            };
            let Ok(p) = choose_replica_fogs(&g, &pool, &one, self.next_seed()) else {
                break;
            };
            let c = &p.choices[0];
            let before = trace::current().depth;
            match self.place_replica(c.fog_id, &block, &props, c.hint, &data, lease.as_ref()) {
                Ok(at) => {
                    data_hops = data_hops.max(trace::current().depth - before);
                    stored.push(ReplicaLoc {
                        fog_id: at.fog_id,
                        edge_id: at.edge_id,
                        reliability: at.reliability,
                    });
                }
                Err(e) => {
                    warnings.push(format!("replica at {} failed: {e}", c.fog_id));
                    bad.insert(c.fog_id);
                }
            }
        }
        if stored.len() < min {
            return Err(Error::PutFailed(format!(
                "stored {} of {min} required replicas",
                stored.len()
            )));
        }
        let unmet = !reliability_satisfied(meta.reliability, &reliabilities(&stored));
        if unmet {
            warnings.push(format!(
                "reliability {} not met with {} replicas",
                meta.reliability,
                stored.len()
            ));
        }
        let record = BlockRecord {
            block_id: bid.clone(),
            stream_id: sid.clone(),
            static_props: props,
            replicas: stored.clone(),
            size,
            md5_checksum: md5,
            pending_md5: None,
            writer: None,
            reliability_unmet: unmet,
        };
        self.ask::<Value>(owner, &FogRequest::AppendBlock { record, lease })?;
        Ok(PutAck {
            q: stored.len(),
            replicas: stored,
            planned_q: plan.replica_count(),
            reliability_unmet: unmet,
            warnings,
            data_hops,
        })
    }

    pub fn update_block(
        &self,
        sid: &StreamId,
        bid: &BlockId,
        data: Vec<u8>,
        lease: Option<LeaseToken>,
    ) -> Result<UpdateAck> {
        if data.len() as u64 > self.cfg.params.max_block_bytes {
            return Err(Error::InvalidArgument(format!("block of {} bytes", data.len())));
        }
        let md5 = md5_hex(&data);
        let owner = self.locate_owner(sid)?;
        let md5_req = |phase| FogRequest::SetBlockMd5 {
            stream_id: sid.clone(),
            block_id: bid.clone(),
            md5: md5.clone(),
            phase,
            lease: lease.clone(),
            size: Some(data.len() as u64),
        };
        let rec: BlockRecord = self.ask(owner, &md5_req(Md5Phase::Begin))?;
        let block = rec.block_ref();
        let fogs: Vec<FogId> = rec.replica_fogs().into_iter().collect();
        let results = self.fan_out(fogs.len(), fogs, |f| {
            let r: Result<usize> = self.ask_data(f, &FogRequest::OverwriteReplica { block: block.clone() }, &data);
            (f, r)
        });
        let mut failed = Vec::new();
        let mut written = 0;
        for ((f, r), _) in results {
            match r {
                Ok(n) => written += n,
                Err(e) => {
                    log::warn!("{}: overwrite of {block} at {f} failed: {e}", self.id());
                    failed.push(f);
                }
            }
        }
        let phase = if written > 0 { Md5Phase::Commit } else { Md5Phase::Abort };
        self.ask::<BlockRecord>(owner, &md5_req(phase))?;
        if !failed.is_empty() {
            return Err(Error::PartialUpdate { failed });
        }
        Ok(UpdateAck { replicas: written, md5 })
    }

    fn local_hosts(&self, block: &BlockRef) -> Vec<EdgeId> {
        self.lock()
            .edges
            .iter()
            .filter(|(_, e)| e.alive && e.hosted.contains(block))
            .map(|(id, _)| *id)
            .collect()
    }

    fn fetch_from(&self, fog: FogId, block: &BlockRef, accept: &BlockRecord) -> Result<(StoredReplica, Vec<u8>)> {
        let (v, data) = self.call_fog(fog, &FogRequest::ReadReplica { block: block.clone() }, None)?;
        let meta: StoredReplica = wire::decode(v)?;
        let data = data.ok_or_else(|| Error::Protocol("replica without payload".into()))?;
        let md5 = md5_hex(&data);
        if !accept.accepts_md5(&md5) {
            return Err(Error::Integrity(format!("{block} at {fog} has md5 {md5}")));
        }
        Ok((meta, data))
    }

    /// Read a block, preferring a replica in this fog's partition.
    pub fn get_block(&self, sid: &StreamId, bid: &BlockId) -> Result<(GetReply, Vec<u8>)> {
        let mut attempt = 0;
        loop {
            // Replicas can move past the md5 we were given if updates land
            // while we read. Fetch the record again and retry.
            match self.get_block_once(sid, bid) {
                Err(Error::Integrity(_)) if attempt < 4 => attempt += 1,
                Err(Error::Integrity(m)) => {
                    return Err(Error::Unavailable(format!(
                        "no readable replica: integrity check failed: {m}"
                    )))
                }
                r => return r,
            }
        }
    }

    fn get_block_once(&self, sid: &StreamId, bid: &BlockId) -> Result<(GetReply, Vec<u8>)> {
        let owner = self.locate_owner(sid)?;
        let info: BlockInfo = self.ask(
            owner,
            &FogRequest::BlockInfo {
                stream_id: sid.clone(),
                block_id: bid.clone(),
            },
        )?;
        let block = info.record.block_ref();
        let reply = |meta: StoredReplica, data: &[u8], fog, local, remote| GetReply {
            stream_id: sid.clone(),
            block_id: bid.clone(),
            props: meta.static_props,
            md5: md5_hex(data),
            served_by: fog,
            local,
            remote_fetches: remote,
        };
        let me = self.id();
        if !self.local_hosts(&block).is_empty() {
            match self.fetch_from(me, &block, &info.record) {
                Ok((meta, data)) => return Ok((reply(meta, &data, me, true, 0), data)),
                Err(e) => log::warn!("{me}: local replica of {block} unusable: {e}"),
            }
        }
        let mut candidates: Vec<FogId> = info.record.replica_fogs().into_iter().filter(|&f| f != me).collect();
        let mut tried = 0;
        let mut last = None;
        let mut searched = false;
        loop {
            for f in std::mem::take(&mut candidates) {
                tried += 1;
                match self.fetch_from(f, &block, &info.record) {
                    Ok((meta, data)) => return Ok((reply(meta, &data, f, false, tried), data)),
                    Err(e) => last = Some(e),
                }
            }
            if searched {
                break;
            }
            searched = true;
            // The registry may lag a recovery: fall back to a full search.
            let query = vec![
                (BLOCK_ID_PROP.to_owned(), bid.0.clone()),
                (STREAM_ID_PROP.to_owned(), sid.0.clone()),
            ];
            let known = info.record.replica_fogs();
            if let Ok(hits) = self.search(SearchKind::Block, &query, true) {
                candidates = hits
                    .blocks
                    .get(&block)
                    .map(|fogs| {
                        fogs.iter()
                            .copied()
                            .filter(|f| *f != me && !known.contains(f))
                            .collect()
                    })
                    .unwrap_or_default();
            }
        }
        if let Some(Error::Integrity(m)) = last {
            return Err(Error::Integrity(m));
        }
        Err(Error::Unavailable(format!(
            "no readable replica of {block}: {}",
            last.map_or("no candidates".into(), |e| e.to_string())
        )))
    }

    pub(super) fn store_replica(
        &self,
        block: &BlockRef,
        props: Vec<Property>,
        hint: Quadrant,
        data: Vec<u8>,
        lease: Option<LeaseToken>,
    ) -> Result<StoredAt> {
        let me = self.id();
        let md5 = md5_hex(&data);
        let size = data.len() as u64;
        if let Some(token) = lease {
            let at_ms = self.now_ms();
            self.lock().lease_log.push(LeaseLogEntry {
                client_id: token.client_id,
                session_key: token.session_key,
                block: block.clone(),
                at_ms,
            });
        }
        let mut tried = BTreeSet::new();
        for _ in 0..4 {
            let edge = {
                let st = self.lock();
                let stats: Vec<_> = st.edges.values().filter(|e| e.alive).map(|e| e.stat).collect();
                if stats.is_empty() {
                    return Err(Error::NoCapacity);
                }
                let mut exclude = tried.clone();
                exclude.extend(
                    st.edges
                        .iter()
                        .filter(|(_, e)| e.hosted.contains(block))
                        .map(|(id, _)| *id),
                );
                let summary = summarize_partition(me, &stats)?;
                choose_edge_excluding(&stats, &summary, hint, size, &exclude)?
            };
            let req = EdgeRequest::StoreReplica {
                block: block.clone(),
                props: props.clone(),
                md5: md5.clone(),
            };
            match self.call_edge(edge, &req, Some(&data)) {
                Ok((v, _)) => {
                    let ack: StoreAck = wire::decode(v)?;
                    let mut guard = self.lock();
                    let st = &mut *guard;
                    let reliability = match st.edges.get_mut(&edge) {
                        Some(e) => {
                            e.stat.free_storage = ack.free_storage_after;
                            e.stat.reliability
                        }
                        None => return Err(Error::EdgeDown(edge)),
                    };
                    index_replica(st, edge, block, &props);
                    st.summary_dirty = true;
                    return Ok(StoredAt {
                        fog_id: me,
                        edge_id: edge,
                        reliability,
                    });
                }
                Err(Error::NoCapacity) => {
                    if let Some(e) = self.lock().edges.get_mut(&edge) {
                        e.stat.free_storage = e.stat.free_storage.min(size.saturating_sub(1));
                    }
                    tried.insert(edge);
                }
                Err(Error::AlreadyExists(_) | Error::EdgeDown(_) | Error::Transport(_)) => {
                    tried.insert(edge);
                }
                Err(e) => return Err(e),
            }
        }
        Err(Error::NoCapacity)
    }

    pub(super) fn read_replica(&self, block: &BlockRef) -> Result<(Value, Option<Vec<u8>>)> {
        let mut last = Error::NotFound(format!("replica {block} at {}", self.id()));
        for edge in self.local_hosts(block) {
            match self.call_edge(edge, &EdgeRequest::ReadReplica { block: block.clone() }, None) {
                Ok(r) => return Ok(r),
                Err(e) => last = e,
            }
        }
        Err(last)
    }

    pub(super) fn overwrite_replica(&self, block: &BlockRef, data: Vec<u8>) -> Result<usize> {
        let md5 = md5_hex(&data);
        let hosts = self.local_hosts(block);
        if hosts.is_empty() {
            return Err(Error::NotFound(format!("replica {block} at {}", self.id())));
        }
        let mut n = 0;
        for edge in hosts {
            let (v, _) = self.call_edge(
                edge,
                &EdgeRequest::OverwriteReplica {
                    block: block.clone(),
                    md5: md5.clone(),
                },
                Some(&data),
            )?;
            let ack: StoreAck = wire::decode(v)?;
            let mut st = self.lock();
            if let Some(e) = st.edges.get_mut(&edge) {
                e.stat.free_storage = ack.free_storage_after;
            }
            st.summary_dirty = true;
            n += 1;
        }
        Ok(n)
    }

    /// Re-replicate every block the failed edge hosted.
    pub fn recover_lost_blocks(&self, failed: EdgeId) -> RecoveryReport {
        let now = self.now_ms();
        let (blocks, r_failed) = {
            let mut guard = self.lock();
            let st = &mut *guard;
            let Some(entry) = st.edges.get_mut(&failed) else {
                return RecoveryReport {
                    fog_id: self.id(),
                    failed_edge: failed,
                    detected_at_ms: now,
                    blocks_lost: 0,
                    blocks_recovered: 0,
                    per_block: Vec::new(),
                };
            };
            entry.alive = false;
            let mut blocks = std::mem::take(&mut entry.hosted);
            let r = entry.stat.reliability;
            blocks.extend(st.index.remove_edge(failed));
            st.filters_stale = true;
            st.summary_dirty = true;
            (blocks, r)
        };
        let blocks: Vec<BlockRef> = blocks.into_iter().collect();
        let per_block: Vec<BlockRecovery> = self
            .fan_out(self.cfg.params.recovery_workers, blocks, |b| {
                self.recover_block(b, failed, r_failed)
            })
            .into_iter()
            .map(|(r, _)| r)
            .collect();
        let lost = per_block
            .iter()
            .filter(|b| b.outcome != RecoveryOutcome::Orphan)
            .count();
        let recovered = per_block
            .iter()
            .filter(|b| b.outcome == RecoveryOutcome::Recovered)
            .count();
        let report = RecoveryReport {
            fog_id: self.id(),
            failed_edge: failed,
            detected_at_ms: now,
            blocks_lost: lost,
            blocks_recovered: recovered,
            per_block,
        };
        for b in &report.per_block {
            match b.outcome {
                RecoveryOutcome::DataLoss => log::error!("{}: block {} lost", self.id(), b.block),
                RecoveryOutcome::Stalled => log::error!("{}: recovery of {} stalled", self.id(), b.block),
                _ => {}
            }
        }
        self.lock().recoveries.push(report.clone());
        report
    }

    fn recover_block(&self, block: BlockRef, failed: EdgeId, r_failed: f64) -> BlockRecovery {
        let me = self.id();
        let outcome = |outcome, targets, unmet| BlockRecovery {
            block: block.clone(),
            outcome,
            targets,
            reliability_unmet: unmet,
        };
        let info: Result<BlockInfo> = self.locate_owner(&block.stream_id).and_then(|owner| {
            self.ask(
                owner,
                &FogRequest::BlockInfo {
                    stream_id: block.stream_id.clone(),
                    block_id: block.block_id.clone(),
                },
            )
        });
        let info = match info {
            Ok(i) => i,
            Err(Error::NotFound(_)) => return outcome(RecoveryOutcome::Orphan, vec![], false),
            Err(e) => {
                log::warn!("{me}: no metadata for {block}: {e}");
                return outcome(RecoveryOutcome::Stalled, vec![], false);
            }
        };
        let lost = ReplicaLoc {
            fog_id: me,
            edge_id: failed,
            reliability: r_failed,
        };
        let surviving: Vec<ReplicaLoc> = info
            .record
            .replicas
            .iter()
            .filter(|r| !(r.fog_id == me && r.edge_id == failed))
            .copied()
            .collect();
        let sources: BTreeSet<FogId> = surviving.iter().map(|r| r.fog_id).collect();
        let payload = sources
            .iter()
            .find_map(|&f| self.fetch_from(f, &block, &info.record).ok());
        let Some((meta, data)) = payload else {
            return outcome(RecoveryOutcome::DataLoss, vec![], true);
        };
        let Some((g, summaries)) = self.planning_view() else {
            return outcome(RecoveryOutcome::Stalled, vec![], true);
        };
        let size = data.len() as u64;
        let mut exclude = sources.clone();
        let mut bad = BTreeSet::new();
        let mut added: Vec<ReplicaLoc> = Vec::new();
        let satisfied = |added: &[ReplicaLoc]| {
            let mut all = reliabilities(&surviving);
            all.extend(reliabilities(added));
            reliability_satisfied(info.reliability, &all)
        };
        for _ in 0..(2 * info.bounds.max + 4) {
            let total = surviving.len() + added.len();
            if !added.is_empty() && (total >= info.bounds.max || (total >= info.bounds.min && satisfied(&added))) {
                break;
            }
            let strict: BTreeSet<FogId> = exclude.union(&bad).copied().collect();
            let target = choose_recovery_fog(&g, &summaries, r_failed, size, &strict)
                .or_else(|_| choose_recovery_fog(&g, &summaries, r_failed, size, &bad));
            let Ok((fog, hint)) = target else { break };
            match self.place_replica(fog, &block, &meta.static_props, hint, &data, None) {
                Ok(at) => {
                    exclude.insert(fog);
                    added.push(ReplicaLoc {
                        fog_id: at.fog_id,
                        edge_id: at.edge_id,
                        reliability: at.reliability,
                    });
                }
                Err(e) => {
                    log::warn!("{me}: recovery of {block} at {fog} failed: {e}");
                    bad.insert(fog);
                }
            }
        }
        if added.is_empty() {
            return outcome(RecoveryOutcome::Stalled, vec![], true);
        }
        let unmet = !satisfied(&added);
        let update = self.locate_owner(&block.stream_id).and_then(|owner| {
            self.ask::<Value>(
                owner,
                &FogRequest::SetBlockReplicas {
                    stream_id: block.stream_id.clone(),
                    block_id: block.block_id.clone(),
                    remove: vec![lost],
                    add: added.clone(),
                    reliability_unmet: unmet,
                },
            )
        });
        if let Err(e) = update {
            log::warn!("{me}: registry update for {block} failed: {e}");
        }
        outcome(RecoveryOutcome::Recovered, added, unmet)
    }
}
