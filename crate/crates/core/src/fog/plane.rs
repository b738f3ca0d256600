//! Control plane: edge heartbeats, failure detection, partition summaries
//! and fog to fog gossip of summaries and filters.

use std::collections::BTreeMap;

use crate::bloom::{FilterMap, PropertyBloomFilter};
use crate::edge::{EdgeHeartbeat, HeartbeatAck};
use crate::stats::{build_global_matrix, summarize_partition, EdgeStat, PartitionSummary};
use crate::types::{BlockRef, Property};
use crate::wire::FogGossip;

use super::*;

pub(super) fn index_replica(st: &mut FogState, edge: EdgeId, block: &BlockRef, props: &[Property]) {
    let canonical: Vec<(String, String)> = props.iter().map(|p| (p.name.clone(), p.value.canonical())).collect();
    for (name, value) in st.index.index_block(edge, block, &canonical) {
        st.filters.insert_local(&filter_key(SearchKind::Block, &name), &value);
    }
    if let Some(e) = st.edges.get_mut(&edge) {
        e.hosted.insert(block.clone());
    }
}

fn alive_stats(st: &FogState) -> Vec<EdgeStat> {
    st.edges.values().filter(|e| e.alive).map(|e| e.stat).collect()
}

impl FogState {
    fn refresh_summary(&mut self, me: FogId) {
        if !self.summary_dirty {
            return;
        }
        let summary = summarize_partition(me, &alive_stats(self)).ok();
        let stamp = self.summaries.get(&me).map_or(1, |r| r.stamp + 1);
        self.summaries.insert(
            me,
            SummaryRecord {
                fog_id: me,
                stamp,
                summary,
            },
        );
        self.summary_dirty = false;
        self.matrix_dirty = true;
    }

    fn refresh_matrix(&mut self, me: FogId, k: usize) {
        self.refresh_summary(me);
        if !self.matrix_dirty {
            return;
        }
        let list: Vec<PartitionSummary> = self.summaries.values().filter_map(|r| r.summary.clone()).collect();
        self.matrix = build_global_matrix(&list, k).ok().map(Arc::new);
        self.matrix_dirty = false;
    }

    fn rebuild_local_filters(&mut self) {
        if !self.filters_stale {
            return;
        }
        let mut local = FilterMap::new();
        let mut add = |key: String, value: &str| {
            local
                .entry(key.clone())
                .or_insert_with(|| PropertyBloomFilter::new(key))
                .insert(value);
        };
        for (name, vals) in &self.index.entries {
            for v in vals.keys() {
                add(filter_key(SearchKind::Block, name), v);
            }
        }
        for (name, vals) in &self.index.stream_entries {
            for v in vals.keys() {
                add(filter_key(SearchKind::Stream, name), v);
            }
        }
        self.filters.local = local;
        self.filters_stale = false;
    }
}

impl FogNode {
    pub fn on_edge_heartbeat(&self, hb: EdgeHeartbeat) -> Result<HeartbeatAck> {
        let now = self.now_ms();
        if let Some(ep) = &hb.endpoint {
            self.peers.learn_edge(hb.edge_id, ep);
        }
        let mut guard = self.lock();
        let st = &mut *guard;
        let known = st.edges.get(&hb.edge_id).is_some_and(|e| e.alive);
        let entry = st.edges.entry(hb.edge_id).or_insert_with(|| EdgeEntry {
            stat: hb.stat,
            last_heartbeat_ms: now,
            hosted: Default::default(),
            alive: true,
            endpoint: None,
        });
        entry.stat = hb.stat;
        entry.last_heartbeat_ms = now;
        entry.alive = true;
        entry.endpoint = hb.endpoint.clone();
        if hb.full_report {
            entry.hosted.clear();
            st.index.remove_edge(hb.edge_id);
            st.filters_stale = true;
        }
        for t in &hb.tuples {
            index_replica(st, hb.edge_id, &t.block, &t.props);
        }
        st.summary_dirty = true;
        Ok(HeartbeatAck {
            upto_seq: hb.tuples.iter().map(|t| t.seq).max().unwrap_or(0),
            resync: !known && !hb.full_report,
        })
    }

    /// Mark edges that missed `miss_threshold` heartbeat intervals.
    pub fn detect_failures(&self, now: u64) -> Vec<EdgeId> {
        let limit = u64::from(self.cfg.params.miss_threshold) * self.cfg.params.heartbeat_interval_ms;
        let mut st = self.lock();
        let mut failed = Vec::new();
        for (id, e) in st.edges.iter_mut() {
            if e.alive && now.saturating_sub(e.last_heartbeat_ms) >= limit {
                e.alive = false;
                failed.push(*id);
            }
        }
        if !failed.is_empty() {
            st.summary_dirty = true;
        }
        failed
    }

    /// Periodic work: detect failed edges and recover their blocks.
    pub fn tick(&self, now: u64) -> Vec<RecoveryReport> {
        self.detect_failures(now)
            .into_iter()
            .map(|e| self.recover_lost_blocks(e))
            .collect()
    }

    pub fn summary(&self) -> Option<PartitionSummary> {
        let mut st = self.lock();
        st.refresh_summary(self.id());
        st.summaries.get(&self.id()).and_then(|r| r.summary.clone())
    }

    /// Consistent snapshot of the global matrix and the summaries it was
    /// built from.
    pub fn planning_view(&self) -> Option<(Arc<GlobalMatrix>, BTreeMap<FogId, PartitionSummary>)> {
        let mut st = self.lock();
        st.refresh_matrix(self.id(), self.cfg.params.bucket_count);
        let g = st.matrix.clone()?;
        let sums = st
            .summaries
            .values()
            .filter_map(|r| r.summary.clone().map(|s| (r.fog_id, s)))
            .collect();
        Some((g, sums))
    }

    pub fn matrix(&self) -> Option<Arc<GlobalMatrix>> {
        self.planning_view().map(|(g, _)| g)
    }

    /// Messages this fog sends each heartbeat interval.
    pub fn gossip_out(&self) -> Vec<(FogId, FogGossip)> {
        let me = self.id();
        let overlay = &self.cfg.overlay;
        let mut st = self.lock();
        st.refresh_summary(me);
        st.rebuild_local_filters();
        let summaries: Vec<SummaryRecord> = st.summaries.values().cloned().collect();
        let msg = |filters: BTreeMap<FogId, FilterMap>| FogGossip {
            from: me,
            summaries: summaries.clone(),
            filters,
        };
        let mut out = Vec::new();
        if overlay.is_buddy(me) {
            let recursive = st.filters.recursive();
            for b in overlay.buddies_of(me).unwrap_or_default() {
                out.push((b, msg(BTreeMap::from([(me, recursive.clone())]))));
            }
            let mut all = st.filters.buddy.clone();
            all.insert(me, recursive);
            for n in overlay.neighbors_of(me).unwrap_or_default() {
                out.push((n, msg(all.clone())));
            }
        } else if let Ok(b) = overlay.pool_buddy(me) {
            out.push((b, msg(BTreeMap::from([(me, st.filters.local.clone())]))));
        }
        out
    }

    pub fn on_fog_heartbeat(&self, g: FogGossip) {
        let me = self.id();
        let overlay = &self.cfg.overlay;
        let mut st = self.lock();
        for rec in g.summaries {
            if rec.fog_id == me {
                continue;
            }
            let newer = st.summaries.get(&rec.fog_id).is_none_or(|old| rec.stamp > old.stamp);
            if newer {
                st.summaries.insert(rec.fog_id, rec);
                st.matrix_dirty = true;
            }
        }
        let mut filters = g.filters;
        if overlay.is_buddy(me) {
            if let Some(f) = filters.remove(&g.from) {
                if overlay.neighbors_of(me).unwrap_or_default().contains(&g.from) {
                    st.filters.neighbor.insert(g.from, f);
                } else if overlay.is_buddy(g.from) {
                    st.filters.buddy.insert(g.from, f);
                }
            }
        } else if overlay.pool_buddy(me).ok() == Some(g.from) {
            st.filters.buddy = filters;
        }
    }

    pub fn send_gossip(&self, to: FogId, msg: FogGossip) -> Result<()> {
        self.peers
            .call_fog(self.id(), to, &FogRequest::FogHeartbeat(msg), None)
            .map(|_| ())
    }

    pub fn alive_edges(&self) -> Vec<EdgeStat> {
        alive_stats(&self.lock())
    }
}
