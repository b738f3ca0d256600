//! Metadata search: the local index first, then neighbors whose filters
//! pass, then buddies whose recursive filters pass. A buddy asked on
//! behalf of another fog checks its own index and forwards to its own
//! passing neighbors, so no answer is more than two forwarding hops away.

use crate::bloom::plan_search;
use crate::types::Query;

use super::*;

fn local_hits(st: &FogState, me: FogId, kind: SearchKind, query: &Query) -> SearchHits {
    let mut hits = SearchHits::default();
    match kind {
        SearchKind::Block => {
            for (_, b) in st.index.lookup(query) {
                hits.blocks.entry(b).or_default().insert(me);
            }
        }
        SearchKind::Stream => {
            for s in st.index.lookup_streams(query) {
                hits.streams.entry(s).or_default().insert(me);
            }
        }
    }
    hits
}

fn namespaced(kind: SearchKind, query: &Query) -> Query {
    query.iter().map(|(n, v)| (filter_key(kind, n), v.clone())).collect()
}

impl FogNode {
    fn forward(&self, targets: Vec<FogId>, req: impl Fn(FogId) -> FogRequest + Sync, hits: &mut SearchHits) {
        let results = self.fan_out(targets.len(), targets, |f| (f, self.ask::<SearchHits>(f, &req(f))));
        for ((f, r), _) in results {
            match r {
                Ok(h) => {
                    let hops = 1 + h.hops;
                    hits.merge(h, hops);
                }
                Err(e) => log::debug!("{}: search at {f} failed: {e}", self.id()),
            }
        }
    }

    pub(crate) fn search(&self, kind: SearchKind, query: &Query, exhaustive: bool) -> Result<SearchHits> {
        if query.is_empty() {
            return Ok(SearchHits::default());
        }
        let me = self.id();
        let fq = namespaced(kind, query);
        let (mut hits, plan) = {
            let st = self.lock();
            (local_hits(&st, me, kind, query), plan_search(&st.filters, &fq))
        };
        if !exhaustive && !hits.is_empty() {
            return Ok(hits);
        }
        let neighbors: Vec<FogId> = plan.candidate_neighbors.into_iter().collect();
        self.forward(
            neighbors,
            |_| FogRequest::SearchAt {
                kind,
                query: query.clone(),
                tier: SearchTier::Local,
                origin: me,
                exhaustive,
            },
            &mut hits,
        );
        if !exhaustive && !hits.is_empty() {
            return Ok(hits);
        }
        let buddies: Vec<FogId> = plan.candidate_buddies.into_iter().filter(|&b| b != me).collect();
        self.forward(
            buddies,
            |_| FogRequest::SearchAt {
                kind,
                query: query.clone(),
                tier: SearchTier::Pool,
                origin: me,
                exhaustive,
            },
            &mut hits,
        );
        Ok(hits)
    }

    pub(super) fn search_at(
        &self,
        kind: SearchKind,
        query: &Query,
        tier: SearchTier,
        origin: FogId,
        exhaustive: bool,
    ) -> Result<SearchHits> {
        let me = self.id();
        let fq = namespaced(kind, query);
        let (mut hits, neighbors) = {
            let st = self.lock();
            let hits = local_hits(&st, me, kind, query);
            let plan = plan_search(&st.filters, &fq);
            (hits, plan.candidate_neighbors)
        };
        if tier == SearchTier::Local || (!exhaustive && !hits.is_empty()) {
            return Ok(hits);
        }
        let neighbors: Vec<FogId> = neighbors.into_iter().filter(|&n| n != origin).collect();
        self.forward(
            neighbors,
            |_| FogRequest::SearchAt {
                kind,
                query: query.clone(),
                tier: SearchTier::Local,
                origin,
                exhaustive,
            },
            &mut hits,
        );
        Ok(hits)
    }

    pub fn find_block(&self, query: &Query, exhaustive: bool) -> Result<FindResult> {
        let hits = self.search(SearchKind::Block, query, exhaustive)?;
        Ok(FindResult {
            hops: hits.hops,
            hits: hits
                .blocks
                .into_iter()
                .map(|(b, fogs)| FindHit {
                    stream_id: b.stream_id,
                    block_id: b.block_id,
                    candidate_fogs: fogs.into_iter().collect(),
                })
                .collect(),
        })
    }

    pub fn find_stream(&self, query: &Query, exhaustive: bool) -> Result<FindStreamResult> {
        let hits = self.search(SearchKind::Stream, query, exhaustive)?;
        Ok(FindStreamResult {
            hops: hits.hops,
            streams: hits.streams.into_keys().collect(),
        })
    }
}
