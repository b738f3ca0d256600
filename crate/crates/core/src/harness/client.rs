//! Workload clients. Each client is a small state machine attached to one
//! fog; a driver calls [`ClientActor::step`] and waits the returned delay
//! before calling it again.

use std::collections::BTreeMap;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::report::Metrics;
use super::{pick, WorkloadSpec};
use crate::error::{Error, Result};
use crate::fog::{FindResult, GetReply, LeaseGrant, LeaseToken, PutAck, StreamMeta};
use crate::types::{md5_hex, BlockId, BlockRef, FogId, Property, StreamId, BLOCK_ID_PROP};
use crate::wire::{self, FogRequest, Reply};

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct OpCost {
    pub latency_us: f64,
    pub messages: u64,
    pub bytes: u64,
}

/// How clients reach their fog.
pub(crate) trait Gateway: Sync {
    fn call(&self, fog: FogId, req: FogRequest, data: Option<Vec<u8>>) -> (Result<Reply>, OpCost);
    fn now_ms(&self) -> u64;
}

/// A committed block as the clients know it.
#[derive(Debug, Clone)]
pub(crate) struct CatalogEntry {
    pub block: BlockRef,
    pub md5: String,
    pub q: usize,
    pub committed_at_ms: u64,
}

#[derive(Default)]
pub(crate) struct Shared {
    pub catalog: Vec<CatalogEntry>,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaResult {
    Updated(u64),
    Stale(u64),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaLedgerEntry {
    pub client: String,
    pub stream: StreamId,
    pub passed: u64,
    pub result: MetaResult,
    pub at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "event")]
pub enum LeaseEvent {
    Granted {
        client: String,
        stream: StreamId,
        session_key: String,
        at_ms: u64,
        expiry_ms: u64,
    },
    Renewed {
        client: String,
        stream: StreamId,
        session_key: String,
        at_ms: u64,
        expiry_ms: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub client: String,
    pub session_key: Option<String>,
    pub block: BlockRef,
    pub at_ms: u64,
}

pub(crate) struct Ctx<'a> {
    pub w: &'a WorkloadSpec,
    pub gw: &'a dyn Gateway,
    pub shared: &'a Mutex<Shared>,
    /// How long a new block may take to become findable from every fog.
    pub settle_ms: u64,
}

struct Held {
    token: LeaseToken,
    expiry_ms: u64,
    duration_ms: u64,
}

enum Pending {
    Put(StreamId),
    MetaUpdate(StreamId, u64),
}

pub(crate) struct ClientActor {
    pub name: String,
    pub fog: FogId,
    rng: ChaCha8Rng,
    remaining: usize,
    put_streams: Vec<StreamId>,
    meta_streams: Vec<StreamId>,
    prefix: String,
    seq: usize,
    held: BTreeMap<StreamId, Held>,
    pending: Option<Pending>,
}

impl ClientActor {
    pub fn new(
        name: String,
        fog: FogId,
        seed: u64,
        ops: usize,
        put_streams: Vec<StreamId>,
        meta_streams: Vec<StreamId>,
        prefix: String,
    ) -> Self {
        ClientActor {
            name,
            fog,
            rng: ChaCha8Rng::seed_from_u64(seed),
            remaining: ops,
            put_streams,
            meta_streams,
            prefix,
            seq: 0,
            held: BTreeMap::new(),
            pending: None,
        }
    }

    /// Run one step. Returns the delay in microseconds before the next
    /// step, or `None` once the client is done.
    pub fn step(&mut self, cx: &Ctx) -> Option<f64> {
        let jitter = self.rng.gen_range(0.0..500.0);
        if let Some(p) = self.pending.take() {
            let t = match p {
                Pending::Put(sid) => self.put(cx, sid),
                Pending::MetaUpdate(sid, v) => self.meta_update(cx, sid, v),
            };
            return Some(t + jitter);
        }
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let m = cx.w.op_mix;
        let weights = [m.put, m.get, m.find, m.meta_update];
        let mut x = self.rng.gen::<f64>() * weights.iter().sum::<f64>();
        let mut op = 3;
        for (i, w) in weights.iter().enumerate() {
            if x < *w {
                op = i;
                break;
            }
            x -= w;
        }
        let t = match op {
            0 => match self.choose(true) {
                Some(sid) => self.put(cx, sid),
                None => self.skip(cx),
            },
            1 => self.get(cx),
            2 => self.find(cx),
            _ => self.meta_get(cx),
        };
        Some(t + jitter)
    }

    fn choose(&mut self, put: bool) -> Option<StreamId> {
        let list = if put { &self.put_streams } else { &self.meta_streams };
        if list.is_empty() {
            return None;
        }
        Some(list[self.rng.gen_range(0..list.len())].clone())
    }

    fn skip(&self, cx: &Ctx) -> f64 {
        cx.shared.lock().unwrap().metrics.skipped += 1;
        0.0
    }

    fn call(&self, cx: &Ctx, op: &str, req: FogRequest, data: Option<Vec<u8>>) -> (Result<Reply>, f64) {
        let (r, cost) = cx.gw.call(self.fog, req, data);
        let mut sh = cx.shared.lock().unwrap();
        sh.metrics.op(op, cost.latency_us, r.as_ref().map(|_| ()));
        sh.metrics.traffic.op_messages += cost.messages;
        sh.metrics.traffic.op_bytes += cost.bytes;
        (r, cost.latency_us)
    }

    /// A valid lease on `sid`, renewing or opening one as needed.
    fn ensure_lease(&mut self, cx: &Ctx, sid: &StreamId, elapsed: &mut f64) -> Option<LeaseToken> {
        let now = cx.gw.now_ms();
        if let Some(h) = self.held.get(sid) {
            if h.expiry_ms > now + h.duration_ms / 10 {
                return Some(h.token.clone());
            }
            let req = FogRequest::RenewLease {
                stream_id: sid.clone(),
                client_id: self.name.clone(),
                session_key: h.token.session_key.clone(),
            };
            let (r, t) = self.call(cx, "renew_lease", req, None);
            *elapsed += t;
            match r.and_then(|(v, _)| wire::decode::<LeaseGrant>(v)) {
                Ok(g) => {
                    let h = self.held.get_mut(sid).expect("held");
                    h.expiry_ms = g.expiry_ms;
                    let token = h.token.clone();
                    cx.shared
                        .lock()
                        .unwrap()
                        .metrics
                        .lease_events
                        .push(LeaseEvent::Renewed {
                            client: self.name.clone(),
                            stream: sid.clone(),
                            session_key: token.session_key.clone(),
                            at_ms: g.expiry_ms - g.duration_ms,
                            expiry_ms: g.expiry_ms,
                        });
                    return Some(token);
                }
                Err(_) => {
                    self.held.remove(sid);
                }
            }
        }
        let req = FogRequest::OpenStream {
            stream_id: sid.clone(),
            client_id: self.name.clone(),
            duration_ms: cx.w.lease_ms,
        };
        let (r, t) = self.call(cx, "open_stream", req, None);
        *elapsed += t;
        let g = r.and_then(|(v, _)| wire::decode::<LeaseGrant>(v)).ok()?;
        let token = LeaseToken {
            client_id: self.name.clone(),
            session_key: g.session_key.clone(),
        };
        self.held.insert(
            sid.clone(),
            Held {
                token: token.clone(),
                expiry_ms: g.expiry_ms,
                duration_ms: g.duration_ms,
            },
        );
        cx.shared
            .lock()
            .unwrap()
            .metrics
            .lease_events
            .push(LeaseEvent::Granted {
                client: self.name.clone(),
                stream: sid.clone(),
                session_key: g.session_key,
                at_ms: g.expiry_ms - g.duration_ms,
                expiry_ms: g.expiry_ms,
            });
        Some(token)
    }

    fn put(&mut self, cx: &Ctx, sid: StreamId) -> f64 {
        let mut elapsed = 0.0;
        let lease = if cx.w.leasing {
            match self.ensure_lease(cx, &sid, &mut elapsed) {
                Some(t) => Some(t),
                None => {
                    cx.shared.lock().unwrap().metrics.lease_polls += 1;
                    self.pending = Some(Pending::Put(sid));
                    return elapsed + cx.w.lease_poll_ms as f64 * 1000.0;
                }
            }
        } else {
            None
        };
        self.seq += 1;
        let bid = BlockId(format!("{}-{}", self.prefix, self.seq));
        let size = *pick(&mut self.rng, &cx.w.block_sizes) as usize;
        let mut data = vec![0u8; size];
        self.rng.fill(&mut data[..]);
        let md5 = md5_hex(&data);
        let req = FogRequest::PutBlock {
            stream_id: sid.clone(),
            block_id: bid.clone(),
            props: vec![
                Property::new("client", self.name.clone()),
                Property::new("seq", self.seq as i64),
            ],
            lease: lease.clone(),
            client_is_edge: true,
        };
        let (r, t) = self.call(cx, "put", req, Some(data));
        elapsed += t;
        match r.and_then(|(v, _)| wire::decode::<PutAck>(v)) {
            Ok(ack) => {
                let block = BlockRef::new(sid, bid);
                let at_ms = cx.gw.now_ms();
                let mut sh = cx.shared.lock().unwrap();
                let m = &mut sh.metrics;
                m.q.push(ack.q);
                m.unmet += u64::from(ack.reliability_unmet);
                m.data_hops.push(ack.data_hops + 1);
                m.commits.push(CommitRecord {
                    client: self.name.clone(),
                    session_key: lease.map(|l| l.session_key),
                    block: block.clone(),
                    at_ms,
                });
                sh.catalog.push(CatalogEntry {
                    block,
                    md5,
                    q: ack.q,
                    committed_at_ms: at_ms,
                });
            }
            Err(Error::LeaseLost | Error::LeaseInvalid(_)) => {
                self.held.remove(&sid);
            }
            Err(e) => log::debug!("{}: put failed: {e}", self.name),
        }
        elapsed
    }

    fn random_block(&mut self, cx: &Ctx) -> Option<CatalogEntry> {
        let mut sh = cx.shared.lock().unwrap();
        if sh.catalog.is_empty() {
            sh.metrics.skipped += 1;
            return None;
        }
        let i = self.rng.gen_range(0..sh.catalog.len());
        Some(sh.catalog[i].clone())
    }

    fn get(&mut self, cx: &Ctx) -> f64 {
        let Some(entry) = self.random_block(cx) else { return 0.0 };
        let req = FogRequest::GetBlock {
            stream_id: entry.block.stream_id.clone(),
            block_id: entry.block.block_id.clone(),
        };
        let (r, t) = self.call(cx, "get", req, None);
        if let Ok((v, Some(data))) = r {
            if let Ok(reply) = wire::decode::<GetReply>(v) {
                let md5 = md5_hex(&data);
                let mut sh = cx.shared.lock().unwrap();
                let m = &mut sh.metrics;
                m.gets += 1;
                m.local_gets += u64::from(reply.local);
                m.read_q.push(entry.q);
                if md5 != reply.md5 || md5 != entry.md5 {
                    m.checksum_failures += 1;
                }
            }
        }
        t
    }

    fn find(&mut self, cx: &Ctx) -> f64 {
        let Some(entry) = self.random_block(cx) else { return 0.0 };
        let req = FogRequest::FindBlock {
            query: vec![(BLOCK_ID_PROP.to_owned(), entry.block.block_id.0.clone())],
            exhaustive: false,
        };
        let (r, t) = self.call(cx, "find", req, None);
        let found = r.and_then(|(v, _)| wire::decode::<FindResult>(v)).ok().and_then(|res| {
            res.hits
                .iter()
                .any(|h| h.stream_id == entry.block.stream_id && h.block_id == entry.block.block_id)
                .then_some(res.hops)
        });
        let mut sh = cx.shared.lock().unwrap();
        match found {
            Some(h) => sh.metrics.find_hops.push(h),
            None if cx.gw.now_ms() < entry.committed_at_ms + cx.settle_ms => sh.metrics.find_unsettled += 1,
            None => sh.metrics.find_misses += 1,
        }
        t
    }

    fn meta_get(&mut self, cx: &Ctx) -> f64 {
        let Some(sid) = self.choose(false) else {
            return self.skip(cx);
        };
        let req = FogRequest::GetStreamMeta {
            stream_id: sid.clone(),
            latest: false,
        };
        let (r, t) = self.call(cx, "meta_get", req, None);
        if let Ok(meta) = r.and_then(|(v, _)| wire::decode::<StreamMeta>(v)) {
            self.pending = Some(Pending::MetaUpdate(sid, meta.version));
        }
        t
    }

    fn meta_update(&mut self, cx: &Ctx, sid: StreamId, version: u64) -> f64 {
        self.seq += 1;
        let req = FogRequest::UpdateStreamMeta {
            stream_id: sid.clone(),
            props: vec![Property::new("counter", self.seq as i64)],
            version,
        };
        let (r, t) = self.call(cx, "meta_update", req, None);
        let result = match r.and_then(|(v, _)| wire::decode::<u64>(v)) {
            Ok(v) => MetaResult::Updated(v),
            Err(Error::StaleVersion { current, .. }) => MetaResult::Stale(current),
            Err(e) => MetaResult::Failed(e.category().to_owned()),
        };
        let at_ms = cx.gw.now_ms();
        cx.shared.lock().unwrap().metrics.meta_ledger.push(MetaLedgerEntry {
            client: self.name.clone(),
            stream: sid,
            passed: version,
            result,
            at_ms,
        });
        t
    }
}
