//! Clocks, the peer transport abstraction, the per-operation cost trace,
//! and the TCP transport.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::edge::EdgeNode;
use crate::error::{Error, Result};
use crate::fog::FogNode;
use crate::overlay::Endpoint;
use crate::types::{EdgeId, FogId};
use crate::wire::{self, EdgeRequest, FogRequest};

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn set(&self, ms: u64) {
        self.0.store(ms, Ordering::SeqCst);
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

/// How a fog reaches other fogs and its edges.
pub trait Peers: Send + Sync {
    fn call_fog(
        &self,
        from: FogId,
        to: FogId,
        req: &FogRequest,
        data: Option<&[u8]>,
    ) -> Result<(Value, Option<Vec<u8>>)>;

    fn call_edge(
        &self,
        from: FogId,
        to: EdgeId,
        req: &EdgeRequest,
        data: Option<&[u8]>,
    ) -> Result<(Value, Option<Vec<u8>>)>;

    /// Record where an edge can be reached.
    fn learn_edge(&self, _edge: EdgeId, _endpoint: &Endpoint) {}

    fn now_ms(&self) -> u64;

    /// Whether fan-out should use real threads.
    fn concurrent(&self) -> bool;
}

/// Fixed per-hop latency plus a bandwidth term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub hop_latency_us: f64,
    pub bandwidth_bps: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            hop_latency_us: 1000.0,
            bandwidth_bps: 90e6,
        }
    }
}

impl CostModel {
    /// Time for one request/response exchange moving `bytes` in total.
    pub fn exchange_us(&self, bytes: u64) -> f64 {
        2.0 * self.hop_latency_us + bytes as f64 * 8.0 / self.bandwidth_bps * 1e6
    }
}

/// Cost of the operation running on this thread: critical-path time and
/// hop depth, plus message and byte totals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OpTrace {
    pub elapsed_us: f64,
    pub depth: u32,
    pub messages: u64,
    pub bytes: u64,
}

pub mod trace {
    use super::*;

    thread_local! {
        static TRACE: Cell<OpTrace> = Cell::new(OpTrace::default());
    }

    pub fn current() -> OpTrace {
        TRACE.with(Cell::get)
    }

    pub fn set(t: OpTrace) {
        TRACE.with(|c| c.set(t));
    }

    pub fn take() -> OpTrace {
        TRACE.with(|c| c.replace(OpTrace::default()))
    }

    /// Account one exchange of `bytes` on the current path.
    pub fn exchange(cost: &CostModel, bytes: u64) {
        TRACE.with(|c| {
            let mut t = c.get();
            t.elapsed_us += cost.exchange_us(bytes);
            t.depth += 1;
            t.messages += 1;
            t.bytes += bytes;
            c.set(t);
        });
    }

    /// Run `f` on every item as if concurrently: the path cost afterwards
    /// is that of the slowest branch. Returns each result with the hop
    /// depth its branch added.
    pub fn fork_join<T, R>(items: Vec<T>, f: impl Fn(T) -> R) -> Vec<(R, u32)> {
        let start = current();
        let mut end = start;
        let mut out = Vec::with_capacity(items.len());
        for item in items {
            let before = current();
            set(OpTrace {
                elapsed_us: start.elapsed_us,
                depth: start.depth,
                ..before
            });
            let r = f(item);
            let after = current();
            out.push((r, after.depth - start.depth));
            end.elapsed_us = end.elapsed_us.max(after.elapsed_us);
            end.depth = end.depth.max(after.depth);
            end.messages = after.messages;
            end.bytes = after.bytes;
        }
        set(end);
        out
    }
}

/// Run `f` over `items`, on up to `workers` threads when `concurrent`,
/// otherwise in order with fork/join cost accounting. Results keep the
/// input order and carry each branch's added hop depth.
pub fn fan_out<T, R, F>(concurrent: bool, workers: usize, items: Vec<T>, f: F) -> Vec<(R, u32)>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    if !concurrent || items.len() <= 1 || workers <= 1 {
        return trace::fork_join(items, f);
    }
    let n = items.len();
    let queue = Mutex::new(items.into_iter().enumerate().collect::<Vec<_>>());
    let results: Mutex<Vec<Option<(R, u32)>>> = Mutex::new((0..n).map(|_| None).collect());
    thread::scope(|s| {
        for _ in 0..workers.min(n) {
            s.spawn(|| loop {
                let Some((i, item)) = queue.lock().unwrap().pop() else {
                    break;
                };
                let r = f(item);
                results.lock().unwrap()[i] = Some((r, 1));
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

fn roundtrip(
    addr: &str,
    header: serde_json::Map<String, Value>,
    request_id: u64,
    data: Option<&[u8]>,
    max_payload: usize,
) -> Result<(Value, Option<Vec<u8>>)> {
    let stream = TcpStream::connect(addr).map_err(|e| Error::Transport(format!("{addr}: {e}")))?;
    stream.set_read_timeout(Some(Duration::from_secs(60))).ok();
    let mut w = BufWriter::new(stream.try_clone()?);
    wire::write_message(&mut w, header, data)?;
    drop(w);
    let mut r = BufReader::new(stream);
    let (h, payload) = wire::read_message(&mut r, max_payload)?
        .ok_or_else(|| Error::Transport(format!("{addr}: connection closed")))?;
    Ok((wire::parse_response(h, request_id)?, payload))
}

static NEXT_REQUEST: AtomicU64 = AtomicU64::new(1);

fn next_request_id() -> u64 {
    NEXT_REQUEST.fetch_add(1, Ordering::Relaxed)
}

/// Payload cap used by the TCP transport.
pub const MAX_PAYLOAD: usize = 64 << 20;

/// Call a fog over TCP. Used by fogs, edges and external clients alike.
pub fn call_fog_at(addr: &str, req: &FogRequest, data: Option<&[u8]>) -> Result<(Value, Option<Vec<u8>>)> {
    let id = next_request_id();
    roundtrip(addr, wire::request_header(id, req)?, id, data, MAX_PAYLOAD)
}

pub fn call_edge_at(addr: &str, req: &EdgeRequest, data: Option<&[u8]>) -> Result<(Value, Option<Vec<u8>>)> {
    let id = next_request_id();
    roundtrip(addr, wire::request_header(id, req)?, id, data, MAX_PAYLOAD)
}

/// Peers reached over TCP.
pub struct TcpPeers {
    fogs: BTreeMap<FogId, Endpoint>,
    edges: RwLock<BTreeMap<EdgeId, Endpoint>>,
}

impl TcpPeers {
    pub fn new(fogs: BTreeMap<FogId, Endpoint>) -> Self {
        TcpPeers {
            fogs,
            edges: RwLock::new(BTreeMap::new()),
        }
    }
}

impl Peers for TcpPeers {
    fn call_fog(
        &self,
        _from: FogId,
        to: FogId,
        req: &FogRequest,
        data: Option<&[u8]>,
    ) -> Result<(Value, Option<Vec<u8>>)> {
        let ep = self
            .fogs
            .get(&to)
            .ok_or_else(|| Error::NotFound(format!("address of {to}")))?;
        call_fog_at(&ep.addr(), req, data)
    }

    fn call_edge(
        &self,
        _from: FogId,
        to: EdgeId,
        req: &EdgeRequest,
        data: Option<&[u8]>,
    ) -> Result<(Value, Option<Vec<u8>>)> {
        let ep = self
            .edges
            .read()
            .unwrap()
            .get(&to)
            .cloned()
            .ok_or(Error::EdgeDown(to))?;
        call_edge_at(&ep.addr(), req, data).map_err(|e| match e {
            Error::Transport(_) => Error::EdgeDown(to),
            other => other,
        })
    }

    fn learn_edge(&self, edge: EdgeId, endpoint: &Endpoint) {
        self.edges.write().unwrap().insert(edge, endpoint.clone());
    }

    fn now_ms(&self) -> u64 {
        SystemClock.now_ms()
    }

    fn concurrent(&self) -> bool {
        true
    }
}

/// A running TCP server; dropping the handle does not stop it, call
/// [`ServerHandle::stop`].
pub struct ServerHandle {
    pub addr: Endpoint,
    stop: Arc<AtomicBool>,
    threads: Vec<thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn stop(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the accept loop
        let _ = TcpStream::connect(self.addr.addr());
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }
}

type Handler = Arc<
    dyn Fn(serde_json::Map<String, Value>, Option<Vec<u8>>) -> (u64, Result<(Value, Option<Vec<u8>>)>) + Send + Sync,
>;

fn serve(
    listener: TcpListener,
    handler: Handler,
    extra: Vec<thread::JoinHandle<()>>,
    stop: Arc<AtomicBool>,
) -> Result<ServerHandle> {
    let local = listener.local_addr()?;
    let addr = Endpoint::new(local.ip().to_string(), local.port());
    let flag = stop.clone();
    let accept = thread::spawn(move || {
        for conn in listener.incoming() {
            if flag.load(Ordering::SeqCst) {
                break;
            }
            let Ok(conn) = conn else { continue };
            let h = handler.clone();
            thread::spawn(move || {
                if let Err(e) = serve_conn(conn, h) {
                    log::debug!("connection ended: {e}");
                }
            });
        }
    });
    let mut threads = vec![accept];
    threads.extend(extra);
    Ok(ServerHandle { addr, stop, threads })
}

fn serve_conn(conn: TcpStream, handler: Handler) -> Result<()> {
    let mut r = BufReader::new(conn.try_clone()?);
    let mut w = BufWriter::new(conn);
    while let Some((header, data)) = wire::read_message(&mut r, MAX_PAYLOAD)? {
        let (id, result) = handler(header, data);
        let (value, payload) = match result {
            Ok((v, p)) => (Ok(v), p),
            Err(e) => (Err(e), None),
        };
        wire::write_message(&mut w, wire::response_header(id, &value), payload.as_deref())?;
    }
    Ok(())
}

/// Serve a fog on `listener`, running its heartbeat, failure detection and
/// gossip every `interval`.
pub fn serve_fog(listener: TcpListener, node: Arc<FogNode>, interval: Duration) -> Result<ServerHandle> {
    let n = node.clone();
    let handler: Handler = Arc::new(move |header, data| match wire::parse_request::<FogRequest>(header) {
        Ok((id, req)) => (id, n.handle(req, data)),
        Err(e) => (0, Err(e)),
    });
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let periodic = thread::spawn(move || {
        while !flag.load(Ordering::SeqCst) {
            thread::sleep(interval);
            node.tick(node.now_ms());
            for (to, msg) in node.gossip_out() {
                if let Err(e) = node.send_gossip(to, msg) {
                    log::debug!("gossip to {to} failed: {e}");
                }
            }
        }
    });
    serve(listener, handler, vec![periodic], stop)
}

/// Serve an edge on `listener` and heartbeat to `parent` every interval.
pub fn serve_edge(
    listener: TcpListener,
    node: Arc<EdgeNode>,
    parent: Endpoint,
    interval: Duration,
) -> Result<ServerHandle> {
    let n = node.clone();
    let handler: Handler = Arc::new(move |header, data| match wire::parse_request::<EdgeRequest>(header) {
        Ok((id, req)) => (id, n.handle(req, data)),
        Err(e) => (0, Err(e)),
    });
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let heartbeat = thread::spawn(move || {
        while !flag.load(Ordering::SeqCst) {
            let hb = node.heartbeat_payload();
            match call_fog_at(&parent.addr(), &FogRequest::EdgeHeartbeat(hb), None).and_then(|(v, _)| wire::decode(v)) {
                Ok(ack) => node.ack(ack),
                Err(e) => log::debug!("heartbeat to {} failed: {e}", parent.addr()),
            }
            thread::sleep(interval);
        }
    });
    serve(listener, handler, vec![heartbeat], stop)
}
