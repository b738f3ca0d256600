//! Length-prefixed JSON messages with an optional binary payload frame.
//!
//! Every frame is a 4-byte big-endian length followed by that many bytes.
//! A request header is `{request_id, op, args}`; a response header is
//! `{request_id, status, result | error}`. When a header carries
//! `data_len`, the next frame is the payload, and its md5 travels in the
//! header as `md5`.

use std::io::{ErrorKind, Read, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::bloom::FilterMap;
use crate::edge::EdgeHeartbeat;
use crate::error::{Error, Result};
use crate::fog::{BlockRecord, LeaseToken, Md5Phase, ReplicaBounds, ReplicaLoc, SearchKind, SearchTier};
use crate::stats::PartitionSummary;
use crate::types::{md5_hex, BlockId, BlockRef, FogId, Property, Quadrant, Query, StreamId, StreamProperty};

/// Upper bound on a JSON header frame.
pub const MAX_HEADER_BYTES: usize = 16 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", content = "args", rename_all = "snake_case")]
pub enum FogRequest {
    CreateStream {
        stream_id: StreamId,
        props: Vec<StreamProperty>,
        reliability: f64,
        #[serde(default)]
        bounds: Option<ReplicaBounds>,
    },
    OpenStream {
        stream_id: StreamId,
        client_id: String,
        #[serde(default)]
        duration_ms: Option<u64>,
    },
    RenewLease {
        stream_id: StreamId,
        client_id: String,
        session_key: String,
    },
    PutBlock {
        stream_id: StreamId,
        block_id: BlockId,
        props: Vec<Property>,
        #[serde(default)]
        lease: Option<LeaseToken>,
        #[serde(default)]
        client_is_edge: bool,
    },
    UpdateBlock {
        stream_id: StreamId,
        block_id: BlockId,
        #[serde(default)]
        lease: Option<LeaseToken>,
    },
    FindBlock {
        query: Query,
        #[serde(default)]
        exhaustive: bool,
    },
    FindStream {
        query: Query,
        #[serde(default)]
        exhaustive: bool,
    },
    GetBlock {
        stream_id: StreamId,
        block_id: BlockId,
    },
    GetStreamMeta {
        stream_id: StreamId,
        #[serde(default)]
        latest: bool,
    },
    UpdateStreamMeta {
        stream_id: StreamId,
        props: Vec<Property>,
        version: u64,
    },

    SearchAt {
        kind: SearchKind,
        query: Query,
        tier: SearchTier,
        origin: FogId,
        exhaustive: bool,
    },
    PrepareBlock {
        stream_id: StreamId,
        block_id: BlockId,
        #[serde(default)]
        lease: Option<LeaseToken>,
    },
    AppendBlock {
        record: BlockRecord,
        #[serde(default)]
        lease: Option<LeaseToken>,
    },
    BlockInfo {
        stream_id: StreamId,
        block_id: BlockId,
    },
    SetBlockReplicas {
        stream_id: StreamId,
        block_id: BlockId,
        remove: Vec<ReplicaLoc>,
        add: Vec<ReplicaLoc>,
        reliability_unmet: bool,
    },
    SetBlockMd5 {
        stream_id: StreamId,
        block_id: BlockId,
        md5: String,
        phase: Md5Phase,
        #[serde(default)]
        lease: Option<LeaseToken>,
        #[serde(default)]
        size: Option<u64>,
    },
    StoreReplica {
        block: BlockRef,
        props: Vec<Property>,
        hint: Quadrant,
        #[serde(default)]
        lease: Option<LeaseToken>,
    },
    ReadReplica {
        block: BlockRef,
    },
    OverwriteReplica {
        block: BlockRef,
    },
    EdgeHeartbeat(EdgeHeartbeat),
    FogHeartbeat(FogGossip),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", content = "args", rename_all = "snake_case")]
pub enum EdgeRequest {
    StoreReplica {
        block: BlockRef,
        props: Vec<Property>,
        md5: String,
    },
    OverwriteReplica {
        block: BlockRef,
        md5: String,
    },
    ReadReplica {
        block: BlockRef,
    },
    Stat,
}

/// A fog's summary as known to the overlay, stamped by its origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub fog_id: FogId,
    pub stamp: u64,
    pub summary: Option<PartitionSummary>,
}

/// Fog to fog heartbeat: summaries and Bloom filters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FogGossip {
    pub from: FogId,
    pub summaries: Vec<SummaryRecord>,
    #[serde(with = "crate::pairs")]
    pub filters: std::collections::BTreeMap<FogId, FilterMap>,
}

pub fn write_frame<W: Write>(w: &mut W, bytes: &[u8]) -> Result<()> {
    let len = u32::try_from(bytes.len()).map_err(|_| Error::Protocol(format!("frame of {} bytes", bytes.len())))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

/// Read one frame; `None` on a clean end of stream before the prefix.
pub fn read_frame<R: Read>(r: &mut R, max: usize) -> Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > max {
        return Err(Error::Protocol(format!("frame of {len} bytes exceeds {max}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

/// Write a header, adding `data_len` and `md5` when a payload follows.
pub fn write_message<W: Write>(w: &mut W, mut header: Map<String, Value>, data: Option<&[u8]>) -> Result<()> {
    if let Some(d) = data {
        header.insert("data_len".into(), Value::from(d.len() as u64));
        header.insert("md5".into(), Value::from(md5_hex(d)));
    }
    write_frame(w, &serde_json::to_vec(&header)?)?;
    if let Some(d) = data {
        write_frame(w, d)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a header and its payload frame, checking the declared length and
/// digest.
/// A decoded message: JSON header and optional payload.
pub type Frame = (Map<String, Value>, Option<Vec<u8>>);

/// A decoded reply body and its optional payload.
pub type Reply = (Value, Option<Vec<u8>>);

pub fn read_message<R: Read>(r: &mut R, max_payload: usize) -> Result<Option<Frame>> {
    let Some(head) = read_frame(r, MAX_HEADER_BYTES)? else {
        return Ok(None);
    };
    let header: Map<String, Value> = match serde_json::from_slice(&head)? {
        Value::Object(m) => m,
        _ => return Err(Error::Protocol("header is not a JSON object".into())),
    };
    let data = match header.get("data_len").and_then(Value::as_u64) {
        None => None,
        Some(n) => {
            let d = read_frame(r, max_payload)?.ok_or_else(|| Error::Protocol("missing payload frame".into()))?;
            if d.len() as u64 != n {
                return Err(Error::Protocol(format!(
                    "payload of {} bytes, header declared {n}",
                    d.len()
                )));
            }
            if let Some(m) = header.get("md5").and_then(Value::as_str) {
                if md5_hex(&d) != m {
                    return Err(Error::Integrity("payload digest mismatch".into()));
                }
            }
            Some(d)
        }
    };
    Ok(Some((header, data)))
}

pub fn request_header<T: Serialize>(request_id: u64, body: &T) -> Result<Map<String, Value>> {
    let Value::Object(mut m) = serde_json::to_value(body)? else {
        return Err(Error::Protocol("request body is not an object".into()));
    };
    m.insert("request_id".into(), Value::from(request_id));
    Ok(m)
}

pub fn parse_request<T: DeserializeOwned>(mut header: Map<String, Value>) -> Result<(u64, T)> {
    let id = header
        .get("request_id")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Protocol("missing request_id".into()))?;
    let mut body = Map::new();
    for k in ["op", "args"] {
        if let Some(v) = header.remove(k) {
            body.insert(k.into(), v);
        }
    }
    let req = serde_json::from_value(Value::Object(body)).map_err(|e| Error::Protocol(format!("bad request: {e}")))?;
    Ok((id, req))
}

pub fn response_header(request_id: u64, result: &Result<Value>) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("request_id".into(), Value::from(request_id));
    match result {
        Ok(v) => {
            m.insert("status".into(), Value::from("ok"));
            m.insert("result".into(), v.clone());
        }
        Err(e) => {
            m.insert("status".into(), Value::from("error"));
            m.insert("error".into(), serde_json::to_value(e).unwrap_or(Value::Null));
        }
    }
    m
}

pub fn parse_response(mut header: Map<String, Value>, expect_id: u64) -> Result<Value> {
    let id = header.get("request_id").and_then(Value::as_u64);
    if id != Some(expect_id) {
        return Err(Error::Protocol(format!("response id {id:?}, expected {expect_id}")));
    }
    match header.get("status").and_then(Value::as_str) {
        Some("ok") => Ok(header.remove("result").unwrap_or(Value::Null)),
        Some("error") => {
            let e = header.remove("error").unwrap_or(Value::Null);
            Err(serde_json::from_value(e).map_err(|e| Error::Protocol(format!("bad error: {e}")))?)
        }
        other => Err(Error::Protocol(format!("bad status {other:?}"))),
    }
}

/// Decode a JSON reply into a typed value.
pub fn decode<T: DeserializeOwned>(v: Value) -> Result<T> {
    serde_json::from_value(v).map_err(|e| Error::Protocol(format!("bad reply: {e}")))
}
