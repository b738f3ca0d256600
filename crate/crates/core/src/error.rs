use serde::{Deserialize, Serialize};

use crate::types::{EdgeId, FogId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors surfaced by every layer of the store.
///
/// The enum is serializable so that remote failures cross the wire with
/// their category intact (`{"code": ..., "detail": ...}`).
#[derive(Debug, Clone, PartialEq, thiserror::Error, Serialize, Deserialize)]
#[serde(tag = "code", content = "detail", rename_all = "snake_case")]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("already exists: {0}")]
    AlreadyExists(String),
    #[error("fog {0} has the wrong role for this operation")]
    WrongRole(FogId),
    #[error("partition has no edges")]
    NoEdges,
    #[error("cannot merge filters for `{left}` and `{right}`")]
    InvalidMerge { left: String, right: String },
    #[error("no edge with enough free space")]
    NoCapacity,
    #[error("insufficient capacity: {0}")]
    InsufficientCapacity(String),
    #[error("stream is leased by another client ({holder})")]
    LeaseUnavailable { holder: String },
    #[error("lease lost to another client")]
    LeaseLost,
    #[error("lease is not valid: {0}")]
    LeaseInvalid(String),
    #[error("stale version {passed}, current is {current}")]
    StaleVersion { passed: u64, current: u64 },
    #[error("put failed: {0}")]
    PutFailed(String),
    #[error("update failed on fogs {failed:?}")]
    PartialUpdate { failed: Vec<FogId> },
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("unavailable: {0}")]
    Unavailable(String),
    #[error("edge {0} is not reachable")]
    EdgeDown(EdgeId),
    #[error("no live edges to fail")]
    NothingToFail,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// Short stable name used for failure counters in reports.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid_config",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NotFound(_) => "not_found",
            Error::AlreadyExists(_) => "already_exists",
            Error::WrongRole(_) => "wrong_role",
            Error::NoEdges => "no_edges",
            Error::InvalidMerge { .. } => "invalid_merge",
            Error::NoCapacity => "no_capacity",
            Error::InsufficientCapacity(_) => "insufficient_capacity",
            Error::LeaseUnavailable { .. } => "lease_unavailable",
            Error::LeaseLost => "lease_lost",
            Error::LeaseInvalid(_) => "lease_invalid",
            Error::StaleVersion { .. } => "stale_version",
            Error::PutFailed(_) => "put_failed",
            Error::PartialUpdate { .. } => "partial_update",
            Error::Integrity(_) => "integrity",
            Error::Unavailable(_) => "unavailable",
            Error::EdgeDown(_) => "edge_down",
            Error::NothingToFail => "nothing_to_fail",
            Error::Protocol(_) => "protocol",
            Error::Transport(_) => "transport",
            Error::Io(_) => "io",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Protocol(e.to_string())
    }
}
