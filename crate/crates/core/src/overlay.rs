//! Two-level super-peer overlay of fogs.
//!
//! Fogs are split, in ascending id order, into `b + 1` contiguous groups.
//! The first fog of each group is a buddy; the rest of the group are that
//! buddy's neighbors. Every fog derives the same topology from the same
//! configuration, so no coordination is needed to agree on it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::FogId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoint {
    pub host: String,
    pub port: u16,
}

impl Endpoint {
    pub fn new(host: impl Into<String>, port: u16) -> Self {
        Endpoint {
            host: host.into(),
            port,
        }
    }

    pub fn addr(&self) -> String {
        format!("{}:{}", self.host, self.port)
    }
}

impl Default for Endpoint {
    fn default() -> Self {
        Endpoint::new("127.0.0.1", 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Buddy,
    Neighbor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FogDescriptor {
    pub fog_id: FogId,
    pub address: Endpoint,
    pub role: Role,
    /// The buddy this fog reports to; itself for a buddy.
    pub pool_buddy_id: FogId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteClass {
    SelfFog,
    Neighbor,
    Buddy,
    BuddyNeighbor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlayTopology {
    #[serde(with = "crate::pairs")]
    pub fogs: BTreeMap<FogId, FogDescriptor>,
    pub buddy_set: Vec<FogId>,
    #[serde(with = "crate::pairs")]
    pub neighbor_map: BTreeMap<FogId, Vec<FogId>>,
}

/// Build the overlay for `fog_ids` with `b` buddies per buddy (so `b + 1`
/// buddies in the pool).
pub fn build_overlay(fog_ids: &[FogId], b: usize) -> Result<OverlayTopology> {
    if fog_ids.is_empty() {
        return Err(Error::InvalidConfig("empty fog list".into()));
    }
    let mut ids = fog_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() != fog_ids.len() {
        return Err(Error::InvalidConfig("duplicate fog id".into()));
    }
    let p = ids.len();
    if b >= p {
        return Err(Error::InvalidConfig(format!(
            "buddy count {b} must be below fog count {p}"
        )));
    }
    let groups = b + 1;
    let base = p / groups;
    let extra = p % groups;

    let mut fogs = BTreeMap::new();
    let mut buddy_set = Vec::with_capacity(groups);
    let mut neighbor_map = BTreeMap::new();
    let mut cursor = 0;
    for g in 0..groups {
        let size = base + usize::from(g < extra);
        let group = &ids[cursor..cursor + size];
        cursor += size;
        let buddy = group[0];
        buddy_set.push(buddy);
        fogs.insert(
            buddy,
            FogDescriptor {
                fog_id: buddy,
                address: Endpoint::default(),
                role: Role::Buddy,
                pool_buddy_id: buddy,
            },
        );
        for &n in &group[1..] {
            fogs.insert(
                n,
                FogDescriptor {
                    fog_id: n,
                    address: Endpoint::default(),
                    role: Role::Neighbor,
                    pool_buddy_id: buddy,
                },
            );
        }
        neighbor_map.insert(buddy, group[1..].to_vec());
    }
    Ok(OverlayTopology {
        fogs,
        buddy_set,
        neighbor_map,
    })
}

impl OverlayTopology {
    pub fn fog_ids(&self) -> impl Iterator<Item = FogId> + '_ {
        self.fogs.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.fogs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fogs.is_empty()
    }

    pub fn descriptor(&self, f: FogId) -> Result<&FogDescriptor> {
        self.fogs.get(&f).ok_or_else(|| Error::NotFound(format!("fog {}", f.0)))
    }

    pub fn role(&self, f: FogId) -> Result<Role> {
        Ok(self.descriptor(f)?.role)
    }

    pub fn is_buddy(&self, f: FogId) -> bool {
        matches!(self.fogs.get(&f), Some(d) if d.role == Role::Buddy)
    }

    pub fn pool_buddy(&self, f: FogId) -> Result<FogId> {
        Ok(self.descriptor(f)?.pool_buddy_id)
    }

    pub fn set_endpoint(&mut self, f: FogId, ep: Endpoint) -> Result<()> {
        self.fogs
            .get_mut(&f)
            .ok_or_else(|| Error::NotFound(format!("fog {}", f.0)))?
            .address = ep;
        Ok(())
    }

    fn require_buddy(&self, f: FogId) -> Result<()> {
        match self.role(f)? {
            Role::Buddy => Ok(()),
            Role::Neighbor => Err(Error::WrongRole(f)),
        }
    }

    /// The other buddies of the pool, ascending.
    pub fn buddies_of(&self, f: FogId) -> Result<Vec<FogId>> {
        self.require_buddy(f)?;
        Ok(self.buddy_set.iter().copied().filter(|&b| b != f).collect())
    }

    /// The neighbors attached to buddy `f`, ascending.
    pub fn neighbors_of(&self, f: FogId) -> Result<Vec<FogId>> {
        self.require_buddy(f)?;
        Ok(self.neighbor_map.get(&f).cloned().unwrap_or_default())
    }

    pub fn route_class(&self, from: FogId, to: FogId) -> Result<RouteClass> {
        let pool = self.pool_buddy(from)?;
        self.descriptor(to)?;
        if from == to {
            return Ok(RouteClass::SelfFog);
        }
        if self.neighbor_map[&pool].contains(&to) {
            return Ok(RouteClass::Neighbor);
        }
        if self.buddy_set.contains(&to) {
            return Ok(RouteClass::Buddy);
        }
        Ok(RouteClass::BuddyNeighbor)
    }
}
