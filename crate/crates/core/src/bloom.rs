//! Federated metadata index: exact per-partition indexes plus fixed-width
//! Bloom filters at the local, neighbor and buddy tiers.
//!
//! Every filter is 160 bits wide. A value sets up to five bits, taken from
//! the first five big-endian 16-bit words of its SHA-1 digest, each reduced
//! modulo 160. Filters of the same property therefore merge by plain OR.

use std::collections::{BTreeMap, BTreeSet};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

use crate::error::{Error, Result};
use crate::types::{BlockRef, EdgeId, FogId, StreamId, BLOCK_ID_PROP, STREAM_ID_PROP};

pub const FILTER_BITS: usize = 160;
pub const FILTER_BYTES: usize = FILTER_BITS / 8;
pub const HASH_POSITIONS: usize = 5;

/// A 160-bit mask. Bit `p` lives in byte `p / 8` at position `p % 8`
/// (least significant bit first).
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Mask160(pub [u8; FILTER_BYTES]);

impl Mask160 {
    pub fn set(&mut self, pos: usize) {
        self.0[pos / 8] |= 1 << (pos % 8);
    }

    pub fn get(&self, pos: usize) -> bool {
        self.0[pos / 8] & (1 << (pos % 8)) != 0
    }

    pub fn count_ones(&self) -> u32 {
        self.0.iter().map(|b| b.count_ones()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().all(|&b| b == 0)
    }

    pub fn or(&self, other: &Mask160) -> Mask160 {
        let mut out = *self;
        out.or_assign(other);
        out
    }

    pub fn or_assign(&mut self, other: &Mask160) {
        for (a, b) in self.0.iter_mut().zip(other.0.iter()) {
            *a |= b;
        }
    }

    /// True when every bit of `mask` is also set here.
    pub fn covers(&self, mask: &Mask160) -> bool {
        self.0.iter().zip(mask.0.iter()).all(|(a, m)| a & m == *m)
    }

    pub fn to_base64(&self) -> String {
        B64.encode(self.0)
    }

    pub fn from_base64(s: &str) -> Result<Self> {
        let raw = B64
            .decode(s)
            .map_err(|e| Error::Protocol(format!("bad filter payload: {e}")))?;
        let bytes: [u8; FILTER_BYTES] = raw.try_into().map_err(|v: Vec<u8>| {
            Error::Protocol(format!("filter payload is {} bytes, want {FILTER_BYTES}", v.len()))
        })?;
        Ok(Mask160(bytes))
    }
}

impl std::fmt::Debug for Mask160 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Mask160({} bits)", self.count_ones())
    }
}

impl Serialize for Mask160 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_base64())
    }
}

impl<'de> Deserialize<'de> for Mask160 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Mask160::from_base64(&s).map_err(serde::de::Error::custom)
    }
}

/// Bit positions set for a canonical value string.
pub fn hash_positions(v: &str) -> [usize; HASH_POSITIONS] {
    let digest = Sha1::digest(v.as_bytes());
    let mut out = [0usize; HASH_POSITIONS];
    for (i, slot) in out.iter_mut().enumerate() {
        let word = u16::from_be_bytes([digest[2 * i], digest[2 * i + 1]]);
        *slot = word as usize % FILTER_BITS;
    }
    out
}

pub fn hash_value(v: &str) -> Mask160 {
    let mut m = Mask160::default();
    for p in hash_positions(v) {
        m.set(p);
    }
    m
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropertyBloomFilter {
    pub property_name: String,
    pub bits: Mask160,
    pub insert_count: u64,
}

impl PropertyBloomFilter {
    pub fn new(property_name: impl Into<String>) -> Self {
        PropertyBloomFilter {
            property_name: property_name.into(),
            bits: Mask160::default(),
            insert_count: 0,
        }
    }

    pub fn insert(&mut self, v: &str) {
        self.bits.or_assign(&hash_value(v));
        self.insert_count += 1;
    }

    pub fn may_contain(&self, v: &str) -> bool {
        self.bits.covers(&hash_value(v))
    }
}

/// OR together a fog's local filter and its neighbors' local filters into
/// the recursive filter it advertises to its buddies.
pub fn merge_buddy_filter(
    local: &PropertyBloomFilter,
    neighbor_filters: &[PropertyBloomFilter],
) -> Result<PropertyBloomFilter> {
    let mut out = local.clone();
    for f in neighbor_filters {
        if f.property_name != out.property_name {
            return Err(Error::InvalidMerge {
                left: out.property_name.clone(),
                right: f.property_name.clone(),
            });
        }
        out.bits.or_assign(&f.bits);
        out.insert_count += f.insert_count;
    }
    Ok(out)
}

/// Filters for one fog, keyed by property name.
pub type FilterMap = BTreeMap<String, PropertyBloomFilter>;

fn map_passes(filters: &FilterMap, query: &[(String, String)]) -> bool {
    !query.is_empty()
        && query
            .iter()
            .all(|(name, value)| filters.get(name).is_some_and(|f| f.may_contain(value)))
}

/// Merge two filter maps property by property.
pub fn merge_maps(into: &mut FilterMap, other: &FilterMap) {
    for (name, f) in other {
        match into.get_mut(name) {
            Some(existing) => {
                existing.bits.or_assign(&f.bits);
                existing.insert_count += f.insert_count;
            }
            None => {
                into.insert(name.clone(), f.clone());
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterSet {
    pub local: FilterMap,
    /// Local filters of the fogs attached to this one.
    #[serde(with = "crate::pairs")]
    pub neighbor: BTreeMap<FogId, FilterMap>,
    /// Recursive filters (buddy plus its neighbors) of other buddies.
    #[serde(with = "crate::pairs")]
    pub buddy: BTreeMap<FogId, FilterMap>,
}

impl FilterSet {
    pub fn insert_local(&mut self, name: &str, value: &str) {
        self.local
            .entry(name.to_owned())
            .or_insert_with(|| PropertyBloomFilter::new(name))
            .insert(value);
    }

    /// This fog's local filters merged with all of its neighbors' filters.
    pub fn recursive(&self) -> FilterMap {
        let mut out = self.local.clone();
        for m in self.neighbor.values() {
            merge_maps(&mut out, m);
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchPlan {
    pub local_hit: bool,
    pub candidate_neighbors: BTreeSet<FogId>,
    pub candidate_buddies: BTreeSet<FogId>,
}

pub fn plan_search(fs: &FilterSet, query: &[(String, String)]) -> SearchPlan {
    SearchPlan {
        local_hit: map_passes(&fs.local, query),
        candidate_neighbors: fs
            .neighbor
            .iter()
            .filter(|(_, m)| map_passes(m, query))
            .map(|(id, _)| *id)
            .collect(),
        candidate_buddies: fs
            .buddy
            .iter()
            .filter(|(_, m)| map_passes(m, query))
            .map(|(id, _)| *id)
            .collect(),
    }
}

type ValueMap<T> = BTreeMap<String, BTreeMap<String, BTreeSet<T>>>;

/// Exact index of the blocks hosted and the streams owned in one partition.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PartitionIndex {
    pub entries: ValueMap<(EdgeId, BlockRef)>,
    pub stream_entries: ValueMap<StreamId>,
}

fn intersect<T: Ord + Clone>(map: &ValueMap<T>, query: &[(String, String)]) -> BTreeSet<T> {
    let mut acc: Option<BTreeSet<T>> = None;
    for (name, value) in query {
        let Some(set) = map.get(name).and_then(|vals| vals.get(value)) else {
            return BTreeSet::new();
        };
        acc = Some(match acc {
            None => set.clone(),
            Some(a) => a.intersection(set).cloned().collect(),
        });
        if acc.as_ref().is_some_and(BTreeSet::is_empty) {
            break;
        }
    }
    acc.unwrap_or_default()
}

impl PartitionIndex {
    /// Record `block` on `edge` under every (name, canonical value) pair.
    /// The reserved `blockId` and `streamId` properties are always added.
    /// Returns the pairs indexed, for the caller to feed to Bloom filters.
    pub fn index_block(&mut self, edge: EdgeId, block: &BlockRef, props: &[(String, String)]) -> Vec<(String, String)> {
        let pairs = with_reserved(
            props,
            &[
                (BLOCK_ID_PROP, block.block_id.0.as_str()),
                (STREAM_ID_PROP, block.stream_id.0.as_str()),
            ],
        );
        for (name, value) in &pairs {
            self.entries
                .entry(name.clone())
                .or_default()
                .entry(value.clone())
                .or_default()
                .insert((edge, block.clone()));
        }
        pairs
    }

    pub fn index_stream(&mut self, stream: &StreamId, props: &[(String, String)]) -> Vec<(String, String)> {
        let pairs = with_reserved(props, &[(STREAM_ID_PROP, stream.0.as_str())]);
        for (name, value) in &pairs {
            self.stream_entries
                .entry(name.clone())
                .or_default()
                .entry(value.clone())
                .or_default()
                .insert(stream.clone());
        }
        pairs
    }

    pub fn lookup(&self, query: &[(String, String)]) -> BTreeSet<(EdgeId, BlockRef)> {
        intersect(&self.entries, query)
    }

    pub fn lookup_streams(&self, query: &[(String, String)]) -> BTreeSet<StreamId> {
        intersect(&self.stream_entries, query)
    }

    /// Drop every entry for `edge`; returns the blocks it hosted.
    pub fn remove_edge(&mut self, edge: EdgeId) -> BTreeSet<BlockRef> {
        let mut removed = BTreeSet::new();
        for vals in self.entries.values_mut() {
            for set in vals.values_mut() {
                set.retain(|(e, b)| {
                    if *e == edge {
                        removed.insert(b.clone());
                        false
                    } else {
                        true
                    }
                });
            }
            vals.retain(|_, s| !s.is_empty());
        }
        self.entries.retain(|_, v| !v.is_empty());
        removed
    }

    /// All (edge, block) pairs present in the index.
    pub fn hosted_pairs(&self) -> BTreeSet<(EdgeId, BlockRef)> {
        self.entries
            .get(BLOCK_ID_PROP)
            .map(|vals| vals.values().flatten().cloned().collect())
            .unwrap_or_default()
    }
}

fn with_reserved(props: &[(String, String)], reserved: &[(&str, &str)]) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = reserved.iter().map(|(n, v)| (n.to_string(), v.to_string())).collect();
    for (n, v) in props {
        if !reserved.iter().any(|(r, _)| r == n) {
            out.push((n.clone(), v.clone()));
        }
    }
    out
}
