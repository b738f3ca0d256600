use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FogId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EdgeId(pub u32);

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StreamId(pub String);

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlockId(pub String);

impl fmt::Display for FogId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "fog{}", self.0)
    }
}

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "edge{}", self.0)
    }
}

impl fmt::Display for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for StreamId {
    fn from(s: &str) -> Self {
        StreamId(s.to_owned())
    }
}

impl From<&str> for BlockId {
    fn from(s: &str) -> Self {
        BlockId(s.to_owned())
    }
}

impl From<String> for StreamId {
    fn from(s: String) -> Self {
        StreamId(s)
    }
}

impl From<String> for BlockId {
    fn from(s: String) -> Self {
        BlockId(s)
    }
}

/// A block is addressed by its stream and its id within the stream.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockRef {
    pub stream_id: StreamId,
    pub block_id: BlockId,
}

impl BlockRef {
    pub fn new(stream_id: impl Into<StreamId>, block_id: impl Into<BlockId>) -> Self {
        BlockRef {
            stream_id: stream_id.into(),
            block_id: block_id.into(),
        }
    }
}

impl fmt::Display for BlockRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.stream_id, self.block_id)
    }
}

/// Reserved property names. Every block carries both; every stream carries
/// `streamId`.
pub const BLOCK_ID_PROP: &str = "blockId";
pub const STREAM_ID_PROP: &str = "streamId";

/// A metadata property value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PropValue {
    Int(i64),
    Float(f64),
    Str(String),
}

impl PropValue {
    /// The string form that is hashed and indexed. Numbers use the shortest
    /// decimal that round-trips, strings are used as-is.
    pub fn canonical(&self) -> String {
        match self {
            PropValue::Int(i) => i.to_string(),
            PropValue::Float(x) => format!("{x}"),
            PropValue::Str(s) => s.clone(),
        }
    }
}

impl From<&str> for PropValue {
    fn from(s: &str) -> Self {
        PropValue::Str(s.to_owned())
    }
}

impl From<String> for PropValue {
    fn from(s: String) -> Self {
        PropValue::Str(s)
    }
}

impl From<i64> for PropValue {
    fn from(i: i64) -> Self {
        PropValue::Int(i)
    }
}

impl From<f64> for PropValue {
    fn from(x: f64) -> Self {
        PropValue::Float(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Property {
    pub name: String,
    pub value: PropValue,
}

impl Property {
    pub fn new(name: impl Into<String>, value: impl Into<PropValue>) -> Self {
        Property {
            name: name.into(),
            value: value.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropKind {
    Static,
    Dynamic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamProperty {
    pub name: String,
    pub value: PropValue,
    pub kind: PropKind,
}

impl StreamProperty {
    pub fn fixed(name: impl Into<String>, value: impl Into<PropValue>) -> Self {
        StreamProperty {
            name: name.into(),
            value: value.into(),
            kind: PropKind::Static,
        }
    }

    pub fn dynamic(name: impl Into<String>, value: impl Into<PropValue>) -> Self {
        StreamProperty {
            name: name.into(),
            value: value.into(),
            kind: PropKind::Dynamic,
        }
    }
}

/// A conjunctive query: canonical (name, value) pairs.
pub type Query = Vec<(String, String)>;

/// Build a query from properties, canonicalizing values.
pub fn query_of(props: &[Property]) -> Query {
    props.iter().map(|p| (p.name.clone(), p.value.canonical())).collect()
}

/// Position of an edge (or a fog's median center) relative to a pair of
/// medians. The first letter is storage, the second reliability: `HL` is
/// high capacity with low reliability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Quadrant {
    HH,
    HL,
    LH,
    LL,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant::HH, Quadrant::HL, Quadrant::LH, Quadrant::LL];

    pub fn from_sides(high_storage: bool, high_reliability: bool) -> Self {
        match (high_storage, high_reliability) {
            (true, true) => Quadrant::HH,
            (true, false) => Quadrant::HL,
            (false, true) => Quadrant::LH,
            (false, false) => Quadrant::LL,
        }
    }

    /// Classify a point against medians; equality resolves to the high side.
    pub fn classify(reliability: f64, storage: f64, r_med: f64, s_med: f64) -> Self {
        Quadrant::from_sides(storage >= s_med, reliability >= r_med)
    }

    pub fn high_storage(self) -> bool {
        matches!(self, Quadrant::HH | Quadrant::HL)
    }

    pub fn high_reliability(self) -> bool {
        matches!(self, Quadrant::HH | Quadrant::LH)
    }

    /// Local quadrants with the opposite reliability half, high storage first.
    pub fn complementary(self) -> [Quadrant; 2] {
        if self.high_reliability() {
            [Quadrant::HL, Quadrant::LL]
        } else {
            [Quadrant::HH, Quadrant::LH]
        }
    }

    /// Local quadrant search order starting at `self`: the preferred hint,
    /// the other quadrant on the same reliability half, then the remaining
    /// two with high storage first.
    pub fn expansion(self) -> [Quadrant; 4] {
        let same_half = Quadrant::from_sides(!self.high_storage(), self.high_reliability());
        let (a, b) = if self.high_reliability() {
            (Quadrant::HL, Quadrant::LL)
        } else {
            (Quadrant::HH, Quadrant::LH)
        };
        [self, same_half, a, b]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Quadrant::HH => "HH",
            Quadrant::HL => "HL",
            Quadrant::LH => "LH",
            Quadrant::LL => "LL",
        }
    }
}

impl fmt::Display for Quadrant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Hex MD5 digest of a payload.
pub fn md5_hex(data: &[u8]) -> String {
    format!("{:x}", md5::compute(data))
}
