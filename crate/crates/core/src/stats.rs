//! Approximate reliability and capacity statistics.
//!
//! Each fog condenses its edges into a [`PartitionSummary`]. Every fog then
//! rebuilds the same [`GlobalMatrix`] from the set of summaries it has heard
//! about: equi-width histograms of both dimensions, interpolated global
//! medians, and per-fog edge counts split across the four global quadrants
//! by area overlap.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{EdgeId, FogId, Quadrant};

pub const DEFAULT_BUCKETS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeStat {
    pub edge_id: EdgeId,
    pub reliability: f64,
    pub free_storage: u64,
}

impl EdgeStat {
    pub fn new(edge_id: EdgeId, reliability: f64, free_storage: u64) -> Self {
        EdgeStat {
            edge_id,
            reliability,
            free_storage,
        }
    }
}

/// The 10-tuple a fog publishes about its partition, plus its id and edge
/// total. Quadrant counts follow the storage-first naming of [`Quadrant`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub fog_id: FogId,
    pub r_min: f64,
    pub r_med: f64,
    pub r_max: f64,
    pub s_min: f64,
    pub s_med: f64,
    pub s_max: f64,
    /// high reliability, high storage
    pub c_q1: u32,
    /// high reliability, low storage
    pub c_q2: u32,
    /// low reliability, low storage
    pub c_q3: u32,
    /// low reliability, high storage
    pub c_q4: u32,
    pub edge_total: u32,
}

impl PartitionSummary {
    pub fn count(&self, q: Quadrant) -> u32 {
        match q {
            Quadrant::HH => self.c_q1,
            Quadrant::LH => self.c_q2,
            Quadrant::LL => self.c_q3,
            Quadrant::HL => self.c_q4,
        }
    }

    /// Reliability interval of the local quadrant's half.
    pub fn reliability_span(&self, q: Quadrant) -> (f64, f64) {
        if q.high_reliability() {
            (self.r_med, self.r_max)
        } else {
            (self.r_min, self.r_med)
        }
    }

    pub fn storage_span(&self, q: Quadrant) -> (f64, f64) {
        if q.high_storage() {
            (self.s_med, self.s_max)
        } else {
            (self.s_min, self.s_med)
        }
    }
}

/// Median used throughout: the element at index `n / 2` of the sorted
/// values (the upper median for even counts).
pub fn median_of(sorted: &[f64]) -> f64 {
    sorted[sorted.len() / 2]
}

pub fn summarize_partition(fog_id: FogId, stats: &[EdgeStat]) -> Result<PartitionSummary> {
    if stats.is_empty() {
        return Err(Error::NoEdges);
    }
    let mut rs: Vec<f64> = stats.iter().map(|e| e.reliability).collect();
    let mut ss: Vec<f64> = stats.iter().map(|e| e.free_storage as f64).collect();
    rs.sort_by(f64::total_cmp);
    ss.sort_by(f64::total_cmp);
    let r_med = median_of(&rs);
    let s_med = median_of(&ss);
    let mut c = [0u32; 4];
    for e in stats {
        let q = Quadrant::classify(e.reliability, e.free_storage as f64, r_med, s_med);
        let slot = match q {
            Quadrant::HH => 0,
            Quadrant::LH => 1,
            Quadrant::LL => 2,
            Quadrant::HL => 3,
        };
        c[slot] += 1;
    }
    Ok(PartitionSummary {
        fog_id,
        r_min: rs[0],
        r_med,
        r_max: rs[rs.len() - 1],
        s_min: ss[0],
        s_med,
        s_max: ss[ss.len() - 1],
        c_q1: c[0],
        c_q2: c[1],
        c_q3: c[2],
        c_q4: c[3],
        edge_total: stats.len() as u32,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalMatrix {
    pub r_min_g: f64,
    pub r_max_g: f64,
    pub r_med_g: f64,
    pub s_min_g: f64,
    pub s_max_g: f64,
    pub s_med_g: f64,
    pub quadrant_counts: BTreeMap<Quadrant, f64>,
    #[serde(with = "crate::pairs")]
    pub fog_class: BTreeMap<FogId, Quadrant>,
    #[serde(with = "crate::pairs")]
    pub per_fog_overlap: BTreeMap<FogId, BTreeMap<Quadrant, f64>>,
    pub bucket_count: usize,
    pub storage_buckets: Vec<f64>,
    pub reliability_buckets: Vec<f64>,
}

struct Axis {
    lo: f64,
    width: f64,
    k: usize,
}

impl Axis {
    fn new(lo: f64, hi: f64, k: usize) -> Self {
        Axis {
            lo,
            width: (hi - lo) / k as f64,
            k,
        }
    }

    fn bucket_of(&self, x: f64) -> usize {
        if self.width <= 0.0 {
            return 0;
        }
        let i = ((x - self.lo) / self.width).floor();
        (i.max(0.0) as usize).min(self.k - 1)
    }

    /// Spread `mass` uniformly over `[a, b]`; a zero-width interval lands
    /// in the bucket containing `a`.
    fn spread(&self, hist: &mut [f64], a: f64, b: f64, mass: f64) {
        if mass == 0.0 {
            return;
        }
        if b <= a || self.width <= 0.0 {
            hist[self.bucket_of(a)] += mass;
            return;
        }
        let first = self.bucket_of(a);
        let last = self.bucket_of(b);
        for (i, slot) in hist.iter_mut().enumerate().take(last + 1).skip(first) {
            let lo = self.lo + self.width * i as f64;
            let hi = lo + self.width;
            let overlap = b.min(hi) - a.max(lo);
            if overlap > 0.0 {
                *slot += mass * overlap / (b - a);
            }
        }
    }

    /// Value where cumulative mass reaches half of the total, linearly
    /// interpolated inside the crossing bucket.
    fn median(&self, hist: &[f64]) -> f64 {
        if self.width <= 0.0 {
            return self.lo;
        }
        let total: f64 = hist.iter().sum();
        let half = total / 2.0;
        let mut cum = 0.0;
        for (i, &m) in hist.iter().enumerate() {
            if m > 0.0 && cum + m >= half {
                let frac = ((half - cum) / m).clamp(0.0, 1.0);
                return self.lo + self.width * (i as f64 + frac);
            }
            cum += m;
        }
        self.lo + self.width * self.k as f64
    }
}

/// Fraction of the interval `[lo, hi]` at or above `split`.
fn fraction_above(lo: f64, hi: f64, split: f64) -> f64 {
    if hi > lo {
        ((hi - lo.max(split)) / (hi - lo)).clamp(0.0, 1.0)
    } else if lo >= split {
        1.0
    } else {
        0.0
    }
}

pub fn build_global_matrix(summaries: &[PartitionSummary], k: usize) -> Result<GlobalMatrix> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("bucket count {k} must be at least 2")));
    }
    if summaries.is_empty() {
        return Err(Error::NoEdges);
    }
    let mut sorted: Vec<&PartitionSummary> = summaries.iter().collect();
    sorted.sort_by_key(|s| s.fog_id);

    let fold =
        |f: fn(&PartitionSummary) -> f64, pick: fn(f64, f64) -> f64| sorted.iter().map(|s| f(s)).reduce(pick).unwrap();
    let r_min_g = fold(|s| s.r_min, f64::min);
    let r_max_g = fold(|s| s.r_max, f64::max);
    let s_min_g = fold(|s| s.s_min, f64::min);
    let s_max_g = fold(|s| s.s_max, f64::max);

    let s_axis = Axis::new(s_min_g, s_max_g, k);
    let r_axis = Axis::new(r_min_g, r_max_g, k);
    let mut storage_buckets = vec![0.0; k];
    let mut reliability_buckets = vec![0.0; k];
    for s in &sorted {
        let low_s = f64::from(s.c_q2 + s.c_q3);
        let high_s = f64::from(s.c_q1 + s.c_q4);
        s_axis.spread(&mut storage_buckets, s.s_min, s.s_med, low_s);
        s_axis.spread(&mut storage_buckets, s.s_med, s.s_max, high_s);
        let low_r = f64::from(s.c_q3 + s.c_q4);
        let high_r = f64::from(s.c_q1 + s.c_q2);
        r_axis.spread(&mut reliability_buckets, s.r_min, s.r_med, low_r);
        r_axis.spread(&mut reliability_buckets, s.r_med, s.r_max, high_r);
    }
    let s_med_g = s_axis.median(&storage_buckets);
    let r_med_g = r_axis.median(&reliability_buckets);

    let mut quadrant_counts: BTreeMap<Quadrant, f64> = Quadrant::ALL.iter().map(|&q| (q, 0.0)).collect();
    let mut per_fog_overlap = BTreeMap::new();
    let mut fog_class = BTreeMap::new();
    for s in &sorted {
        let mut overlap: BTreeMap<Quadrant, f64> = Quadrant::ALL.iter().map(|&q| (q, 0.0)).collect();
        for local in Quadrant::ALL {
            let c = f64::from(s.count(local));
            if c == 0.0 {
                continue;
            }
            let (slo, shi) = s.storage_span(local);
            let (rlo, rhi) = s.reliability_span(local);
            let hs = fraction_above(slo, shi, s_med_g);
            let hr = fraction_above(rlo, rhi, r_med_g);
            for (g, w) in [
                (Quadrant::HH, hs * hr),
                (Quadrant::HL, hs * (1.0 - hr)),
                (Quadrant::LH, (1.0 - hs) * hr),
                (Quadrant::LL, (1.0 - hs) * (1.0 - hr)),
            ] {
                *overlap.get_mut(&g).unwrap() += c * w;
            }
        }
        for (q, v) in &overlap {
            *quadrant_counts.get_mut(q).unwrap() += v;
        }
        per_fog_overlap.insert(s.fog_id, overlap);
        fog_class.insert(s.fog_id, Quadrant::classify(s.r_med, s.s_med, r_med_g, s_med_g));
    }

    Ok(GlobalMatrix {
        r_min_g,
        r_max_g,
        r_med_g,
        s_min_g,
        s_max_g,
        s_med_g,
        quadrant_counts,
        fog_class,
        per_fog_overlap,
        bucket_count: k,
        storage_buckets,
        reliability_buckets,
    })
}

pub fn classify_fog(summary: &PartitionSummary, g: &GlobalMatrix) -> Quadrant {
    Quadrant::classify(summary.r_med, summary.s_med, g.r_med_g, g.s_med_g)
}

impl GlobalMatrix {
    pub fn total_edges(&self) -> f64 {
        self.quadrant_counts.values().sum()
    }

    pub fn storage_bucket_width(&self) -> f64 {
        (self.s_max_g - self.s_min_g) / self.bucket_count as f64
    }

    pub fn reliability_bucket_width(&self) -> f64 {
        (self.r_max_g - self.r_min_g) / self.bucket_count as f64
    }

    /// Fogs classified into `q`, ascending id.
    pub fn fogs_in(&self, q: Quadrant) -> Vec<FogId> {
        self.fog_class
            .iter()
            .filter(|(_, &c)| c == q)
            .map(|(&f, _)| f)
            .collect()
    }
}
