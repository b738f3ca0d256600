//! Differential replica placement.
//!
//! A block of stream reliability `r` needs replicas on edges whose failure
//! probabilities multiply to at most `1 - r`. The planner only sees
//! partition summaries, so it credits each chosen fog with a conservative
//! reliability: the fog's minimum for a low-reliability local quadrant and
//! its median for a high-reliability one.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{EdgeStat, GlobalMatrix, PartitionSummary};
use crate::types::{EdgeId, FogId, Quadrant};

/// Slack for floating point when comparing failure products.
const EPS: f64 = 1e-12;

/// Global quadrant and preferred local quadrant, in visiting order. High
/// capacity fogs come first, alternating high and low reliability, each
/// paired with a local quadrant on the opposite reliability half.
pub const QUADRANT_SEQUENCE: [(Quadrant, Quadrant); 8] = [
    (Quadrant::HH, Quadrant::HL),
    (Quadrant::HL, Quadrant::HH),
    (Quadrant::HH, Quadrant::LL),
    (Quadrant::HL, Quadrant::LH),
    (Quadrant::LH, Quadrant::HL),
    (Quadrant::LL, Quadrant::HH),
    (Quadrant::LH, Quadrant::LL),
    (Quadrant::LL, Quadrant::LH),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaRequirement {
    pub block_size: u64,
    pub target_reliability: f64,
    pub min_replicas: usize,
    pub max_replicas: usize,
    pub client_fog: Option<FogId>,
    pub client_is_edge: bool,
}

impl ReplicaRequirement {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_reliability > 0.0 && self.target_reliability < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "target reliability {} outside (0, 1)",
                self.target_reliability
            )));
        }
        if self.min_replicas == 0 || self.min_replicas > self.max_replicas {
            return Err(Error::InvalidArgument(format!(
                "replica bounds [{}, {}]",
                self.min_replicas, self.max_replicas
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaChoice {
    pub fog_id: FogId,
    pub hint: Quadrant,
    pub contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaPlan {
    pub choices: Vec<ReplicaChoice>,
    pub achieved_reliability_bound: f64,
    pub reliability_unmet: bool,
    /// Set when some fog was chosen twice because no unused fog had room.
    pub reused_fog: bool,
}

impl ReplicaPlan {
    pub fn replica_count(&self) -> usize {
        self.choices.len()
    }
}

pub fn failure_product(reliabilities: impl IntoIterator<Item = f64>) -> f64 {
    reliabilities.into_iter().map(|r| 1.0 - r).product()
}

pub fn reliability_satisfied(target: f64, edge_reliabilities: &[f64]) -> bool {
    if edge_reliabilities.is_empty() {
        return false;
    }
    1.0 - target + EPS >= failure_product(edge_reliabilities.iter().copied())
}

pub fn contribution_of(summary: &PartitionSummary, q: Quadrant) -> Result<f64> {
    if summary.count(q) == 0 {
        return Err(Error::NoEdges);
    }
    Ok(if q.high_reliability() {
        summary.r_med
    } else {
        summary.r_min
    })
}

fn first_nonempty(summary: &PartitionSummary, preferred: Quadrant) -> Option<Quadrant> {
    preferred.expansion().into_iter().find(|&q| summary.count(q) > 0)
}

pub fn choose_replica_fogs(
    g: &GlobalMatrix,
    summaries: &BTreeMap<FogId, PartitionSummary>,
    req: &ReplicaRequirement,
    rng_seed: u64,
) -> Result<ReplicaPlan> {
    req.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let fits = |f: &FogId| summaries.get(f).is_some_and(|s| s.s_max >= req.block_size as f64);

    let mut choices: Vec<ReplicaChoice> = Vec::new();
    let mut uses: BTreeMap<FogId, u32> = BTreeMap::new();
    let mut product = 1.0;
    let mut reused = false;

    let push = |fog: FogId,
                hint: Quadrant,
                choices: &mut Vec<ReplicaChoice>,
                uses: &mut BTreeMap<FogId, u32>,
                product: &mut f64| {
        let c = contribution_of(&summaries[&fog], hint).expect("hint is non-empty");
        *product *= 1.0 - c;
        *uses.entry(fog).or_default() += 1;
        choices.push(ReplicaChoice {
            fog_id: fog,
            hint,
            contribution: c,
        });
    };

    if req.client_is_edge {
        if let Some(local) = req.client_fog.filter(|f| fits(f) && g.fog_class.contains_key(f)) {
            let class = g.fog_class[&local];
            if let Some(hint) = first_nonempty(&summaries[&local], class.complementary()[0]) {
                push(local, hint, &mut choices, &mut uses, &mut product);
            }
        }
    }

    let target_failure = 1.0 - req.target_reliability + EPS;
    let done = |choices: &Vec<ReplicaChoice>, product: f64| {
        let q = choices.len();
        q >= req.max_replicas || (q >= req.min_replicas && product <= target_failure)
    };

    let mut reuse_mode = false;
    'outer: while !done(&choices, product) {
        let mut progress = false;
        for (global, hint) in QUADRANT_SEQUENCE {
            if done(&choices, product) {
                break 'outer;
            }
            let candidates: Vec<FogId> = g
                .fogs_in(global)
                .into_iter()
                .filter(|f| fits(f))
                .filter(|f| {
                    let used = uses.get(f).copied().unwrap_or(0);
                    if reuse_mode {
                        used < summaries[f].edge_total
                    } else {
                        used == 0
                    }
                })
                .collect();
            if candidates.is_empty() {
                continue;
            }
            let fog = candidates[rng.gen_range(0..candidates.len())];
            let Some(local) = first_nonempty(&summaries[&fog], hint) else {
                continue;
            };
            if reuse_mode && uses.contains_key(&fog) {
                reused = true;
            }
            push(fog, local, &mut choices, &mut uses, &mut product);
            progress = true;
        }
        if !progress {
            if reuse_mode {
                break;
            }
            reuse_mode = true;
        }
    }

    if choices.len() < req.min_replicas {
        return Err(Error::InsufficientCapacity(format!(
            "only {} of {} replicas placeable for {} bytes",
            choices.len(),
            req.min_replicas,
            req.block_size
        )));
    }
    Ok(ReplicaPlan {
        reliability_unmet: product > target_failure,
        achieved_reliability_bound: 1.0 - product,
        choices,
        reused_fog: reused,
    })
}

pub fn choose_edge_in_fog(
    stats: &[EdgeStat],
    summary: &PartitionSummary,
    hint: Quadrant,
    block_size: u64,
) -> Result<EdgeId> {
    choose_edge_excluding(stats, summary, hint, block_size, &BTreeSet::new())
}

/// Least reliable edge with room in the hinted local quadrant. When that
/// quadrant has none, the other edges are tried least reliable first,
/// preferring those at least as reliable as the hint's credited value.
pub fn choose_edge_excluding(
    stats: &[EdgeStat],
    summary: &PartitionSummary,
    hint: Quadrant,
    block_size: u64,
    exclude: &BTreeSet<EdgeId>,
) -> Result<EdgeId> {
    let least = |it: &mut dyn Iterator<Item = &EdgeStat>| {
        it.min_by(|a, b| a.reliability.total_cmp(&b.reliability).then(a.edge_id.cmp(&b.edge_id)))
            .map(|e| e.edge_id)
    };
    let room: Vec<&EdgeStat> = stats
        .iter()
        .filter(|e| e.free_storage >= block_size && !exclude.contains(&e.edge_id))
        .collect();
    let in_hint =
        |e: &&&EdgeStat| Quadrant::classify(e.reliability, e.free_storage as f64, summary.r_med, summary.s_med) == hint;
    if let Some(id) = least(&mut room.iter().filter(in_hint).copied()) {
        return Ok(id);
    }
    let floor = if hint.high_reliability() {
        summary.r_med
    } else {
        summary.r_min
    };
    least(&mut room.iter().filter(|e| e.reliability >= floor).copied())
        .or_else(|| least(&mut room.iter().copied()))
        .ok_or(Error::NoCapacity)
}

pub fn choose_recovery_fog(
    g: &GlobalMatrix,
    summaries: &BTreeMap<FogId, PartitionSummary>,
    failed_edge_reliability: f64,
    block_size: u64,
    exclude: &BTreeSet<FogId>,
) -> Result<(FogId, Quadrant)> {
    let mut best: Option<(f64, FogId, Quadrant)> = None;
    for (fog, s) in summaries {
        if exclude.contains(fog) || !g.fog_class.contains_key(fog) || s.s_max < block_size as f64 {
            continue;
        }
        for q in Quadrant::ALL {
            let Ok(c) = contribution_of(s, q) else { continue };
            let d = (c - failed_edge_reliability).abs();
            if best.as_ref().is_none_or(|(bd, _, _)| d < *bd) {
                best = Some((d, *fog, q));
            }
        }
    }
    best.map(|(_, f, q)| (f, q))
        .ok_or_else(|| Error::InsufficientCapacity(format!("no recovery target for {block_size} bytes")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{build_global_matrix, summarize_partition};

    fn summary(fog: u32, r_min: f64, r_med: f64, counts: [u32; 4]) -> PartitionSummary {
        PartitionSummary {
            fog_id: FogId(fog),
            r_min,
            r_med,
            r_max: r_med + 0.02,
            s_min: 1e9,
            s_med: 2e9,
            s_max: 3e9,
            c_q1: counts[0],
            c_q2: counts[1],
            c_q3: counts[2],
            c_q4: counts[3],
            edge_total: counts.iter().sum(),
        }
    }

    #[test]
    fn reliability_examples() {
        assert!(reliability_satisfied(0.999, &[0.80, 0.91, 0.95]));
        assert!(reliability_satisfied(0.999, &[0.95, 0.99]));
        assert!(!reliability_satisfied(0.999, &[0.80, 0.91]));
        assert!(!reliability_satisfied(0.5, &[]));
    }

    #[test]
    fn contribution_rule() {
        let s = summary(1, 0.8, 0.9, [1, 1, 1, 1]);
        assert_eq!(contribution_of(&s, Quadrant::LL).unwrap(), 0.8);
        assert_eq!(contribution_of(&s, Quadrant::HL).unwrap(), 0.8);
        assert_eq!(contribution_of(&s, Quadrant::HH).unwrap(), 0.9);
        assert_eq!(contribution_of(&s, Quadrant::LH).unwrap(), 0.9);
        let one = summarize_partition(FogId(2), &[EdgeStat::new(EdgeId(1), 0.7, 10)]).unwrap();
        assert_eq!(contribution_of(&one, Quadrant::HH).unwrap(), one.r_min);
        assert_eq!(contribution_of(&one, Quadrant::LL), Err(Error::NoEdges));
    }

    #[test]
    fn edge_choice_least_reliable_in_hint() {
        let stats = vec![
            EdgeStat::new(EdgeId(1), 0.85, 100),
            EdgeStat::new(EdgeId(2), 0.88, 100),
            EdgeStat::new(EdgeId(3), 0.95, 500),
            EdgeStat::new(EdgeId(4), 0.97, 500),
        ];
        let s = summarize_partition(FogId(1), &stats).unwrap();
        assert_eq!(choose_edge_in_fog(&stats, &s, Quadrant::LL, 10).unwrap(), EdgeId(1));
        assert_eq!(choose_edge_in_fog(&stats, &s, Quadrant::HH, 10).unwrap(), EdgeId(3));
        // LH is empty here: fallback keeps at least the median reliability.
        assert_eq!(choose_edge_in_fog(&stats, &s, Quadrant::LH, 10).unwrap(), EdgeId(3));
        assert_eq!(choose_edge_in_fog(&stats, &s, Quadrant::LL, 200).unwrap(), EdgeId(3));
        assert_eq!(
            choose_edge_in_fog(&stats, &s, Quadrant::LL, 1000),
            Err(Error::NoCapacity)
        );
    }

    #[test]
    fn recovery_nearest_contribution() {
        let mut sums = BTreeMap::new();
        sums.insert(FogId(1), summary(1, 0.80, 0.80, [0, 0, 1, 0]));
        sums.insert(FogId(2), summary(2, 0.86, 0.86, [0, 0, 1, 0]));
        sums.insert(FogId(3), summary(3, 0.95, 0.95, [0, 0, 1, 0]));
        let list: Vec<PartitionSummary> = sums.values().cloned().collect();
        let g = build_global_matrix(&list, 16).unwrap();
        let none = BTreeSet::new();
        assert_eq!(choose_recovery_fog(&g, &sums, 0.85, 10, &none).unwrap().0, FogId(2));
        let only3: BTreeSet<FogId> = [FogId(1), FogId(2)].into();
        assert_eq!(choose_recovery_fog(&g, &sums, 0.85, 10, &only3).unwrap().0, FogId(3));
        let all: BTreeSet<FogId> = [FogId(1), FogId(2), FogId(3)].into();
        assert!(matches!(
            choose_recovery_fog(&g, &sums, 0.85, 10, &all),
            Err(Error::InsufficientCapacity(_))
        ));
    }

    #[test]
    fn two_fog_hand_computed_plan() {
        // Fog 1: r_min .90 r_med .95; fog 2: r_min .80 r_med .85.
        let mut sums = BTreeMap::new();
        sums.insert(FogId(1), summary(1, 0.90, 0.95, [1, 1, 1, 1]));
        sums.insert(FogId(2), summary(2, 0.80, 0.85, [1, 1, 1, 1]));
        let list: Vec<PartitionSummary> = sums.values().cloned().collect();
        let g = build_global_matrix(&list, 16).unwrap();
        let req = ReplicaRequirement {
            block_size: 10,
            target_reliability: 0.97,
            min_replicas: 1,
            max_replicas: 4,
            client_fog: None,
            client_is_edge: false,
        };
        let plan = choose_replica_fogs(&g, &sums, &req, 7).unwrap();
        let hand: f64 = plan
            .choices
            .iter()
            .map(|c| {
                let s = &sums[&c.fog_id];
                1.0 - if c.hint.high_reliability() { s.r_med } else { s.r_min }
            })
            .product();
        assert!((1.0 - plan.achieved_reliability_bound - hand).abs() < 1e-12);
        // every shorter prefix respecting the minimum fails the target
        for k in req.min_replicas..plan.replica_count() {
            let p: f64 = plan.choices[..k].iter().map(|c| 1.0 - c.contribution).product();
            assert!(p > 1.0 - req.target_reliability);
        }
        assert!(!plan.reliability_unmet);
        let fogs: BTreeSet<FogId> = plan.choices.iter().map(|c| c.fog_id).collect();
        assert_eq!(fogs.len(), plan.replica_count());
    }

    #[test]
    fn insufficient_capacity() {
        let mut sums = BTreeMap::new();
        sums.insert(FogId(1), summary(1, 0.9, 0.95, [1, 0, 0, 0]));
        let g = build_global_matrix(&sums.values().cloned().collect::<Vec<_>>(), 16).unwrap();
        let req = ReplicaRequirement {
            block_size: 10,
            target_reliability: 0.99,
            min_replicas: 2,
            max_replicas: 3,
            client_fog: None,
            client_is_edge: false,
        };
        assert!(matches!(
            choose_replica_fogs(&g, &sums, &req, 1),
            Err(Error::InsufficientCapacity(_))
        ));
        let big = ReplicaRequirement {
            block_size: 10_000_000_000,
            min_replicas: 1,
            ..req
        };
        assert!(matches!(
            choose_replica_fogs(&g, &sums, &big, 1),
            Err(Error::InsufficientCapacity(_))
        ));
    }

    #[test]
    fn unmet_target_is_flagged() {
        let mut sums = BTreeMap::new();
        for f in 1..=3 {
            sums.insert(FogId(f), summary(f, 0.6, 0.65, [1, 1, 1, 1]));
        }
        let g = build_global_matrix(&sums.values().cloned().collect::<Vec<_>>(), 16).unwrap();
        let req = ReplicaRequirement {
            block_size: 10,
            target_reliability: 0.9999,
            min_replicas: 2,
            max_replicas: 3,
            client_fog: None,
            client_is_edge: false,
        };
        let plan = choose_replica_fogs(&g, &sums, &req, 3).unwrap();
        assert_eq!(plan.replica_count(), 3);
        assert!(plan.reliability_unmet);
    }

    #[test]
    fn first_replica_is_local_for_edge_clients() {
        let mut sums = BTreeMap::new();
        for f in 1..=4 {
            sums.insert(FogId(f), summary(f, 0.85 + f as f64 * 0.01, 0.9, [1, 1, 1, 1]));
        }
        let g = build_global_matrix(&sums.values().cloned().collect::<Vec<_>>(), 16).unwrap();
        for seed in 0..20 {
            let req = ReplicaRequirement {
                block_size: 10,
                target_reliability: 0.99,
                min_replicas: 2,
                max_replicas: 5,
                client_fog: Some(FogId(3)),
                client_is_edge: true,
            };
            let plan = choose_replica_fogs(&g, &sums, &req, seed).unwrap();
            assert_eq!(plan.choices[0].fog_id, FogId(3));
            let again = choose_replica_fogs(&g, &sums, &req, seed).unwrap();
            assert_eq!(plan, again);
        }
    }
}
