//! Property tests over the pure building blocks.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use proptest::prelude::*;

use elfstore_core::bloom::{
    hash_value, merge_maps, plan_search, FilterMap, FilterSet, Mask160, PartitionIndex, PropertyBloomFilter,
};
use elfstore_core::edge::{EdgeConfig, EdgeNode};
use elfstore_core::net::ManualClock;
use elfstore_core::overlay::{build_overlay, Endpoint, OverlayTopology, Role, RouteClass};
use elfstore_core::placement::{
    choose_edge_in_fog, choose_recovery_fog, choose_replica_fogs, contribution_of, failure_product, ReplicaRequirement,
};
use elfstore_core::stats::{
    build_global_matrix, classify_fog, median_of, summarize_partition, EdgeStat, GlobalMatrix, PartitionSummary,
    DEFAULT_BUCKETS,
};
use elfstore_core::wire::{read_message, write_message};
use elfstore_core::{md5_hex, BlockRef, EdgeId, FogId, Quadrant};

type Population = Vec<Vec<(f64, u64)>>;

fn population(max_fogs: usize, max_edges: usize) -> impl Strategy<Value = Population> {
    prop::collection::vec(
        prop::collection::vec((0.5f64..0.999, 0u64..1_000_000), 1..=max_edges),
        1..=max_fogs,
    )
}

fn stats_of(pop: &Population) -> Vec<(FogId, Vec<EdgeStat>)> {
    let mut next = 0;
    pop.iter()
        .enumerate()
        .map(|(i, edges)| {
            let stats = edges
                .iter()
                .map(|&(r, s)| {
                    next += 1;
                    EdgeStat::new(EdgeId(next), r, s)
                })
                .collect();
            (FogId(i as u32 + 1), stats)
        })
        .collect()
}

fn summaries_of(pop: &Population) -> Vec<PartitionSummary> {
    stats_of(pop)
        .iter()
        .map(|(f, s)| summarize_partition(*f, s).unwrap())
        .collect()
}

fn matrix(pop: &Population) -> (GlobalMatrix, BTreeMap<FogId, PartitionSummary>) {
    let sums = summaries_of(pop);
    let g = build_global_matrix(&sums, DEFAULT_BUCKETS).unwrap();
    (g, sums.into_iter().map(|s| (s.fog_id, s)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn summary_is_consistent(edges in prop::collection::vec((0.5f64..0.999, 0u64..1_000_000), 1..30)) {
        let stats: Vec<EdgeStat> = edges.iter().enumerate()
            .map(|(i, &(r, s))| EdgeStat::new(EdgeId(i as u32), r, s)).collect();
        let s = summarize_partition(FogId(1), &stats).unwrap();
        prop_assert!(s.r_min <= s.r_med && s.r_med <= s.r_max);
        prop_assert!(s.s_min <= s.s_med && s.s_med <= s.s_max);
        prop_assert_eq!(s.c_q1 + s.c_q2 + s.c_q3 + s.c_q4, s.edge_total);
        prop_assert_eq!(s.edge_total as usize, edges.len());
        let high_r = edges.iter().filter(|(r, _)| *r >= s.r_med).count() as u32;
        prop_assert_eq!(s.c_q1 + s.c_q2, high_r);
        let high_s = edges.iter().filter(|(_, st)| *st as f64 >= s.s_med).count() as u32;
        prop_assert_eq!(s.c_q1 + s.c_q4, high_s);
    }

    #[test]
    fn overlap_conserves_edges(pop in population(8, 12)) {
        let (g, _) = matrix(&pop);
        let total: usize = pop.iter().map(Vec::len).sum();
        let sum: f64 = g.per_fog_overlap.values().flat_map(|m| m.values()).sum();
        prop_assert!((sum - total as f64).abs() <= 1e-6 * total as f64);
        prop_assert!((g.total_edges() - total as f64).abs() <= 1e-6 * total as f64);
        for (f, m) in &g.per_fog_overlap {
            let n = pop[f.0 as usize - 1].len() as f64;
            prop_assert!((m.values().sum::<f64>() - n).abs() <= 1e-9 * n.max(1.0));
            prop_assert!(m.values().all(|v| *v >= -1e-12));
        }
    }

    #[test]
    fn matrix_ignores_summary_order(pop in population(8, 10), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let sums = summaries_of(&pop);
        let mut shuffled = sums.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(
            build_global_matrix(&sums, DEFAULT_BUCKETS).unwrap(),
            build_global_matrix(&shuffled, DEFAULT_BUCKETS).unwrap()
        );
    }

    #[test]
    fn medians_stay_in_range(pop in population(8, 12)) {
        let (g, _) = matrix(&pop);
        prop_assert!(g.r_min_g <= g.r_med_g && g.r_med_g <= g.r_max_g);
        prop_assert!(g.s_min_g <= g.s_med_g && g.s_med_g <= g.s_max_g);
    }

    #[test]
    fn larger_storage_never_lowers_the_median(pop in even_population(), extra in even_population()) {
        let mut sums = summaries_of(&pop);
        let before = build_global_matrix(&sums, DEFAULT_BUCKETS).unwrap();
        let top = before.s_max_g as u64 + 1;
        let shifted: Population = extra.iter().map(|f| f.iter().map(|&(r, s)| (r, s + top)).collect()).collect();
        for (i, mut s) in summaries_of(&shifted).into_iter().enumerate() {
            s.fog_id = FogId(100 + i as u32);
            sums.push(s);
        }
        let after = build_global_matrix(&sums, DEFAULT_BUCKETS).unwrap();
        // the wider axis re-buckets the old mass, which can pull the
        // interpolated value back by less than one of the new buckets
        prop_assert!(after.s_med_g >= before.s_med_g - after.storage_bucket_width(),
            "{} < {} (width {})", after.s_med_g, before.s_med_g, after.storage_bucket_width());
    }

    #[test]
    fn larger_storage_never_lowers_the_median_on_a_fixed_axis(pop in even_population(), extra in even_population()) {
        // pin the axis with two fixed partitions so no re-bucketing happens
        let mut base = pop.clone();
        base.push(vec![(0.9, 0), (0.9, 0)]);
        base.push(vec![(0.9, 4_000_000), (0.9, 4_000_000)]);
        let mut sums = summaries_of(&base);
        let before = build_global_matrix(&sums, DEFAULT_BUCKETS).unwrap();
        let floor = pop.iter().flatten().map(|e| e.1).max().unwrap() + 1;
        let shifted: Population = extra.iter().map(|f| f.iter().map(|&(r, s)| (r, (s + floor).min(4_000_000))).collect()).collect();
        for (i, mut s) in summaries_of(&shifted).into_iter().enumerate() {
            s.fog_id = FogId(100 + i as u32);
            sums.push(s);
        }
        let after = build_global_matrix(&sums, DEFAULT_BUCKETS).unwrap();
        prop_assert_eq!(after.storage_bucket_width(), before.storage_bucket_width());
        prop_assert!(after.s_med_g >= before.s_med_g - 1e-9, "{} < {}", after.s_med_g, before.s_med_g);
    }

    #[test]
    fn fog_class_matches_classify(pop in population(8, 10)) {
        let (g, sums) = matrix(&pop);
        for (f, s) in &sums {
            prop_assert_eq!(g.fog_class[f], classify_fog(s, &g));
        }
        let listed: usize = Quadrant::ALL.iter().map(|&q| g.fogs_in(q).len()).sum();
        prop_assert_eq!(listed, sums.len());
    }
}

/// Partitions whose values are spread evenly between their own min and max,
/// which is the density the histogram assumes. Below about nine edges the
/// odd edge at the median shifts the estimate by more than a bucket.
fn even_population() -> impl Strategy<Value = Population> {
    prop::collection::vec(
        (
            0.5f64..0.95,
            0.01f64..0.05,
            0u64..500_000,
            10_000u64..500_000,
            9usize..40,
        ),
        1..10,
    )
    .prop_map(|fogs| {
        fogs.into_iter()
            .map(|(r0, rw, s0, sw, n)| {
                (0..n)
                    .map(|i| {
                        let t = i as f64 / (n - 1) as f64;
                        (r0 + rw * t, s0 + (sw as f64 * t) as u64)
                    })
                    .collect()
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn interpolated_median_is_within_a_bucket(pop in even_population()) {
        let (g, _) = matrix(&pop);
        let mut rs: Vec<f64> = pop.iter().flatten().map(|e| e.0).collect();
        let mut ss: Vec<f64> = pop.iter().flatten().map(|e| e.1 as f64).collect();
        rs.sort_by(f64::total_cmp);
        ss.sort_by(f64::total_cmp);
        // with an even count any point between the two middle values is a median
        let off = |v: &[f64], x: f64| {
            let (lo, hi) = (v[(v.len() - 1) / 2], median_of(v));
            (lo - x).max(x - hi).max(0.0)
        };
        prop_assert!(off(&rs, g.r_med_g) <= g.reliability_bucket_width() + 1e-9,
            "r {} vs {} (width {})", g.r_med_g, median_of(&rs), g.reliability_bucket_width());
        prop_assert!(off(&ss, g.s_med_g) <= g.storage_bucket_width() + 1e-9,
            "s {} vs {} (width {})", g.s_med_g, median_of(&ss), g.storage_bucket_width());
    }
}

fn requirement() -> impl Strategy<Value = ReplicaRequirement> {
    (
        0.5f64..0.99999,
        1usize..4,
        0usize..4,
        1u64..50_000,
        prop::option::of(1u32..9),
        any::<bool>(),
    )
        .prop_map(|(r, min, extra, size, client, edge)| ReplicaRequirement {
            block_size: size,
            target_reliability: r,
            min_replicas: min,
            max_replicas: min + extra,
            client_fog: client.map(FogId),
            client_is_edge: edge,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn plans_respect_their_contract(pop in population(8, 10), req in requirement(), seed in any::<u64>()) {
        let (g, sums) = matrix(&pop);
        let Ok(plan) = choose_replica_fogs(&g, &sums, &req, seed) else {
            // only legitimate when too few fogs can take the block
            let fits: usize = sums.values().filter(|s| s.s_max >= req.block_size as f64)
                .map(|s| s.edge_total as usize).sum();
            prop_assert!(fits < req.min_replicas);
            return Ok(());
        };
        let q = plan.replica_count();
        prop_assert!(q >= req.min_replicas && q <= req.max_replicas);
        let product = failure_product(plan.choices.iter().map(|c| c.contribution));
        if !plan.reliability_unmet {
            prop_assert!(1.0 - req.target_reliability + 1e-12 >= product);
        } else if q < req.max_replicas {
            // stopped early only because every edge that fits already holds a copy
            let room: u32 = sums.values().filter(|s| s.s_max >= req.block_size as f64).map(|s| s.edge_total).sum();
            prop_assert_eq!(q, room as usize);
        }
        for c in &plan.choices {
            prop_assert_eq!(c.contribution, contribution_of(&sums[&c.fog_id], c.hint).unwrap());
            prop_assert!(sums[&c.fog_id].s_max >= req.block_size as f64);
        }
        let used: BTreeSet<FogId> = plan.choices.iter().map(|c| c.fog_id).collect();
        if used.len() < q {
            prop_assert!(plan.reused_fog);
            let unused_fit = sums.values().any(|s| !used.contains(&s.fog_id) && s.s_max >= req.block_size as f64);
            prop_assert!(!unused_fit, "fog reused while another had room");
        }
        prop_assert_eq!(&plan, &choose_replica_fogs(&g, &sums, &req, seed).unwrap());
    }

    #[test]
    fn chosen_edges_earn_their_credit(pop in population(6, 12), size in 1u64..1000) {
        let (_, sums) = matrix(&pop);
        for (f, stats) in stats_of(&pop) {
            let s = &sums[&f];
            for hint in Quadrant::ALL {
                let Ok(credit) = contribution_of(s, hint) else { continue };
                let roomy = stats.iter().any(|e| e.free_storage >= size && e.reliability >= credit);
                match choose_edge_in_fog(&stats, s, hint, size) {
                    Ok(id) => {
                        let e = stats.iter().find(|e| e.edge_id == id).unwrap();
                        prop_assert!(e.free_storage >= size);
                        if roomy {
                            prop_assert!(e.reliability >= credit);
                        }
                        // least reliable among the edges in the hinted quadrant with room
                        let in_hint: Vec<&EdgeStat> = stats.iter()
                            .filter(|x| x.free_storage >= size
                                && Quadrant::classify(x.reliability, x.free_storage as f64, s.r_med, s.s_med) == hint)
                            .collect();
                        if let Some(best) = in_hint.iter().map(|x| x.reliability).reduce(f64::min) {
                            prop_assert_eq!(e.reliability, best);
                        }
                    }
                    Err(_) => prop_assert!(stats.iter().all(|e| e.free_storage < size)),
                }
            }
        }
    }

    #[test]
    fn recovery_fog_is_the_closest_credit(pop in population(8, 10), r in 0.5f64..0.999, size in 1u64..1000) {
        let (g, sums) = matrix(&pop);
        let mut best = f64::INFINITY;
        for s in sums.values().filter(|s| s.s_max >= size as f64) {
            for q in Quadrant::ALL {
                if let Ok(c) = contribution_of(s, q) {
                    best = best.min((c - r).abs());
                }
            }
        }
        match choose_recovery_fog(&g, &sums, r, size, &BTreeSet::new()) {
            Ok((f, q)) => {
                let c = contribution_of(&sums[&f], q).unwrap();
                prop_assert_eq!((c - r).abs(), best);
            }
            Err(_) => prop_assert!(best.is_infinite()),
        }
    }
}

fn small_value() -> impl Strategy<Value = String> {
    "[a-z0-9]{1,8}"
}

fn mask() -> impl Strategy<Value = Mask160> {
    prop::array::uniform20(any::<u8>()).prop_map(Mask160)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn filters_have_no_false_negatives(values in prop::collection::vec(small_value(), 1..80), more in prop::collection::vec(small_value(), 0..40)) {
        let mut f = PropertyBloomFilter::new("p");
        for v in &values {
            f.insert(v);
            prop_assert!(f.may_contain(v));
        }
        let before = f.bits;
        for v in &more {
            f.insert(v);
        }
        prop_assert!(f.bits.covers(&before));
        for v in &values {
            prop_assert!(f.may_contain(v));
        }
        prop_assert_eq!(hash_value(&values[0]).count_ones() as usize <= 5, true);
    }

    #[test]
    fn merge_is_a_semilattice(a in mask(), b in mask(), c in mask()) {
        prop_assert_eq!(a.or(&b), b.or(&a));
        prop_assert_eq!(a.or(&b).or(&c), a.or(&b.or(&c)));
        prop_assert_eq!(a.or(&a), a);
        prop_assert!(a.or(&b).covers(&a));
        prop_assert_eq!(Mask160::from_base64(&a.to_base64()).unwrap(), a);
    }

    #[test]
    fn index_lookup_matches_a_scan(
        blocks in prop::collection::vec((0u32..4, "[ab]", prop::collection::vec(("[xyz]", "[0-2]"), 0..3)), 1..40),
        query in prop::collection::vec(("[xyz]", "[0-2]"), 1..3),
    ) {
        let mut idx = PartitionIndex::default();
        let mut all = Vec::new();
        for (i, (edge, stream, props)) in blocks.iter().enumerate() {
            let block = BlockRef::new(stream.as_str(), format!("b{i}"));
            let pairs = idx.index_block(EdgeId(*edge), &block, props);
            all.push((EdgeId(*edge), block, pairs));
        }
        let expect: BTreeSet<(EdgeId, BlockRef)> = all.iter()
            .filter(|(_, _, pairs)| query.iter().all(|q| pairs.contains(q)))
            .map(|(e, b, _)| (*e, b.clone()))
            .collect();
        prop_assert_eq!(idx.lookup(&query), expect);
        let hosted: BTreeSet<(EdgeId, BlockRef)> = all.iter().map(|(e, b, _)| (*e, b.clone())).collect();
        prop_assert_eq!(idx.hosted_pairs(), hosted.clone());
        let removed = idx.remove_edge(EdgeId(0));
        let gone: BTreeSet<BlockRef> = hosted.iter().filter(|(e, _)| *e == EdgeId(0)).map(|(_, b)| b.clone()).collect();
        prop_assert_eq!(removed, gone);
        prop_assert!(idx.hosted_pairs().iter().all(|(e, _)| *e != EdgeId(0)));
    }
}

/// Filter sets as gossip leaves them once it has settled.
fn settled_filters(o: &OverlayTopology, local: &BTreeMap<FogId, FilterMap>) -> BTreeMap<FogId, FilterSet> {
    let recursive = |b: FogId| {
        let mut m = local[&b].clone();
        for n in o.neighbors_of(b).unwrap() {
            merge_maps(&mut m, &local[&n]);
        }
        m
    };
    let mut out = BTreeMap::new();
    for f in o.fog_ids() {
        let mut fs = FilterSet {
            local: local[&f].clone(),
            ..FilterSet::default()
        };
        if o.is_buddy(f) {
            for n in o.neighbors_of(f).unwrap() {
                fs.neighbor.insert(n, local[&n].clone());
            }
            for b in o.buddies_of(f).unwrap() {
                fs.buddy.insert(b, recursive(b));
            }
        } else {
            for &b in &o.buddy_set {
                fs.buddy.insert(b, recursive(b));
            }
        }
        out.insert(f, fs);
    }
    out
}

/// Fogs a search starting at `from` would look at, following the forwarding
/// rules: local, passing neighbors, passing buddies and their neighbors.
fn visited(
    o: &OverlayTopology,
    sets: &BTreeMap<FogId, FilterSet>,
    from: FogId,
    q: &[(String, String)],
) -> BTreeSet<FogId> {
    let plan = plan_search(&sets[&from], q);
    let mut out = BTreeSet::new();
    if plan.local_hit {
        out.insert(from);
    }
    out.extend(plan.candidate_neighbors.iter().copied());
    for b in plan.candidate_buddies.into_iter().filter(|&b| b != from) {
        let at = plan_search(&sets[&b], q);
        if at.local_hit {
            out.insert(b);
        }
        out.extend(at.candidate_neighbors.into_iter().filter(|&n| n != from));
    }
    let _ = o;
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn every_placement_is_reachable(p in 1usize..10, b_frac in 0.0f64..1.0, noise in prop::collection::vec((0usize..10, small_value()), 0..30)) {
        let b = ((p - 1) as f64 * b_frac) as usize;
        let ids: Vec<FogId> = (1..=p as u32).map(FogId).collect();
        let o = build_overlay(&ids, b).unwrap();
        for target in &ids {
            let mut local: BTreeMap<FogId, FilterMap> = ids.iter().map(|&f| (f, FilterMap::new())).collect();
            for (i, v) in &noise {
                let f = ids[i % p];
                local.get_mut(&f).unwrap().entry("k".into()).or_insert_with(|| PropertyBloomFilter::new("k")).insert(v);
            }
            local.get_mut(target).unwrap().entry("k".into()).or_insert_with(|| PropertyBloomFilter::new("k")).insert("needle");
            let sets = settled_filters(&o, &local);
            let q = vec![("k".to_string(), "needle".to_string())];
            for &from in &ids {
                prop_assert!(visited(&o, &sets, from, &q).contains(target), "{target} missed from {from} (p {p}, b {b})");
                prop_assert!(o.route_class(from, *target).is_ok());
            }
        }
    }

    #[test]
    fn overlay_covers_every_fog_once(p in 1usize..40, b_frac in 0.0f64..1.0) {
        let b = ((p - 1) as f64 * b_frac) as usize;
        let ids: Vec<FogId> = (1..=p as u32).rev().map(FogId).collect();
        let o = build_overlay(&ids, b).unwrap();
        prop_assert_eq!(&o, &build_overlay(&ids, b).unwrap());
        prop_assert_eq!(o.buddy_set.len(), b + 1);
        let mut seen = BTreeSet::new();
        for (buddy, ns) in &o.neighbor_map {
            prop_assert!(seen.insert(*buddy));
            prop_assert_eq!(o.descriptor(*buddy).unwrap().role, Role::Buddy);
            for n in ns {
                prop_assert!(seen.insert(*n));
                prop_assert_eq!(o.descriptor(*n).unwrap().pool_buddy_id, *buddy);
            }
        }
        prop_assert_eq!(seen.len(), p);
        let sizes: Vec<usize> = o.neighbor_map.values().map(Vec::len).collect();
        let ceil = (p - (b + 1)).div_ceil(b + 1);
        prop_assert!(sizes.iter().all(|&s| s <= ceil));
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        if p % (b + 1) == 0 {
            prop_assert!(sizes.iter().all(|&s| s == p / (b + 1) - 1));
        }
        for &from in &ids {
            for &to in &ids {
                let c = o.route_class(from, to).unwrap();
                prop_assert_eq!(c == RouteClass::SelfFog, from == to);
            }
        }
    }
}

fn edge_node(capacity: u64) -> EdgeNode {
    let cfg = EdgeConfig {
        edge_id: EdgeId(1),
        parent_fog: Endpoint::default(),
        reliability: 0.9,
        capacity,
        heartbeat_interval_ms: 1000,
        listen: Endpoint::default(),
        store_dir: None,
    };
    EdgeNode::new(cfg, Arc::new(ManualClock::default())).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn edge_store_round_trips(payloads in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..4096), 1..100)) {
        let cap = 1 << 20;
        let e = edge_node(cap);
        let mut used = 0;
        for (i, p) in payloads.iter().enumerate() {
            let b = BlockRef::new("s", format!("b{i}"));
            e.store_replica(&b, p.clone(), vec![], &md5_hex(p)).unwrap();
            used += p.len() as u64;
            prop_assert_eq!(e.free_storage(), cap - used);
        }
        for (i, p) in payloads.iter().enumerate() {
            let r = e.read_replica(&BlockRef::new("s", format!("b{i}"))).unwrap();
            prop_assert_eq!(&r.payload, p);
        }
        let b = BlockRef::new("s", "b0");
        e.overwrite_replica(&b, vec![1; 10], &md5_hex(&[1; 10])).unwrap();
        prop_assert_eq!(e.free_storage(), cap - used + payloads[0].len() as u64 - 10);
    }

    #[test]
    fn disk_store_round_trips(payloads in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..2048), 1..20)) {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = edge_node(1 << 20).config().clone();
        cfg.store_dir = Some(dir.path().to_path_buf());
        {
            let e = EdgeNode::new(cfg.clone(), Arc::new(ManualClock::default())).unwrap();
            for (i, p) in payloads.iter().enumerate() {
                e.store_replica(&BlockRef::new("s", format!("b{i}")), p.clone(), vec![], &md5_hex(p)).unwrap();
            }
        }
        let reopened = EdgeNode::new(cfg, Arc::new(ManualClock::default())).unwrap();
        let used: u64 = payloads.iter().map(|p| p.len() as u64).sum();
        prop_assert_eq!(reopened.free_storage(), (1 << 20) - used);
        for (i, p) in payloads.iter().enumerate() {
            prop_assert_eq!(&reopened.read_replica(&BlockRef::new("s", format!("b{i}"))).unwrap().payload, p);
        }
    }

    #[test]
    fn messages_round_trip(fields in prop::collection::btree_map("[a-z]{1,6}", ".{0,20}", 0..6), data in prop::option::of(prop::collection::vec(any::<u8>(), 0..5000))) {
        let header: serde_json::Map<String, serde_json::Value> =
            fields.into_iter().map(|(k, v)| (k, serde_json::Value::String(v))).collect();
        let mut buf = Vec::new();
        write_message(&mut buf, header.clone(), data.as_deref()).unwrap();
        let (h, d) = read_message(&mut std::io::Cursor::new(buf), 1 << 20).unwrap().unwrap();
        for (k, v) in &header {
            prop_assert_eq!(&h[k], v);
        }
        prop_assert_eq!(d.filter(|d| !d.is_empty()), data.filter(|d| !d.is_empty()));
    }
}
