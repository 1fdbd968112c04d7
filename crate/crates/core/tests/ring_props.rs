use std::collections::{BTreeMap, BTreeSet};

use ethnum::U256;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vpo_core::modeler::build_model;
use vpo_core::ring::{closest_to, next_greedy_hop, ring_distance, AddressSpace, Hop, NodeId};
use vpo_core::sim::LatencyMatrix;

fn s(bits: u32) -> AddressSpace {
    AddressSpace::new(bits).unwrap()
}

type Graph = BTreeMap<NodeId, BTreeSet<NodeId>>;

fn link(g: &mut Graph, a: NodeId, b: NodeId) {
    if a != b {
        g.entry(a).or_default().insert(b);
        g.entry(b).or_default().insert(a);
    }
}

/// Ring with successor/predecessor links plus the given chords.
fn ring_with_chords(ids: &[NodeId], chords: &[(usize, usize)]) -> Graph {
    let mut g: Graph = ids.iter().map(|i| (*i, BTreeSet::new())).collect();
    let n = ids.len();
    for i in 0..n {
        link(&mut g, ids[i], ids[(i + 1) % n]);
    }
    for (a, b) in chords {
        link(&mut g, ids[a % n], ids[b % n]);
    }
    g
}

/// Greedy walk; `None` if it revisits a node.
fn walk(g: &Graph, from: NodeId, target: NodeId, space: AddressSpace) -> Option<(NodeId, usize)> {
    let mut cur = from;
    let mut seen = BTreeSet::new();
    loop {
        if !seen.insert(cur) {
            return None;
        }
        match next_greedy_hop(cur, g[&cur].iter().copied(), target, space) {
            Hop::Forward(n) => cur = n,
            Hop::DeliverHere => return Some((cur, seen.len() - 1)),
        }
    }
}

fn id_set(bits: u32, max: usize) -> impl Strategy<Value = Vec<NodeId>> {
    let top = (1u64 << bits) - 1;
    prop::collection::btree_set(0..=top, 1..=max)
        .prop_map(move |set| set.into_iter().map(|v| s(bits).id(v as u128)).collect())
}

#[test]
fn metric_axioms_exhaustive_on_8_bits() {
    let sp = s(8);
    for a in 0..256u128 {
        for b in 0..256u128 {
            let (x, y) = (sp.id(a), sp.id(b));
            let d = ring_distance(x, y, sp);
            assert_eq!(d, ring_distance(y, x, sp));
            assert_eq!(d == U256::ZERO, a == b);
            assert!(d <= U256::new(128));
        }
    }
    for a in (0..256u128).step_by(3) {
        for b in (0..256u128).step_by(5) {
            for c in (0..256u128).step_by(7) {
                let (x, y, z) = (sp.id(a), sp.id(b), sp.id(c));
                assert!(ring_distance(x, z, sp) <= ring_distance(x, y, sp) + ring_distance(y, z, sp));
            }
        }
    }
}

proptest! {
    #[test]
    fn metric_axioms_on_wide_space(a in any::<u128>(), b in any::<u128>(), c in any::<u128>()) {
        let sp = s(128);
        let (x, y, z) = (sp.id(a), sp.id(b), sp.id(c));
        let half = sp.size() >> 1;
        prop_assert_eq!(ring_distance(x, y, sp), ring_distance(y, x, sp));
        prop_assert_eq!(ring_distance(x, y, sp) == U256::ZERO, a == b);
        prop_assert!(ring_distance(x, y, sp) <= half);
        prop_assert!(ring_distance(x, z, sp) <= ring_distance(x, y, sp) + ring_distance(y, z, sp));
    }

    #[test]
    fn greedy_routing_terminates_on_any_graph(
        ids in id_set(12, 40),
        chords in prop::collection::vec((0usize..40, 0usize..40), 0..60),
        drop_ring in any::<bool>(),
        target in 0u128..4096,
    ) {
        let sp = s(12);
        let mut g = ring_with_chords(&ids, &chords);
        if drop_ring {
            // Chords only: the graph may be disconnected, routing must still stop.
            g = ids.iter().map(|i| (*i, BTreeSet::new())).collect();
            for (a, b) in &chords {
                link(&mut g, ids[a % ids.len()], ids[b % ids.len()]);
            }
        }
        let t = sp.id(target);
        for src in &ids {
            let (_, hops) = walk(&g, *src, t, sp).expect("greedy walk revisited a node");
            prop_assert!(hops < ids.len());
        }
    }

    #[test]
    fn greedy_delivery_matches_brute_force_on_rings(
        ids in id_set(16, 64),
        chords in prop::collection::vec((0usize..64, 0usize..64), 0..32),
        targets in prop::collection::vec(0u128..65536, 8),
    ) {
        let sp = s(16);
        let g = ring_with_chords(&ids, &chords);
        let all: Vec<NodeId> = ids.iter().chain(targets.iter().map(|t| sp.id(*t)).collect::<Vec<_>>().iter()).copied().collect();
        for t in all {
            let want = closest_to(t, ids.iter().copied(), sp).unwrap();
            for src in &ids {
                let (got, _) = walk(&g, *src, t, sp).unwrap();
                prop_assert_eq!(got, want);
            }
        }
    }
}

#[test]
fn modeled_median_hops_within_twice_log2() {
    let sp = AddressSpace::default();
    let lat = LatencyMatrix::uniform(1, 100);
    for n in [256usize, 1024] {
        let topo = build_model(n, sp, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let mut hops: Vec<usize> = (0..2000)
            .map(|_| {
                let src = rand::Rng::gen_range(&mut rng, 0..n);
                let dst = topo.nodes[rand::Rng::gen_range(&mut rng, 0..n)];
                topo.route(src, dst, &lat).hops
            })
            .collect();
        hops.sort_unstable();
        let median = hops[hops.len() / 2] as f64;
        assert!(median <= 2.0 * (n as f64).log2(), "n={n} median={median}");
    }
}
