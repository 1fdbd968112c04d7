//! Static network modeler.
//!
//! Builds an idealized steady-state ring (three neighbours per side plus
//! harmonic shortcuts at fixed quantiles) and prices joins and revocations
//! by walking greedy routes over it. No state machines run here, which is
//! what lets it handle networks of 100 000 nodes.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::broadcast::{broadcast_metrics, full_broadcast, simulate_broadcast};
use crate::overlay::{handshake_rtts, shortcut_count, MessageSizes};
use crate::private::revocation_key;
use crate::ring::{closeness_cmp, next_greedy_hop, AddressSpace, Hop, NodeId};
use crate::sim::{assign_sites, LatencyMatrix, Time};

pub const NEAR_NEIGHBORS: usize = 3;

#[derive(Debug, Clone)]
pub struct ModelTopology {
    pub space: AddressSpace,
    /// Sorted ascending.
    pub nodes: Vec<NodeId>,
    /// Adjacency by index into `nodes`, sorted, no self loops.
    pub links: Vec<Vec<u32>>,
    pub shortcuts_per_node: usize,
    pub sites: Vec<usize>,
}

/// Ideal distance of shortcut `i` of `k` in an `n`-node ring.
pub fn shortcut_fraction(n: usize, i: usize, k: usize) -> f64 {
    (n as f64).powf((i as f64 + 0.5) / k as f64 - 1.0)
}

impl ModelTopology {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn index_of(&self, id: NodeId) -> Option<usize> {
        self.nodes.binary_search(&id).ok()
    }

    pub fn neighbors_of(&self, id: NodeId) -> Vec<NodeId> {
        self.index_of(id)
            .map(|i| self.links[i].iter().map(|j| self.nodes[*j as usize]).collect())
            .unwrap_or_default()
    }

    /// Index of the node closest to `target`.
    pub fn closest_index(&self, target: NodeId) -> usize {
        let n = self.nodes.len();
        let pos = self.nodes.partition_point(|x| *x < target);
        let a = pos % n;
        let b = (pos + n - 1) % n;
        if closeness_cmp(target, self.nodes[a], self.nodes[b], self.space).is_le() {
            a
        } else {
            b
        }
    }

    /// Places nodes on sites of a latency matrix.
    pub fn place(&mut self, n_sites: usize, seed: u64) {
        self.sites = assign_sites(self.nodes.len(), n_sites, seed);
    }

    pub fn site(&self, idx: usize) -> usize {
        self.sites.get(idx).copied().unwrap_or(0)
    }

    /// Whether the link graph is connected.
    pub fn is_connected(&self) -> bool {
        if self.nodes.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = stack.pop() {
            for j in &self.links[i] {
                let j = *j as usize;
                if !seen[j] {
                    seen[j] = true;
                    count += 1;
                    stack.push(j);
                }
            }
        }
        count == self.nodes.len()
    }

    /// Greedy route from node index `source` toward address `target`.
    pub fn route(&self, source: usize, target: NodeId, latency: &LatencyMatrix) -> ModelRoute {
        let mut path = vec![source];
        let mut cur = source;
        let mut lat = 0;
        loop {
            let conns = self.links[cur].iter().map(|j| self.nodes[*j as usize]);
            match next_greedy_hop(self.nodes[cur], conns, target, self.space) {
                Hop::DeliverHere => break,
                Hop::Forward(next) => {
                    let nxt = self.index_of(next).expect("link to known node");
                    lat += latency.one_way(self.site(cur), self.site(nxt));
                    path.push(nxt);
                    cur = nxt;
                }
            }
        }
        ModelRoute { hops: path.len() - 1, latency: lat, path }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelRoute {
    pub hops: usize,
    pub latency: Time,
    pub path: Vec<usize>,
}

/// Idealized topology of `n` seeded nodes.
pub fn build_model(n: usize, space: AddressSpace, seed: u64) -> ModelTopology {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = BTreeSet::new();
    while set.len() < n {
        set.insert(space.random_id(&mut rng));
    }
    let nodes: Vec<NodeId> = set.into_iter().collect();
    let k = shortcut_count(n);
    let mut topo = ModelTopology {
        space,
        nodes,
        links: vec![Vec::new(); n],
        shortcuts_per_node: k,
        sites: vec![0; n],
    };
    let mut edges: Vec<(u32, u32)> = Vec::new();
    let near = NEAR_NEIGHBORS.min(n.saturating_sub(1) / 2 + n.saturating_sub(1) % 2);
    for i in 0..n {
        for d in 1..=near {
            let j = (i + d) % n;
            if j != i {
                edges.push((i as u32, j as u32));
            }
        }
        for s in 0..k {
            let dist = space.scaled(shortcut_fraction(n, s, k));
            let target = space.add(topo.nodes[i], dist);
            let mut j = topo.closest_index(target);
            if j == i {
                // Closest other node: the better of the two ring neighbours.
                let a = (i + 1) % n;
                let b = (i + n - 1) % n;
                j = if closeness_cmp(target, topo.nodes[a], topo.nodes[b], space).is_le() { a } else { b };
            }
            if j != i {
                edges.push((i as u32, j as u32));
            }
        }
    }
    for (a, b) in edges {
        topo.links[a as usize].push(b);
        topo.links[b as usize].push(a);
    }
    for l in &mut topo.links {
        l.sort_unstable();
        l.dedup();
    }
    topo
}

pub fn model_route(topology: &ModelTopology, source: NodeId, target: NodeId, latency: &LatencyMatrix) -> ModelRoute {
    let src = topology.index_of(source).expect("source in topology");
    topology.route(src, target, latency)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum JoinStep {
    PublicBootstrap,
    PublicRouteToSelf,
    PublicNeighbors,
    DhtPut,
    DhtGet,
    PrivateBootstrap,
    PrivateRouteToSelf,
    PrivateNeighbors,
}

impl JoinStep {
    /// Steps whose cost is a handshake on a private (secured) link.
    pub fn is_secured_handshake(&self) -> bool {
        matches!(self, JoinStep::PrivateBootstrap | JoinStep::PrivateNeighbors)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JoinEstimate {
    /// Cost of each step.
    pub steps: Vec<(JoinStep, Time)>,
    /// Round-trip times of the handshakes behind secured steps, before
    /// multiplying by the handshake length.
    pub secured_link_rtts: Vec<Time>,
    pub total: Time,
}

/// Where a simulated joiner lands: its site and its two ring addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Joiner {
    pub site: usize,
    pub public_id: NodeId,
    pub private_id: NodeId,
    /// Index of the public node used as bootstrap.
    pub public_bootstrap: usize,
    /// Index of the private member discovered through the DHT.
    pub private_bootstrap: usize,
}

impl Joiner {
    pub fn random(pub_topo: &ModelTopology, priv_topo: &ModelTopology, site: usize, rng: &mut ChaCha8Rng) -> Self {
        let space = pub_topo.space;
        Self {
            site,
            public_id: space.random_id(rng),
            private_id: priv_topo.space.random_id(rng),
            public_bootstrap: rng.gen_range(0..pub_topo.len().max(1)),
            private_bootstrap: rng.gen_range(0..priv_topo.len().max(1)),
        }
    }
}

fn ideal_neighbors(topo: &ModelTopology, id: NodeId) -> Vec<usize> {
    let n = topo.len();
    if n == 0 {
        return Vec::new();
    }
    // Position where `id` would be inserted.
    let pos = topo.nodes.partition_point(|x| *x < id);
    let mut out = BTreeSet::new();
    for d in 0..NEAR_NEIGHBORS.min(n) {
        out.insert((pos + d) % n);
        out.insert((pos + n - 1 - d) % n);
    }
    out.into_iter().collect()
}

/// Sum of modeled step costs for one joiner.
pub fn estimate_join(
    pub_topo: &ModelTopology,
    priv_topo: &ModelTopology,
    security: bool,
    joiner: &Joiner,
    latency: &LatencyMatrix,
    group_key: NodeId,
) -> JoinEstimate {
    let rtt = |site: usize| latency.rtt(joiner.site, site);
    let mut steps = Vec::new();
    let mut secured_link_rtts = Vec::new();

    // Public overlay join: unsecured links.
    let b = joiner.public_bootstrap;
    steps.push((JoinStep::PublicBootstrap, handshake_rtts(false) * rtt(pub_topo.site(b))));
    let r = pub_topo.route(b, joiner.public_id, latency);
    let to_self = rtt(pub_topo.site(b)) / 2 + r.latency;
    steps.push((JoinStep::PublicRouteToSelf, 2 * to_self));
    let nb = ideal_neighbors(pub_topo, joiner.public_id);
    let worst = nb.iter().map(|i| rtt(pub_topo.site(*i))).max().unwrap_or(0);
    steps.push((JoinStep::PublicNeighbors, handshake_rtts(false) * worst));

    // DHT put then get from the joiner's nearest public node.
    let home = pub_topo.closest_index(joiner.public_id);
    let dht = rtt(pub_topo.site(home)) / 2 + pub_topo.route(home, group_key, latency).latency;
    steps.push((JoinStep::DhtPut, 2 * dht));
    steps.push((JoinStep::DhtGet, 2 * dht));

    // Private overlay join over secured links.
    let pb = joiner.private_bootstrap;
    let boot_rtt = rtt(priv_topo.site(pb));
    secured_link_rtts.push(boot_rtt);
    steps.push((JoinStep::PrivateBootstrap, handshake_rtts(security) * boot_rtt));
    let r = priv_topo.route(pb, joiner.private_id, latency);
    steps.push((JoinStep::PrivateRouteToSelf, 2 * (boot_rtt / 2 + r.latency)));
    let nb = ideal_neighbors(priv_topo, joiner.private_id);
    let worst = nb.iter().map(|i| rtt(priv_topo.site(*i))).max().unwrap_or(0);
    secured_link_rtts.push(worst);
    steps.push((JoinStep::PrivateNeighbors, handshake_rtts(security) * worst));

    let total = steps.iter().map(|(_, t)| *t).sum();
    JoinEstimate { steps, secured_link_rtts, total }
}

/// Mean join estimate over `joiners` seeded joiners at `site`.
#[allow(clippy::too_many_arguments)]
pub fn mean_join_estimate(
    pub_topo: &ModelTopology,
    priv_topo: &ModelTopology,
    security: bool,
    site: usize,
    joiners: usize,
    latency: &LatencyMatrix,
    group_key: NodeId,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: u64 = (0..joiners.max(1))
        .map(|_| {
            let j = Joiner::random(pub_topo, priv_topo, site, &mut rng);
            estimate_join(pub_topo, priv_topo, security, &j, latency, group_key).total
        })
        .sum();
    total as f64 / joiners.max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RevocationMethod {
    Dht,
    Broadcast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RevocationEstimate {
    pub time: Time,
    pub bytes: u64,
    pub messages: u64,
}

/// Cost of revoking one node. The CA agent sits at node index `agent`, the
/// revoked node at `target`. The DHT method notifies the nodes linked to
/// the target; the broadcast reaches all other nodes. Bytes count each
/// message once, end to end.
pub fn estimate_revocation(
    topo: &ModelTopology,
    method: RevocationMethod,
    agent: usize,
    target: usize,
    latency: &LatencyMatrix,
    sizes: &MessageSizes,
) -> RevocationEstimate {
    let space = topo.space;
    let notice = sizes.revocation_notice;
    match method {
        RevocationMethod::Broadcast => {
            // The model counts every other node as a recipient.
            let task = full_broadcast(topo.nodes[agent], vec![], BTreeSet::new(), space);
            let per = notice + sizes.broadcast_header;
            let site = |id: NodeId| topo.site(topo.index_of(id).expect("known"));
            let trace = simulate_broadcast(
                |id| topo.neighbors_of(id),
                task,
                per,
                0,
                |a, b| latency.one_way(site(a), site(b)),
                space,
            );
            let m = broadcast_metrics(&trace);
            RevocationEstimate { time: m.completion_time, bytes: m.bytes, messages: m.messages }
        }
        RevocationMethod::Dht => {
            let key = revocation_key(topo.nodes[target], space);
            let put = topo.route(agent, key, latency);
            let get = topo.route(agent, key, latency);
            let subscribers = &topo.links[target];
            let unicast = subscribers
                .iter()
                .map(|s| topo.route(agent, topo.nodes[*s as usize], latency).latency)
                .max()
                .unwrap_or(0);
            let s = subscribers.len() as u64;
            let entry = sizes.neighbor_entry;
            let bytes = (notice + sizes.dht_header + sizes.routed_header) * 2
                + (sizes.dht_header + sizes.routed_header)
                + (sizes.dht_header + sizes.routed_header + s * entry)
                + s * (notice + sizes.routed_header);
            RevocationEstimate {
                time: 2 * put.latency + 2 * get.latency + unicast,
                bytes,
                messages: 4 + s,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dht::key_digest;

    fn space() -> AddressSpace {
        AddressSpace::default()
    }

    #[test]
    fn shortcut_counts_follow_rule() {
        assert_eq!(build_model(1024, space(), 1).shortcuts_per_node, 5);
        assert_eq!(build_model(8, space(), 1).shortcuts_per_node, 2);
    }

    #[test]
    fn shortcut_positions_are_quantiles() {
        let t = build_model(256, space(), 3);
        let k = t.shortcuts_per_node;
        for i in [0usize, 17, 200] {
            for s in 0..k {
                let target = t.space.add(t.nodes[i], t.space.scaled(shortcut_fraction(256, s, k)));
                let j = t.closest_index(target);
                if j != i {
                    assert!(t.links[i].contains(&(j as u32)));
                }
            }
        }
        assert!((shortcut_fraction(1024, 0, 5) - 1024f64.powf(0.1 - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn models_are_connected_with_expected_degree() {
        for seed in 0..5 {
            let t = build_model(512, space(), seed);
            assert!(t.is_connected());
            let mean = t.links.iter().map(Vec::len).sum::<usize>() as f64 / 512.0;
            // 6 ring links plus about 2k shortcut endpoints, minus overlap.
            assert!(mean >= 6.0 && mean <= 6.0 + 2.0 * t.shortcuts_per_node as f64, "{mean}");
        }
    }

    #[test]
    fn trivial_routes() {
        let lat = LatencyMatrix::uniform(1, 100);
        let t = build_model(2, space(), 1);
        let r = model_route(&t, t.nodes[0], t.nodes[0], &lat);
        assert_eq!((r.hops, r.latency), (0, 0));
        let mut t = t;
        t.sites = vec![0, 1];
        let lat = LatencyMatrix::uniform(2, 100);
        let r = model_route(&t, t.nodes[0], t.nodes[1], &lat);
        assert_eq!((r.hops, r.latency), (1, 50));
    }

    #[test]
    fn security_adds_two_rtts_per_secured_handshake() {
        let lat = crate::sim::synthetic_latency(50, 20, 300, 4).unwrap();
        let mut p = build_model(300, space(), 1);
        p.place(50, 1);
        let mut q = build_model(40, space(), 2);
        q.place(50, 2);
        let key = key_digest(b"g", space());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let j = Joiner::random(&p, &q, 7, &mut rng);
            let off = estimate_join(&p, &q, false, &j, &lat, key);
            let on = estimate_join(&p, &q, true, &j, &lat, key);
            let expected: u64 = 2 * on.secured_link_rtts.iter().sum::<u64>();
            assert_eq!(on.total - off.total, expected);
        }
    }

    #[test]
    fn broadcast_time_scales_polylog() {
        let lat = LatencyMatrix::uniform(4096, 100);
        let sizes = MessageSizes::default();
        let mut t256 = build_model(256, space(), 2);
        t256.place(4096, 1);
        let mut t4096 = build_model(4096, space(), 2);
        t4096.place(4096, 1);
        let a = estimate_revocation(&t256, RevocationMethod::Broadcast, 0, 1, &lat, &sizes);
        let b = estimate_revocation(&t4096, RevocationMethod::Broadcast, 0, 1, &lat, &sizes);
        assert!(b.time as f64 / a.time as f64 <= (144.0 / 64.0) * 1.5);
    }

    #[test]
    fn broadcast_bytes_closed_form() {
        let lat = LatencyMatrix::uniform(1, 100);
        let t = build_model(1000, space(), 9);
        let e = estimate_revocation(&t, RevocationMethod::Broadcast, 0, 500, &lat, &MessageSizes::default());
        assert_eq!(e.messages, 999);
        assert_eq!(e.bytes, 359_640);
    }

    #[test]
    fn dht_bytes_do_not_depend_on_size() {
        let lat = LatencyMatrix::uniform(1, 100);
        let sizes = MessageSizes::default();
        let small = build_model(256, space(), 1);
        let large = build_model(4096, space(), 1);
        // Same subscriber count on both sides: pick targets with equal degree.
        let degrees = |t: &ModelTopology| t.links.iter().map(Vec::len).collect::<BTreeSet<_>>();
        let deg = *degrees(&small).intersection(&degrees(&large)).next().unwrap();
        let pick = |t: &ModelTopology| (0..t.len()).find(|i| t.links[*i].len() == deg).unwrap();
        let a = estimate_revocation(&small, RevocationMethod::Dht, 0, pick(&small), &lat, &sizes);
        let b = estimate_revocation(&large, RevocationMethod::Dht, 0, pick(&large), &lat, &sizes);
        assert_eq!(a.bytes, b.bytes);
    }
}
