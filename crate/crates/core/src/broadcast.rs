//! Bounded broadcast over a ring range.
//!
//! A node holding a range hands each of its in-range connections the slice
//! of the range up to the next connection, and the last connection the
//! remainder. Recursion stops at nodes with no connection inside their
//! slice. Slices are disjoint, so every reached node receives the message
//! once and a broadcast over `N` reachable nodes costs `N - 1` messages.

use std::collections::{BTreeSet, VecDeque};

use crate::ring::{clockwise_distance, in_range, AddressSpace, NodeId, RingRange};
use crate::sim::Time;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BroadcastTask {
    pub range: RingRange,
    pub payload: Vec<u8>,
    pub origin: NodeId,
    pub exclude: BTreeSet<NodeId>,
    pub hop_depth: u32,
}

impl BroadcastTask {
    /// Copy of this task narrowed to a child's slice, one hop deeper.
    pub fn child(&self, range: RingRange) -> Self {
        Self {
            range,
            payload: self.payload.clone(),
            origin: self.origin,
            exclude: self.exclude.clone(),
            hop_depth: self.hop_depth + 1,
        }
    }
}

/// Slices of `task.range` for each eligible connection of `self_id`.
pub fn split_range<'a, I>(self_id: NodeId, task: &BroadcastTask, connections: I, space: AddressSpace) -> Vec<(NodeId, RingRange)>
where
    I: IntoIterator<Item = &'a NodeId>,
{
    let mut kids: Vec<NodeId> = connections
        .into_iter()
        .copied()
        .filter(|c| *c != self_id && !task.exclude.contains(c) && in_range(*c, &task.range, space))
        .collect();
    kids.sort_by_key(|c| clockwise_distance(task.range.start, *c, space));
    kids.dedup();
    let mut out = Vec::with_capacity(kids.len());
    for (i, b) in kids.iter().enumerate() {
        let range = match kids.get(i + 1) {
            Some(next) => RingRange::half_open(*b, *next),
            None => RingRange::new(*b, task.range.end, task.range.end_inclusive),
        };
        out.push((*b, range));
    }
    out
}

/// Task covering the whole ring, from `origin` to the address just before it.
pub fn full_broadcast(origin: NodeId, payload: Vec<u8>, exclude: BTreeSet<NodeId>, space: AddressSpace) -> BroadcastTask {
    let end = space.sub(origin, ethnum::U256::ONE);
    BroadcastTask {
        range: RingRange::closed(origin, end),
        payload,
        origin,
        exclude,
        hop_depth: 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Delivery {
    pub node: NodeId,
    pub from: NodeId,
    pub at: Time,
    pub depth: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BroadcastTrace {
    pub started_at: Time,
    pub deliveries: Vec<Delivery>,
    pub messages: u64,
    pub bytes: u64,
    /// Nodes that received more than one copy.
    pub duplicates: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BroadcastMetrics {
    pub completion_time: Time,
    pub messages: u64,
    pub bytes: u64,
    pub reached: BTreeSet<NodeId>,
    pub max_depth: u32,
}

pub fn broadcast_metrics(trace: &BroadcastTrace) -> BroadcastMetrics {
    let last = trace.deliveries.iter().map(|d| d.at).max().unwrap_or(trace.started_at);
    BroadcastMetrics {
        completion_time: last - trace.started_at,
        messages: trace.messages,
        bytes: trace.bytes,
        reached: trace.deliveries.iter().map(|d| d.node).collect(),
        max_depth: trace.deliveries.iter().map(|d| d.depth).max().unwrap_or(0),
    }
}

/// Runs a broadcast over a frozen topology without a full simulator.
/// `links` lists a node's connections, `one_way` gives per-link latency,
/// and each message costs `message_bytes`.
pub fn simulate_broadcast<L, F>(
    links: L,
    task: BroadcastTask,
    message_bytes: u64,
    start: Time,
    one_way: F,
    space: AddressSpace,
) -> BroadcastTrace
where
    L: Fn(NodeId) -> Vec<NodeId>,
    F: Fn(NodeId, NodeId) -> Time,
{
    let mut trace = BroadcastTrace { started_at: start, ..Default::default() };
    let mut seen: BTreeSet<NodeId> = BTreeSet::new();
    seen.insert(task.origin);
    let mut queue = VecDeque::new();
    queue.push_back((task.origin, task, start));
    while let Some((node, task, at)) = queue.pop_front() {
        let conns = links(node);
        for (child, range) in split_range(node, &task, &conns, space) {
            let arrive = at + one_way(node, child);
            trace.messages += 1;
            trace.bytes += message_bytes;
            let sub = task.child(range);
            if !seen.insert(child) {
                trace.duplicates.push(child);
                continue;
            }
            trace.deliveries.push(Delivery { node: child, from: node, at: arrive, depth: sub.hop_depth });
            queue.push_back((child, sub, arrive));
        }
    }
    trace
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn lookup(m: &BTreeMap<NodeId, BTreeSet<NodeId>>) -> impl Fn(NodeId) -> Vec<NodeId> + '_ {
        |n| m.get(&n).map(|s| s.iter().copied().collect()).unwrap_or_default()
    }

    fn s8() -> AddressSpace {
        AddressSpace::new(8).unwrap()
    }

    fn task(s: AddressSpace, exclude: &[u128]) -> BroadcastTask {
        BroadcastTask {
            range: RingRange::closed(s.id(0), s.id(255)),
            payload: vec![],
            origin: s.id(0),
            exclude: exclude.iter().map(|x| s.id(*x)).collect(),
            hop_depth: 0,
        }
    }

    #[test]
    fn split_examples() {
        let s = s8();
        let conns = [s.id(64), s.id(128), s.id(192)];
        assert_eq!(
            split_range(s.id(0), &task(s, &[]), &conns, s),
            vec![
                (s.id(64), RingRange::half_open(s.id(64), s.id(128))),
                (s.id(128), RingRange::half_open(s.id(128), s.id(192))),
                (s.id(192), RingRange::closed(s.id(192), s.id(255))),
            ]
        );
        assert!(split_range(s.id(0), &task(s, &[]), &[], s).is_empty());
        assert_eq!(
            split_range(s.id(0), &task(s, &[128]), &conns, s),
            vec![
                (s.id(64), RingRange::half_open(s.id(64), s.id(192))),
                (s.id(192), RingRange::closed(s.id(192), s.id(255))),
            ]
        );
    }

    #[test]
    fn full_range_ends_before_origin() {
        let s = s8();
        let t = full_broadcast(s.id(5), vec![], BTreeSet::new(), s);
        assert_eq!(t.range, RingRange::closed(s.id(5), s.id(4)));
        let t = full_broadcast(s.id(0), vec![], BTreeSet::new(), s);
        assert_eq!(t.range.end, s.id(255));
    }

    fn complete(s: AddressSpace, nodes: &[u128]) -> BTreeMap<NodeId, BTreeSet<NodeId>> {
        nodes
            .iter()
            .map(|a| (s.id(*a), nodes.iter().filter(|b| *b != a).map(|b| s.id(*b)).collect()))
            .collect()
    }

    #[test]
    fn fully_connected_single_hop() {
        let s = s8();
        let nodes = [0, 30, 60, 90, 120, 150, 180, 210];
        let links = complete(s, &nodes);
        let t = full_broadcast(s.id(0), vec![0; 300], BTreeSet::new(), s);
        let trace = simulate_broadcast(lookup(&links), t, 360, 0, |_, _| 50, s);
        let m = broadcast_metrics(&trace);
        assert_eq!(m.messages, 7);
        assert_eq!(m.completion_time, 50);
        assert_eq!(m.bytes, 7 * 360);
        assert_eq!(m.reached.len(), 7);
        assert!(trace.duplicates.is_empty());
    }

    #[test]
    fn two_nodes_one_message() {
        let s = s8();
        let links = complete(s, &[3, 77]);
        let t = full_broadcast(s.id(77), vec![], BTreeSet::new(), s);
        assert_eq!(simulate_broadcast(lookup(&links), t, 1, 0, |_, _| 1, s).messages, 1);
    }

    #[test]
    fn everyone_excluded_sends_nothing() {
        let s = s8();
        let links = complete(s, &[0, 50, 100]);
        let t = full_broadcast(s.id(0), vec![], [s.id(50), s.id(100)].into(), s);
        assert_eq!(simulate_broadcast(lookup(&links), t, 1, 0, |_, _| 1, s).messages, 0);
    }

    #[test]
    fn ring_only_is_a_chain() {
        // Successor/predecessor links only: the broadcast walks the ring.
        let s = s8();
        let nodes: Vec<u128> = (0..8).map(|i| i * 32).collect();
        let mut links = BTreeMap::new();
        for (i, a) in nodes.iter().enumerate() {
            let succ = nodes[(i + 1) % 8];
            let pred = nodes[(i + 7) % 8];
            links.insert(s.id(*a), [s.id(succ), s.id(pred)].into_iter().collect::<BTreeSet<_>>());
        }
        let t = full_broadcast(s.id(0), vec![], BTreeSet::new(), s);
        let trace = simulate_broadcast(lookup(&links), t, 1, 0, |_, _| 10, s);
        let m = broadcast_metrics(&trace);
        assert_eq!(m.messages, 7);
        assert_eq!(m.reached.len(), 7);
        assert!(m.max_depth >= 4);
    }
}
