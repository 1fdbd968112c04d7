//! Private overlay bootstrap rules: discovery keys, advertisements, query
//! scheduling, partition checks and relay selection.
//!
//! The simulator drives the join itself; the decisions it makes at each
//! step live here.

use std::collections::BTreeSet;

use crate::dht::{key_digest, DhtKey};
use crate::ring::{clockwise_distance, ring_distance, AddressSpace, NodeId};
use crate::security::Certificate;
use crate::sim::Time;

pub const STATIC_QUERY_PERIOD: Time = 300_000;
pub const DYNAMIC_QUERY_INITIAL: Time = 30_000;
pub const DYNAMIC_QUERY_MAX: Time = 3_600_000;

/// Lease on a discovery advertisement.
pub const ADVERT_TTL: Time = 60_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum JoinPhase {
    PublicConnecting,
    Advertising,
    Discovering,
    PrivateConnecting,
    Connected,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairedNode {
    pub public_id: NodeId,
    pub private_id: NodeId,
    pub group: String,
    pub certificate: Option<Certificate>,
    pub join_phase: JoinPhase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QueryMode {
    Static,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuerySchedule {
    pub mode: QueryMode,
    pub attempt: u32,
}

impl QuerySchedule {
    pub fn new(mode: QueryMode) -> Self {
        Self { mode, attempt: 0 }
    }

    /// Delay before the next query; advances the attempt counter.
    pub fn advance(&mut self) -> Time {
        let d = next_query_delay(*self);
        self.attempt = self.attempt.saturating_add(1);
        d
    }

    pub fn reset(&mut self) {
        self.attempt = 0;
    }
}

pub fn next_query_delay(schedule: QuerySchedule) -> Time {
    match schedule.mode {
        QueryMode::Static => STATIC_QUERY_PERIOD,
        QueryMode::Dynamic => {
            let factor = 1u64.checked_shl(schedule.attempt.min(63)).unwrap_or(u64::MAX);
            DYNAMIC_QUERY_INITIAL.saturating_mul(factor).min(DYNAMIC_QUERY_MAX)
        }
    }
}

/// Public-overlay DHT key where members of `group` advertise.
pub fn discovery_key(group: &str, space: AddressSpace) -> DhtKey {
    key_digest(format!("group:{group}").as_bytes(), space)
}

/// Key where subscribers watching `node` learn of its revocation.
pub fn revocation_key(node: NodeId, space: AddressSpace) -> DhtKey {
    let mut data = b"revoke:".to_vec();
    data.extend(node.0.to_be_bytes());
    key_digest(&data, space)
}

/// Discovery advertisement: the private ID and its public partner, plus
/// opaque transport hints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Advert {
    pub private_id: NodeId,
    pub public_id: NodeId,
}

impl Advert {
    pub fn encode(&self, space: AddressSpace, hint_bytes: usize) -> Vec<u8> {
        let mut out = self.private_id.to_bytes(space);
        out.extend(self.public_id.to_bytes(space));
        out.resize(out.len() + hint_bytes, 0);
        out
    }

    pub fn decode(bytes: &[u8], space: AddressSpace) -> Option<Self> {
        let w = space.id_bytes();
        if bytes.len() < 2 * w {
            return None;
        }
        Some(Self {
            private_id: NodeId::from_bytes(&bytes[..w], space),
            public_id: NodeId::from_bytes(&bytes[w..2 * w], space),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionAction {
    NoAction,
    Connect(NodeId),
}

/// Looks for a discovered peer closer than the nearest current link on
/// either side of `self_id`; returns the closest such peer.
pub fn partition_check<'a, I, J>(self_id: NodeId, neighbors: I, dht_result: J, space: AddressSpace) -> PartitionAction
where
    I: IntoIterator<Item = &'a NodeId>,
    J: IntoIterator<Item = &'a NodeId>,
{
    let links: BTreeSet<NodeId> = neighbors.into_iter().copied().collect();
    let nearest_cw = links.iter().map(|n| clockwise_distance(self_id, *n, space)).min();
    let nearest_ccw = links.iter().map(|n| clockwise_distance(*n, self_id, space)).min();
    dht_result
        .into_iter()
        .copied()
        .filter(|p| *p != self_id && !links.contains(p))
        .filter(|p| {
            let cw = clockwise_distance(self_id, *p, space);
            let ccw = clockwise_distance(*p, self_id, space);
            nearest_cw.is_none_or(|d| cw < d) || nearest_ccw.is_none_or(|d| ccw < d)
        })
        .min_by_key(|p| (ring_distance(self_id, *p, space), *p))
        .map_or(PartitionAction::NoAction, PartitionAction::Connect)
}

/// A potential relay and the latency of each leg, `None` when that leg
/// cannot be formed directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelayCandidate {
    pub via: NodeId,
    /// 0 for private-overlay neighbours, 1 for neighbours of the public partners.
    pub tier: u8,
    pub leg_a: Option<Time>,
    pub leg_b: Option<Time>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelayPath {
    pub endpoint_a: NodeId,
    pub endpoint_b: NodeId,
    pub via: NodeId,
    pub leg_latencies: (Time, Time),
}

impl RelayPath {
    pub fn latency(&self) -> Time {
        self.leg_latencies.0 + self.leg_latencies.1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkPlan {
    Direct,
    Relay(RelayPath),
    /// Tunnel over the public overlay, treated as one link.
    PublicRoute,
    Impossible,
}

/// Picks how two private nodes should link: directly if their NATs allow,
/// else through the best two-hop relay, else over the public overlay.
pub fn establish_relay(
    a: NodeId,
    b: NodeId,
    direct_ok: bool,
    candidates: &[RelayCandidate],
    public_route_available: bool,
) -> LinkPlan {
    if direct_ok {
        return LinkPlan::Direct;
    }
    let best = candidates
        .iter()
        .filter(|c| c.via != a && c.via != b)
        .filter_map(|c| Some((c.tier, c.leg_a? + c.leg_b?, c.via, (c.leg_a?, c.leg_b?))))
        .min();
    match best {
        Some((_, _, via, legs)) => LinkPlan::Relay(RelayPath { endpoint_a: a, endpoint_b: b, via, leg_latencies: legs }),
        None if public_route_available => LinkPlan::PublicRoute,
        None => LinkPlan::Impossible,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s8() -> AddressSpace {
        AddressSpace::new(8).unwrap()
    }

    #[test]
    fn query_delays() {
        let st = QuerySchedule { mode: QueryMode::Static, attempt: 9 };
        assert_eq!(next_query_delay(st), 300_000);
        let d = |a| next_query_delay(QuerySchedule { mode: QueryMode::Dynamic, attempt: a });
        assert_eq!(d(0), 30_000);
        assert_eq!(d(6), 1_920_000);
        assert_eq!(d(7), 3_600_000);
        assert_eq!(d(100), 3_600_000);
    }

    #[test]
    fn schedule_advance_and_reset() {
        let mut q = QuerySchedule::new(QueryMode::Dynamic);
        assert_eq!(q.advance(), 30_000);
        assert_eq!(q.advance(), 60_000);
        q.reset();
        assert_eq!(q.advance(), 30_000);
    }

    #[test]
    fn keys_are_stable_and_distinct() {
        let s = AddressSpace::default();
        assert_eq!(discovery_key("a", s), discovery_key("a", s));
        assert_ne!(discovery_key("a", s), discovery_key("b", s));
        assert_ne!(revocation_key(s.id(1), s), revocation_key(s.id(2), s));
    }

    #[test]
    fn advert_round_trip() {
        let s = AddressSpace::default();
        let a = Advert { private_id: s.id(12345), public_id: s.id(999) };
        let bytes = a.encode(s, 320);
        assert_eq!(bytes.len(), 40 + 320);
        assert_eq!(Advert::decode(&bytes, s), Some(a));
        assert_eq!(Advert::decode(&bytes[..10], s), None);
    }

    #[test]
    fn partition_check_cases() {
        let s = s8();
        let n: BTreeSet<NodeId> = [s.id(10), s.id(250)].into();
        let far: Vec<NodeId> = vec![s.id(10), s.id(100), s.id(0)];
        assert_eq!(partition_check(s.id(0), &n, &far, s), PartitionAction::NoAction);
        let near = vec![s.id(5), s.id(100)];
        assert_eq!(partition_check(s.id(0), &n, &near, s), PartitionAction::Connect(s.id(5)));
        let ccw = vec![s.id(253)];
        assert_eq!(partition_check(s.id(0), &n, &ccw, s), PartitionAction::Connect(s.id(253)));
        assert_eq!(partition_check(s.id(0), &BTreeSet::new(), &[s.id(0)], s), PartitionAction::NoAction);
    }

    #[test]
    fn relay_selection() {
        let s = s8();
        let (a, b) = (s.id(1), s.id(2));
        let c = RelayCandidate { via: s.id(50), tier: 1, leg_a: Some(40), leg_b: Some(30) };
        let d = RelayCandidate { via: s.id(60), tier: 1, leg_a: Some(10), leg_b: None };
        match establish_relay(a, b, false, &[c, d], true) {
            LinkPlan::Relay(p) => {
                assert_eq!(p.via, s.id(50));
                assert_eq!(p.latency(), 70);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(establish_relay(a, b, true, &[c], true), LinkPlan::Direct);
        assert_eq!(establish_relay(a, b, false, &[d], true), LinkPlan::PublicRoute);
        assert_eq!(establish_relay(a, b, false, &[], false), LinkPlan::Impossible);
        // Private neighbours win over public ones; latency then ID break ties.
        let p = RelayCandidate { via: s.id(90), tier: 0, leg_a: Some(100), leg_b: Some(100) };
        let q = RelayCandidate { via: s.id(80), tier: 0, leg_a: Some(100), leg_b: Some(100) };
        match establish_relay(a, b, false, &[c, p, q], true) {
            LinkPlan::Relay(r) => assert_eq!(r.via, s.id(80)),
            other => panic!("{other:?}"),
        }
    }
}
