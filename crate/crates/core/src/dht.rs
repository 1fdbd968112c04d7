//! Soft-state key/value storage held by public overlay nodes.
//!
//! Routing of puts and gets happens in the simulator; this module owns the
//! per-node store, lease arithmetic, the responsibility rule and the name
//! digest that maps group names and node IDs onto ring keys.

use std::collections::BTreeMap;

use ethnum::U256;

use crate::ring::{clockwise_distance, closest_to, AddressSpace, NodeId};
use crate::sim::Time;

/// Largest value a single entry may carry.
pub const MAX_VALUE_BYTES: usize = 1024;

/// Default replication: the primary plus one replica per side.
pub const REPLICATION: usize = 3;

pub type DhtKey = NodeId;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DhtEntry {
    pub key: DhtKey,
    pub value: Vec<u8>,
    pub lease_expiry: Time,
    pub inserter: NodeId,
}

impl DhtEntry {
    pub fn is_expired(&self, now: Time) -> bool {
        now >= self.lease_expiry
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PutOutcome {
    Inserted,
    Refreshed,
    Rejected,
}

/// Entries held by one node. A key maps to a set of values.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DhtStore {
    entries: BTreeMap<DhtKey, Vec<DhtEntry>>,
}

impl DhtStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores an entry, or extends the lease of an identical
    /// `(key, value, inserter)` entry.
    pub fn put(&mut self, entry: DhtEntry, now: Time) -> PutOutcome {
        if entry.value.len() > MAX_VALUE_BYTES {
            return PutOutcome::Rejected;
        }
        let slot = self.entries.entry(entry.key).or_default();
        slot.retain(|e| !e.is_expired(now));
        if let Some(existing) = slot
            .iter_mut()
            .find(|e| e.value == entry.value && e.inserter == entry.inserter)
        {
            existing.lease_expiry = existing.lease_expiry.max(entry.lease_expiry);
            return PutOutcome::Refreshed;
        }
        slot.push(entry);
        PutOutcome::Inserted
    }

    /// Unexpired values at `key`, in insertion order.
    pub fn get(&self, key: DhtKey, now: Time) -> Vec<Vec<u8>> {
        self.entries
            .get(&key)
            .map(|v| v.iter().filter(|e| !e.is_expired(now)).map(|e| e.value.clone()).collect())
            .unwrap_or_default()
    }

    /// Drops expired entries and returns how many went.
    pub fn purge(&mut self, now: Time) -> usize {
        let mut removed = 0;
        self.entries.retain(|_, v| {
            let before = v.len();
            v.retain(|e| !e.is_expired(now));
            removed += before - v.len();
            !v.is_empty()
        });
        removed
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &DhtEntry> {
        self.entries.values().flatten()
    }

    pub fn keys(&self) -> impl Iterator<Item = DhtKey> + '_ {
        self.entries.keys().copied()
    }

    pub fn remove_key(&mut self, key: DhtKey) -> Vec<DhtEntry> {
        self.entries.remove(&key).unwrap_or_default()
    }
}

/// Nodes that should hold `key`: the closest node plus `(replication - 1)`
/// ring neighbours of it, alternating successor then predecessor.
pub fn responsible_nodes(key: DhtKey, nodes: &[NodeId], replication: usize, space: AddressSpace) -> Vec<NodeId> {
    let Ok(primary) = closest_to(key, nodes.iter().copied(), space) else {
        return Vec::new();
    };
    let mut sorted: Vec<NodeId> = nodes.to_vec();
    sorted.sort_by_key(|n| clockwise_distance(primary, *n, space));
    sorted.dedup();
    let n = sorted.len();
    let mut out = vec![primary];
    let (mut fwd, mut back) = (1usize, 1usize);
    while out.len() < replication.min(n) {
        if out.len() % 2 == 1 {
            out.push(sorted[fwd]);
            fwd += 1;
        } else {
            out.push(sorted[n - back]);
            back += 1;
        }
    }
    out
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(salt: u64, data: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in salt.to_le_bytes().iter().chain(data) {
        h ^= *b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Stable non-cryptographic digest of `data` into the ring: salted FNV-1a
/// 64-bit words concatenated and truncated to the address width.
pub fn key_digest(data: &[u8], space: AddressSpace) -> DhtKey {
    let mut acc = U256::ZERO;
    for salt in 0..3u64 {
        acc = (acc << 64) | U256::from(fnv1a(salt, data));
    }
    space.wrap(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s8() -> AddressSpace {
        AddressSpace::new(8).unwrap()
    }

    fn entry(s: AddressSpace, key: u128, value: &[u8], expiry: Time, inserter: u128) -> DhtEntry {
        DhtEntry { key: s.id(key), value: value.to_vec(), lease_expiry: expiry, inserter: s.id(inserter) }
    }

    #[test]
    fn responsibility_example() {
        let s = s8();
        let nodes = [s.id(10), s.id(100), s.id(200)];
        assert_eq!(
            responsible_nodes(s.id(90), &nodes, 3, s),
            vec![s.id(100), s.id(200), s.id(10)]
        );
        assert_eq!(responsible_nodes(s.id(90), &nodes[..1], 3, s), vec![s.id(10)]);
    }

    #[test]
    fn refresh_does_not_duplicate() {
        let s = s8();
        let mut st = DhtStore::new();
        assert_eq!(st.put(entry(s, 5, b"a", 100, 1), 0), PutOutcome::Inserted);
        assert_eq!(st.put(entry(s, 5, b"a", 200, 1), 50), PutOutcome::Refreshed);
        assert_eq!(st.len(), 1);
        assert_eq!(st.get(s.id(5), 150), vec![b"a".to_vec()]);
    }

    #[test]
    fn zero_ttl_is_expired() {
        let s = s8();
        let mut st = DhtStore::new();
        st.put(entry(s, 5, b"a", 10, 1), 10);
        assert!(st.get(s.id(5), 10).is_empty());
    }

    #[test]
    fn multi_value_and_expiry() {
        let s = s8();
        let mut st = DhtStore::new();
        st.put(entry(s, 5, b"a", 100, 1), 0);
        st.put(entry(s, 5, b"b", 100, 2), 0);
        assert_eq!(st.get(s.id(5), 99).len(), 2);
        assert!(st.get(s.id(5), 100).is_empty());
    }

    #[test]
    fn purge_counts() {
        let s = s8();
        let mut st = DhtStore::new();
        assert_eq!(st.purge(0), 0);
        for (i, exp) in [10, 20, 30, 100, 100].into_iter().enumerate() {
            st.put(entry(s, i as u128, b"x", exp, 1), 0);
        }
        assert_eq!(st.purge(50), 3);
        assert_eq!(st.len(), 2);
    }

    #[test]
    fn oversized_rejected() {
        let s = s8();
        let mut st = DhtStore::new();
        let big = vec![0u8; MAX_VALUE_BYTES + 1];
        assert_eq!(st.put(entry(s, 1, &big, 10, 1), 0), PutOutcome::Rejected);
    }

    #[test]
    fn digest_stable_and_spread() {
        let s = AddressSpace::default();
        assert_eq!(key_digest(b"group-a", s), key_digest(b"group-a", s));
        assert_ne!(key_digest(b"group-a", s), key_digest(b"group-b", s));
        // Truncation keeps the key inside narrow spaces.
        let s8 = s8();
        assert!(s8.contains(key_digest(b"group-a", s8)));
        // High bits are populated at full width.
        assert!(key_digest(b"group-a", s).0 >> 100 != U256::ZERO);
    }
}
