use std::collections::BTreeSet;

use proptest::prelude::*;
use vpo_core::dht::{responsible_nodes, DhtEntry, DhtStore, PutOutcome, MAX_VALUE_BYTES};
use vpo_core::overlay::{next_backoff, NodeConfig};
use vpo_core::private::{next_query_delay, QueryMode, QuerySchedule, DYNAMIC_QUERY_MAX};
use vpo_core::ring::{closest_to, ring_distance, AddressSpace, NodeId};
use vpo_core::security::{
    verify_peer, Certificate, CookieResponder, Enrollment, GroupCA, RevocationView, SigningPolicy, Token,
};
use vpo_core::sim::{can_connect_directly, NatProfile};

fn s16() -> AddressSpace {
    AddressSpace::new(16).unwrap()
}

fn entry(key: NodeId, value: Vec<u8>, expiry: u64, inserter: u128) -> DhtEntry {
    DhtEntry { key, value, lease_expiry: expiry, inserter: s16().id(inserter) }
}

fn issued(ca: &mut GroupCA, user: &str, node: NodeId) -> Certificate {
    ca.add_member(user, "pw");
    match ca.enroll(user, "pw", node, 7).unwrap() {
        Enrollment::Issued(c) => c,
        Enrollment::Pending(_) => unreachable!("auto-sign policy"),
    }
}

proptest! {
    #[test]
    fn distinct_values_all_returned(values in prop::collection::btree_set(prop::collection::vec(any::<u8>(), 0..40), 1..12)) {
        let s = s16();
        let key = s.id(99);
        let mut store = DhtStore::new();
        for (i, v) in values.iter().enumerate() {
            prop_assert_eq!(store.put(entry(key, v.clone(), 1_000, i as u128), 0), PutOutcome::Inserted);
        }
        let got: BTreeSet<Vec<u8>> = store.get(key, 10).into_iter().collect();
        prop_assert_eq!(got, values.clone());
        prop_assert_eq!(store.get(key, 1_000).len(), 0);
    }

    #[test]
    fn repeated_put_refreshes_lease(ttls in prop::collection::vec(1u64..10_000, 1..10)) {
        let key = s16().id(5);
        let mut store = DhtStore::new();
        let mut now = 0;
        let mut latest = 0;
        for ttl in ttls {
            store.put(entry(key, b"v".to_vec(), now + ttl, 1), now);
            latest = latest.max(now + ttl);
            now += ttl / 2;
            prop_assert_eq!(store.len(), 1);
        }
        prop_assert_eq!(store.get(key, latest - 1).len(), 1);
        prop_assert!(store.get(key, latest).is_empty());
    }

    #[test]
    fn oversize_values_never_stored(extra in 1usize..64) {
        let mut store = DhtStore::new();
        let e = entry(s16().id(1), vec![0; MAX_VALUE_BYTES + extra], 100, 1);
        prop_assert_eq!(store.put(e, 0), PutOutcome::Rejected);
        prop_assert!(store.is_empty());
    }

    #[test]
    fn responsible_set_is_primary_and_its_ring_neighbours(
        nodes in prop::collection::btree_set(0u128..65536, 3..80),
        key in 0u128..65536,
    ) {
        let s = s16();
        let ids: Vec<NodeId> = nodes.iter().map(|v| s.id(*v)).collect();
        let k = s.id(key);
        let got = responsible_nodes(k, &ids, 3, s);
        let primary = closest_to(k, ids.iter().copied(), s).unwrap();
        prop_assert_eq!(got[0], primary);
        let pos = ids.iter().position(|x| *x == primary).unwrap();
        let n = ids.len();
        prop_assert_eq!(got[1], ids[(pos + 1) % n]);
        prop_assert_eq!(got[2], ids[(pos + n - 1) % n]);
        prop_assert!(got.iter().all(|g| ring_distance(*g, k, s) >= ring_distance(primary, k, s)));
    }

    #[test]
    fn backoff_is_monotone_and_capped(initial in 1u64..5_000, max in 1u64..200_000, attempts in 0u32..80) {
        let cfg = NodeConfig { backoff_initial: initial, backoff_max: max, ..NodeConfig::default() };
        let mut prev = 0;
        for a in 0..attempts {
            let d = next_backoff(a, &cfg);
            prop_assert!(d >= prev);
            prop_assert!(d <= max);
            prev = d;
        }
    }

    #[test]
    fn dynamic_query_delay_doubles_to_cap(steps in 1usize..40) {
        let mut q = QuerySchedule::new(QueryMode::Dynamic);
        let mut prev = 0;
        for _ in 0..steps {
            let d = next_query_delay(q);
            prop_assert!(d >= prev && d <= DYNAMIC_QUERY_MAX);
            prop_assert!(prev == 0 || d == (prev * 2).min(DYNAMIC_QUERY_MAX));
            prev = d;
            q.advance();
        }
    }

    #[test]
    fn every_field_mutation_is_rejected(
        which in 0usize..6,
        bump in 1u64..1_000,
        byte in 0usize..16,
        node in 0u128..65536,
    ) {
        let s = s16();
        let mut ca = GroupCA::new("g", 3, SigningPolicy::AutoSign);
        let cert = issued(&mut ca, "alice", s.id(node));
        let view = RevocationView::default();
        let v = ca.verifier();
        prop_assert!(verify_peer(&cert, &v, cert.node_id, &view).is_accept());
        let mut m = cert.clone();
        match which {
            0 => m.node_id = s.add(m.node_id, ethnum::U256::new(bump as u128)),
            1 => m.user.push('x'),
            2 => m.group.push('x'),
            3 => m.serial += bump,
            4 => m.issued_at += bump,
            _ => {
                let mut b = *m.signature.as_bytes();
                b[byte] ^= 1 + (bump % 255) as u8;
                m.signature = Token::from_bytes(b);
            }
        }
        // A forged id must not verify under either the forged or the original id.
        prop_assert!(!verify_peer(&m, &v, m.node_id, &view).is_accept());
        prop_assert!(!verify_peer(&m, &v, cert.node_id, &view).is_accept());
    }

    #[test]
    fn certificate_binds_exactly_one_node(node in 0u128..65536, others in prop::collection::vec(0u128..65536, 1..20)) {
        let s = s16();
        let mut ca = GroupCA::new("g", 1, SigningPolicy::AutoSign);
        let cert = issued(&mut ca, "bob", s.id(node));
        let v = ca.verifier();
        let view = RevocationView::default();
        let accepted: BTreeSet<u128> = others
            .iter()
            .chain(std::iter::once(&node))
            .filter(|o| verify_peer(&cert, &v, s.id(**o), &view).is_accept())
            .copied()
            .collect();
        prop_assert_eq!(accepted, BTreeSet::from([node]));
    }

    #[test]
    fn revoked_user_rejected_for_every_certificate(nodes in prop::collection::vec(0u128..65536, 1..8)) {
        let s = s16();
        let mut ca = GroupCA::new("g", 9, SigningPolicy::AutoSign);
        let certs: Vec<Certificate> = nodes.iter().map(|n| issued(&mut ca, "carol", s.id(*n))).collect();
        let notice = ca.revoke_user("carol", 50).unwrap();
        let mut view = RevocationView::default();
        view.apply(&notice);
        let v = ca.verifier();
        prop_assert!(v.notice_valid(&notice));
        for c in &certs {
            prop_assert!(!verify_peer(c, &v, c.node_id, &view).is_accept());
        }
    }

    #[test]
    fn responder_state_independent_of_hello_count(hellos in 0usize..200, t in 0u64..1_000_000) {
        let mut r = CookieResponder::new(b"secret", 60_000);
        let mut tokens = Vec::new();
        for i in 0..hellos {
            tokens.push(r.on_hello(format!("peer{i}").as_bytes(), t));
        }
        prop_assert_eq!(r.allocated_sessions(), 0);
        if let Some(tok) = tokens.first() {
            prop_assert!(!r.on_echo(b"someone-else", *tok, t));
            prop_assert!(r.on_echo(b"peer0", *tok, t + 59_999));
            prop_assert_eq!(r.allocated_sessions(), 1);
        }
    }
}

#[test]
fn nat_rule_is_total_and_symmetric() {
    let all = [NatProfile::Public, NatProfile::Cone, NatProfile::Symmetric];
    for a in all {
        for b in all {
            assert_eq!(can_connect_directly(a, b), can_connect_directly(b, a));
        }
    }
}
