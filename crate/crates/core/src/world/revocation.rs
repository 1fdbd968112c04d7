//! Pushing revocation notices through the private overlay, either by
//! bounded broadcast or by DHT lookup plus unicast to subscribers.

use std::collections::BTreeSet;

use crate::broadcast::{full_broadcast, split_range, BroadcastTask};
use crate::dht::{DhtEntry, DhtKey};
use crate::error::{Error, Result};
use crate::overlay::ConnectionKind;
use crate::private::revocation_key;
use crate::ring::NodeId;
use crate::security::{RevocationNotice, Token, REVOCATION_NOTICE_BYTES};
use crate::sim::{Time, TrafficTag};

use super::routing::{Body, GetMode, Pending};
use super::{Msg, Overlay, ProcId, World};

const NOTICE_TAG: u8 = b'N';
const SUBSCRIBER_TAG: u8 = b'S';

impl World {
    fn encode_notice(&self, n: &RevocationNotice) -> Vec<u8> {
        let mut out = vec![NOTICE_TAG];
        out.extend(n.signature.as_bytes());
        out.extend(n.revoked_at.to_be_bytes());
        out.extend(n.user.as_bytes());
        out.resize(out.len().max(REVOCATION_NOTICE_BYTES as usize), 0);
        out
    }

    pub(super) fn decode_notice(&self, bytes: &[u8]) -> Option<RevocationNotice> {
        if bytes.len() < 25 || bytes[0] != NOTICE_TAG {
            return None;
        }
        let sig: [u8; 16] = bytes[1..17].try_into().ok()?;
        let at = Time::from_be_bytes(bytes[17..25].try_into().ok()?);
        let user_bytes: Vec<u8> = bytes[25..].iter().copied().take_while(|b| *b != 0).collect();
        Some(RevocationNotice {
            user: String::from_utf8(user_bytes).ok()?,
            group: self.cfg.group.clone(),
            revoked_at: at,
            signature: Token::from_bytes(sig),
        })
    }

    fn procs_of_user(&self, user: &str) -> Vec<ProcId> {
        self.procs().filter(|(_, p)| p.overlay == Overlay::Private && p.user == user).map(|(i, _)| i).collect()
    }

    /// User owning the private process at the other end of a link.
    fn link_user(&self, p: ProcId, peer: NodeId) -> Option<String> {
        let c = self.procs[p.idx()].conns.get(&peer)?;
        Some(match &c.peer_cert {
            Some(cert) => cert.user.clone(),
            None => self.procs[c.peer_proc.idx()].user.clone(),
        })
    }

    /// Records the notice locally and drops links to the revoked user.
    pub(super) fn apply_notice(&mut self, p: ProcId, n: &RevocationNotice) {
        if !self.ca.verifier().notice_valid(n) {
            return;
        }
        let now = self.now();
        self.notice_received.entry(p).or_insert(now);
        self.procs[p.idx()].view.apply(n);
        let doomed: Vec<NodeId> = self.procs[p.idx()]
            .conns
            .keys()
            .copied()
            .filter(|k| self.link_user(p, *k).as_deref() == Some(n.user.as_str()))
            .collect();
        for d in doomed {
            self.close_link(p, d);
        }
    }

    fn forward_broadcast(&mut self, p: ProcId, task: &BroadcastTask, notice: &RevocationNotice) {
        let me = self.procs[p.idx()].id;
        let links: Vec<NodeId> = self.established(p).into_iter().collect();
        for (child, range) in split_range(me, task, &links, self.space) {
            let msg = Msg::Broadcast { task: task.child(range), notice: notice.clone() };
            self.send_link(p, child, msg);
        }
    }

    pub(super) fn on_broadcast(&mut self, p: ProcId, _from: ProcId, task: BroadcastTask, notice: RevocationNotice) {
        if !self.procs[p.idx()].seen_notices.insert(notice.signature) {
            let id = self.procs[p.idx()].id;
            self.violations.push(format!("duplicate broadcast delivery at {id}"));
            return;
        }
        self.forward_broadcast(p, &task, &notice);
        self.apply_notice(p, &notice);
    }

    /// Revokes `user` at the CA and floods the notice from `agent` over
    /// the private overlay, skipping the revoked user's nodes.
    pub fn revoke_broadcast(&mut self, agent: ProcId, user: &str) -> Result<RevocationNotice> {
        let now = self.now();
        let notice = self.ca.revoke_user(user, now)?;
        let exclude: BTreeSet<NodeId> = self.procs_of_user(user).iter().map(|p| self.procs[p.idx()].id).collect();
        let me = self.procs[agent.idx()].id;
        self.procs[agent.idx()].seen_notices.insert(notice.signature);
        let task = full_broadcast(me, Vec::new(), exclude, self.space);
        self.forward_broadcast(agent, &task, &notice);
        self.apply_notice(agent, &notice);
        Ok(notice)
    }

    /// Revokes `user` at the CA, stores the notice at each revoked node's
    /// revocation key, then unicasts it to that key's subscribers.
    pub fn revoke_dht(&mut self, agent: ProcId, user: &str) -> Result<RevocationNotice> {
        let public = self.procs[agent.idx()].partner.ok_or(Error::Config("agent has no public partner".into()))?;
        let now = self.now();
        let notice = self.ca.revoke_user(user, now)?;
        self.apply_notice(agent, &notice);
        let value = self.encode_notice(&notice);
        let inserter = self.procs[public.idx()].id;
        for target in self.procs_of_user(user) {
            let key = revocation_key(self.procs[target.idx()].id, self.space);
            let entry = DhtEntry { key, value: value.clone(), lease_expiry: now + self.cfg.subscription_ttl, inserter };
            self.start_request(
                public,
                key,
                Body::Put(entry),
                TrafficTag::Revocation,
                Pending::RevokePut { agent, key, notice: notice.clone() },
            );
        }
        Ok(notice)
    }

    pub(super) fn revoke_fetch(&mut self, agent: ProcId, key: DhtKey, notice: RevocationNotice) {
        let Some(public) = self.procs[agent.idx()].partner else { return };
        self.start_request(
            public,
            key,
            Body::Get { key, mode: GetMode::Primary },
            TrafficTag::Revocation,
            Pending::RevokeGet { agent, notice },
        );
    }

    pub(super) fn revoke_notify(&mut self, agent: ProcId, notice: RevocationNotice, values: Vec<Vec<u8>>) {
        let w = self.space.id_bytes();
        let subs: BTreeSet<NodeId> = values
            .iter()
            .filter(|v| v.len() == 1 + w && v[0] == SUBSCRIBER_TAG)
            .map(|v| NodeId::from_bytes(&v[1..], self.space))
            .collect();
        for s in subs {
            self.fire(agent, s, Body::Notice(notice.clone()), TrafficTag::Revocation);
        }
    }

    /// Private process `p` asks to hear about revocation of `peer`.
    pub(super) fn subscribe(&mut self, p: ProcId, peer: NodeId) {
        let Some(public) = self.procs[p.idx()].partner else { return };
        let key = revocation_key(peer, self.space);
        let mut value = vec![SUBSCRIBER_TAG];
        value.extend(self.procs[p.idx()].id.to_bytes(self.space));
        let inserter = self.procs[public.idx()].id;
        let entry = DhtEntry { key, value, lease_expiry: self.now() + self.cfg.subscription_ttl, inserter };
        self.start_request(public, key, Body::Put(entry), TrafficTag::Dht, Pending::Fire);
    }

    /// Every live private process subscribes to each of its link partners.
    pub fn subscribe_all(&mut self) {
        let live: Vec<ProcId> = self.live[Overlay::Private.idx()].values().copied().collect();
        for p in live {
            for peer in self.established(p) {
                self.subscribe(p, peer);
            }
        }
    }

    /// `(messages, bytes)` of revocation traffic, one count per overlay hop.
    pub fn revocation_traffic(&self) -> (u64, u64) {
        self.revocation_traffic
    }

    pub fn reset_revocation_traffic(&mut self) {
        self.revocation_traffic = (0, 0);
    }

    /// Makes every process of `user` try to link to every other live
    /// private process. Returns the time the attempts began.
    pub fn probe_revoked(&mut self, user: &str) -> Time {
        let now = self.now();
        let revoked = self.procs_of_user(user);
        let targets: Vec<(NodeId, ProcId)> = self.live[Overlay::Private.idx()]
            .iter()
            .filter(|(_, p)| !revoked.contains(p))
            .map(|(k, p)| (*k, *p))
            .collect();
        for r in revoked {
            if !self.procs[r.idx()].alive {
                continue;
            }
            self.procs[r.idx()].failures.clear();
            for (id, q) in &targets {
                self.connect(r, *id, *q, ConnectionKind::Neighbor);
            }
        }
        now
    }

    /// Links a non-revoked live process holds to any process of `user`.
    pub fn links_to_user(&self, user: &str) -> usize {
        let revoked: BTreeSet<NodeId> = self.procs_of_user(user).iter().map(|p| self.procs[p.idx()].id).collect();
        self.live[Overlay::Private.idx()]
            .values()
            .filter(|p| self.procs[p.idx()].user != user)
            .map(|p| self.established(*p).intersection(&revoked).count())
            .sum()
    }

    pub(super) fn start_race_check(&mut self, p: ProcId, peer: NodeId, nonce: u64, step: u8) {
        let Some(public) = self.procs[p.idx()].partner else {
            self.continue_handshake(p, peer, nonce, step);
            return;
        };
        let key = revocation_key(peer, self.space);
        let sent = self.start_request(
            public,
            key,
            Body::Get { key, mode: GetMode::Primary },
            TrafficTag::Dht,
            Pending::RaceCheck { proc: p, peer, nonce, step },
        );
        if sent.is_none() {
            self.continue_handshake(p, peer, nonce, step);
        }
    }
}
