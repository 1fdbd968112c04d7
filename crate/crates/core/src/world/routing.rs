//! Greedy message routing, request/reply bookkeeping and the DHT.

use std::collections::BTreeSet;

use crate::dht::{responsible_nodes, DhtEntry, DhtKey, PutOutcome, REPLICATION};
use crate::overlay::{ConnectionKind, MessageSizes};
use crate::ring::{closeness_cmp, next_greedy_hop, Hop, NodeId};
use crate::security::RevocationNotice;
use crate::sim::{Time, TrafficTag};

use super::{Ev, Msg, ProcId, World};

/// Which replica a get asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GetMode {
    Primary,
    Successor,
    Predecessor,
}

impl GetMode {
    fn next(self) -> Option<GetMode> {
        match self {
            GetMode::Primary => Some(GetMode::Successor),
            GetMode::Successor => Some(GetMode::Predecessor),
            GetMode::Predecessor => None,
        }
    }
}

/// Result of a scripted DHT operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpResult {
    Stored,
    Values(Vec<Vec<u8>>),
    Failed,
}

#[derive(Debug, Clone)]
pub(crate) enum Body {
    Ctm { kind: ConnectionKind, requester: (NodeId, ProcId) },
    Put(DhtEntry),
    Get { key: DhtKey, mode: GetMode },
    RelayInfo { target_proc: ProcId },
    Notice(RevocationNotice),
}

#[derive(Debug, Clone)]
pub(crate) enum ReplyBody {
    Ctm(ConnectionKind, Vec<(NodeId, ProcId)>),
    PutAck(bool),
    Values(Vec<Vec<u8>>),
    RelayInfo { private: Vec<ProcId>, public: Vec<ProcId> },
}

#[derive(Debug, Clone)]
pub(crate) struct Routed {
    pub target: NodeId,
    pub origin: ProcId,
    /// Overlay hops so far, origin first.
    pub path: Vec<ProcId>,
    pub exclude_origin: bool,
    /// Link the origin must use for the first hop, if still up.
    pub first_hop: Option<NodeId>,
    pub req: u64,
    pub tag: TrafficTag,
    pub body: Body,
    pub redirected: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct Reply {
    pub req: u64,
    /// Remaining hops back to the origin, nearest first.
    pub back: Vec<ProcId>,
    pub tag: TrafficTag,
    pub body: ReplyBody,
}

fn entry_size(s: &MessageSizes, value_len: usize) -> u64 {
    s.dht_header + value_len as u64
}

impl Routed {
    pub(crate) fn body_size(&self, s: &MessageSizes) -> u64 {
        match &self.body {
            Body::Ctm { .. } => s.neighbor_entry,
            Body::Put(e) => entry_size(s, e.value.len()),
            Body::Get { .. } => s.dht_header,
            Body::RelayInfo { .. } => s.control,
            Body::Notice(_) => s.revocation_notice,
        }
    }
}

impl Reply {
    pub(crate) fn body_size(&self, s: &MessageSizes) -> u64 {
        match &self.body {
            ReplyBody::Ctm(_, v) => v.len() as u64 * s.neighbor_entry,
            ReplyBody::PutAck(_) => s.control,
            ReplyBody::Values(v) => s.dht_header + v.iter().map(|x| x.len() as u64).sum::<u64>(),
            ReplyBody::RelayInfo { private, public } => (private.len() + public.len()) as u64 * s.neighbor_entry,
        }
    }
}

/// What to do when a request completes or times out.
#[derive(Debug, Clone)]
pub(crate) enum Pending {
    Ctm,
    Shortcut,
    Probe,
    Op(u64),
    RelayInfo { proc: ProcId, peer: NodeId },
    Advert { private: ProcId },
    Discovery { private: ProcId, partition: bool },
    RaceCheck { proc: ProcId, peer: NodeId, nonce: u64, step: u8 },
    RevokePut { agent: ProcId, key: DhtKey, notice: RevocationNotice },
    RevokeGet { agent: ProcId, notice: RevocationNotice },
    Fire,
}

#[derive(Debug, Clone)]
pub(crate) struct PendingReq {
    what: Pending,
    target: NodeId,
    body: Body,
    tag: TrafficTag,
    exclude_origin: bool,
    attempt: u32,
}

impl World {
    pub(super) fn start_request(&mut self, p: ProcId, target: NodeId, body: Body, tag: TrafficTag, what: Pending) -> Option<u64> {
        self.start_request_opts(p, target, body, tag, what, false, None)
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn start_request_opts(
        &mut self,
        p: ProcId,
        target: NodeId,
        body: Body,
        tag: TrafficTag,
        what: Pending,
        exclude_origin: bool,
        first_hop: Option<NodeId>,
    ) -> Option<u64> {
        if !self.procs[p.idx()].alive {
            return None;
        }
        let req = self.fresh_req();
        let pending = PendingReq { what, target, body: body.clone(), tag, exclude_origin, attempt: 0 };
        self.procs[p.idx()].pending.insert(req, pending);
        self.kernel.schedule(self.cfg.request_timeout, Ev::RequestTimeout { proc: p, req });
        let r = Routed { target, origin: p, path: vec![p], exclude_origin, first_hop, req, tag, body, redirected: false };
        self.route_step(p, r);
        Some(req)
    }

    /// Established links usable for forwarding. Bootstrap links of nodes
    /// still joining are left out unless `any_kind`.
    pub(super) fn established_links(&self, p: ProcId, exclude: Option<NodeId>, any_kind: bool) -> Vec<NodeId> {
        self.procs[p.idx()]
            .conns
            .iter()
            .filter(|(k, c)| c.is_established() && Some(**k) != exclude)
            .filter(|(_, c)| any_kind || c.kind != ConnectionKind::Bootstrap)
            .map(|(k, _)| *k)
            .collect()
    }

    fn route_step(&mut self, p: ProcId, mut r: Routed) {
        if r.path.len() > self.cfg.max_route_hops {
            return;
        }
        let me = self.procs[p.idx()].id;
        let origin_id = self.procs[r.origin.idx()].id;
        let forced = r.first_hop.filter(|n| self.procs[p.idx()].conns.get(n).is_some_and(|c| c.is_established()));
        let next = if let (Some(n), true) = (forced, p == r.origin && r.path.len() == 1) {
            Hop::Forward(n)
        } else if p == r.origin && r.exclude_origin && r.path.len() == 1 {
            let links = self.established_links(p, None, true);
            match links.into_iter().min_by(|a, b| closeness_cmp(r.target, *a, *b, self.space)) {
                Some(n) => Hop::Forward(n),
                None => return,
            }
        } else {
            let exclude = r.exclude_origin.then_some(origin_id);
            let links = self.established_links(p, exclude, false);
            if r.exclude_origin && me == origin_id {
                return;
            }
            next_greedy_hop(me, links.iter().copied(), r.target, self.space)
        };
        match next {
            Hop::Forward(n) => {
                let q = self.procs[p.idx()].conns[&n].peer_proc;
                r.path.push(q);
                self.send_link(p, n, Msg::Routed(Box::new(r)));
            }
            Hop::DeliverHere => self.deliver_routed(p, r),
        }
    }

    pub(super) fn on_routed(&mut self, p: ProcId, r: Routed) {
        if r.redirected {
            self.deliver_routed(p, r);
        } else {
            self.route_step(p, r);
        }
    }

    fn reply(&mut self, p: ProcId, r: &Routed, body: ReplyBody) {
        let mut back: Vec<ProcId> = r.path.iter().rev().skip(1).copied().collect();
        if back.is_empty() {
            self.finish_request(p, r.req, body);
            return;
        }
        let next = back.remove(0);
        let id = self.procs[next.idx()].id;
        self.send_link(p, id, Msg::Reply(Box::new(Reply { req: r.req, back, tag: r.tag, body })));
    }

    pub(super) fn on_reply(&mut self, p: ProcId, mut r: Reply) {
        if r.back.is_empty() {
            self.finish_request(p, r.req, r.body);
            return;
        }
        let next = r.back.remove(0);
        let id = self.procs[next.idx()].id;
        self.send_link(p, id, Msg::Reply(Box::new(r)));
    }

    fn deliver_routed(&mut self, p: ProcId, mut r: Routed) {
        let now = self.now();
        match r.body.clone() {
            Body::Ctm { kind, requester } => {
                let peers = self.ctm_answer(p, requester);
                self.reply(p, &r, ReplyBody::Ctm(kind, peers));
            }
            Body::Put(entry) => {
                let outcome = self.procs[p.idx()].dht.put(entry.clone(), now);
                if outcome != PutOutcome::Rejected {
                    for cw in [true, false] {
                        if let Some((n, _)) = self.nearest_link(p, cw) {
                            self.send_link(p, n, Msg::Replicate(entry.clone()));
                        }
                    }
                }
                self.reply(p, &r, ReplyBody::PutAck(outcome != PutOutcome::Rejected));
            }
            Body::Get { key, mode } => {
                let redirect = match mode {
                    GetMode::Primary => None,
                    GetMode::Successor => Some(true),
                    GetMode::Predecessor => Some(false),
                };
                match redirect {
                    Some(cw) if !r.redirected => {
                        let Some((n, q)) = self.nearest_link(p, cw) else { return };
                        r.redirected = true;
                        r.path.push(q);
                        self.send_link(p, n, Msg::Routed(Box::new(r)));
                    }
                    _ => {
                        let values = self.procs[p.idx()].dht.get(key, now);
                        self.reply(p, &r, ReplyBody::Values(values));
                    }
                }
            }
            Body::RelayInfo { target_proc } => {
                let body = if target_proc == p {
                    let public = self.procs[p.idx()].conns.values().filter(|c| c.is_established()).map(|c| c.peer_proc).collect();
                    let private = match self.procs[p.idx()].partner {
                        Some(q) => self.procs[q.idx()]
                            .conns
                            .values()
                            .filter(|c| c.is_established() && c.link_path == super::LinkPath::Direct)
                            .map(|c| c.peer_proc)
                            .collect(),
                        None => Vec::new(),
                    };
                    ReplyBody::RelayInfo { private, public }
                } else {
                    ReplyBody::RelayInfo { private: Vec::new(), public: Vec::new() }
                };
                self.reply(p, &r, body);
            }
            Body::Notice(notice) => {
                if self.procs[p.idx()].id == r.target {
                    self.apply_notice(p, &notice);
                }
            }
        }
    }

    pub(super) fn on_replicate(&mut self, p: ProcId, entry: DhtEntry) {
        let now = self.now();
        self.procs[p.idx()].dht.put(entry, now);
    }

    /// Pushes stored entries to newly linked near neighbours that share
    /// responsibility, and drops keys this node no longer covers.
    pub(super) fn rereplicate(&mut self, p: ProcId, added: &[NodeId]) {
        if self.procs[p.idx()].dht.is_empty() {
            return;
        }
        let me = self.procs[p.idx()].id;
        let mut view: Vec<NodeId> = self.procs[p.idx()].last_near.iter().copied().collect();
        view.push(me);
        let added: BTreeSet<NodeId> = added.iter().copied().collect();
        let keys: Vec<DhtKey> = self.procs[p.idx()].dht.keys().collect();
        let settled = self.procs[p.idx()].believes_connected;
        for key in keys {
            let resp = responsible_nodes(key, &view, REPLICATION, self.space);
            if settled && !resp.contains(&me) {
                self.procs[p.idx()].dht.remove_key(key);
                continue;
            }
            let targets: Vec<NodeId> = resp.into_iter().filter(|n| added.contains(n)).collect();
            if targets.is_empty() {
                continue;
            }
            let entries: Vec<DhtEntry> = self.procs[p.idx()].dht.entries().filter(|e| e.key == key).cloned().collect();
            for t in targets {
                for e in &entries {
                    self.send_link(p, t, Msg::Replicate(e.clone()));
                }
            }
        }
    }

    pub(super) fn on_request_timeout(&mut self, p: ProcId, req: u64) {
        let Some(mut pend) = self.procs[p.idx()].pending.remove(&req) else { return };
        let retry_body = match (&pend.body, pend.attempt) {
            (Body::Get { key, mode }, _) => {
                let key = *key;
                mode.next().map(|m| Body::Get { key, mode: m })
            }
            (Body::Put(_), a) if a < 2 => Some(pend.body.clone()),
            _ => None,
        };
        match retry_body {
            Some(body) if self.procs[p.idx()].alive => {
                pend.attempt += 1;
                pend.body = body.clone();
                let (target, tag, ex) = (pend.target, pend.tag, pend.exclude_origin);
                let new_req = self.fresh_req();
                self.procs[p.idx()].pending.insert(new_req, pend);
                self.kernel.schedule(self.cfg.request_timeout, Ev::RequestTimeout { proc: p, req: new_req });
                let r = Routed { target, origin: p, path: vec![p], exclude_origin: ex, first_hop: None, req: new_req, tag, body, redirected: false };
                self.route_step(p, r);
            }
            _ => self.request_failed(p, pend.what),
        }
    }

    fn request_failed(&mut self, p: ProcId, what: Pending) {
        match what {
            Pending::Ctm => {
                self.procs[p.idx()].ctm_pending = None;
                self.kernel.schedule(self.cfg.node.backoff_initial, Ev::Bootstrap { proc: p });
            }
            Pending::Probe => {}
            Pending::Shortcut => {
                let pr = &mut self.procs[p.idx()];
                pr.shortcut_pending = false;
                pr.shortcut_misses += 1;
            }
            Pending::Op(op) => {
                self.ops.insert(op, OpResult::Failed);
            }
            Pending::RelayInfo { proc, peer } => self.relay_info_ready(proc, peer, Vec::new(), Vec::new()),
            Pending::Advert { private } => self.advert_failed(private),
            Pending::Discovery { private, partition } => self.discovery_result(private, Vec::new(), partition),
            // Fail open: a lookup that cannot complete does not block the link.
            Pending::RaceCheck { proc, peer, nonce, step } => self.continue_handshake(proc, peer, nonce, step),
            Pending::RevokePut { .. } | Pending::RevokeGet { .. } | Pending::Fire => {}
        }
    }

    fn finish_request(&mut self, p: ProcId, req: u64, body: ReplyBody) {
        let Some(pend) = self.procs[p.idx()].pending.remove(&req) else { return };
        match (pend.what, body) {
            (Pending::Ctm, ReplyBody::Ctm(kind, peers)) | (Pending::Shortcut, ReplyBody::Ctm(kind, peers)) => {
                self.ctm_reply(p, kind, peers)
            }
            (Pending::Op(op), ReplyBody::PutAck(ok)) => {
                self.ops.insert(op, if ok { OpResult::Stored } else { OpResult::Failed });
            }
            (Pending::Op(op), ReplyBody::Values(v)) => {
                self.ops.insert(op, OpResult::Values(v));
            }
            (Pending::RelayInfo { proc, peer }, ReplyBody::RelayInfo { private, public }) => {
                self.relay_info_ready(proc, peer, private, public)
            }
            (Pending::Probe, ReplyBody::Ctm(_, peers)) => self.probe_reply(p, peers),
            (Pending::Advert { private }, ReplyBody::PutAck(_)) => self.advert_stored(private),
            (Pending::Discovery { private, partition }, ReplyBody::Values(v)) => self.discovery_result(private, v, partition),
            (Pending::RaceCheck { proc, peer, nonce, step }, ReplyBody::Values(v)) => {
                for value in v {
                    if let Some(n) = self.decode_notice(&value) {
                        if self.ca.verifier().notice_valid(&n) {
                            self.procs[proc.idx()].view.apply(&n);
                        }
                    }
                }
                self.continue_handshake(proc, peer, nonce, step);
            }
            (Pending::RevokePut { agent, key, notice }, ReplyBody::PutAck(_)) => self.revoke_fetch(agent, key, notice),
            (Pending::RevokeGet { agent, notice }, ReplyBody::Values(v)) => self.revoke_notify(agent, notice, v),
            _ => {}
        }
    }

    /// Scripted put from a public process; poll [`World::op_result`].
    pub fn dht_put(&mut self, p: ProcId, key: DhtKey, value: Vec<u8>, ttl: Time) -> u64 {
        let op = self.fresh_req();
        let me = self.procs[p.idx()].id;
        let entry = DhtEntry { key, value, lease_expiry: self.now() + ttl, inserter: me };
        if self.start_request(p, key, Body::Put(entry), TrafficTag::Dht, Pending::Op(op)).is_none() {
            self.ops.insert(op, OpResult::Failed);
        }
        op
    }

    /// Scripted get from a public process; poll [`World::op_result`].
    pub fn dht_get(&mut self, p: ProcId, key: DhtKey) -> u64 {
        let op = self.fresh_req();
        if self
            .start_request(p, key, Body::Get { key, mode: GetMode::Primary }, TrafficTag::Dht, Pending::Op(op))
            .is_none()
        {
            self.ops.insert(op, OpResult::Failed);
        }
        op
    }

    /// Proc a message to `target` would be delivered at, following links
    /// of the live overlay from `from`; `None` if routing stalls.
    pub fn route_from(&self, from: ProcId, target: NodeId) -> Option<Vec<ProcId>> {
        let mut path = vec![from];
        let mut cur = from;
        for _ in 0..self.cfg.max_route_hops {
            let pr = &self.procs[cur.idx()];
            let links = self.established_links(cur, None, false);
            match next_greedy_hop(pr.id, links.iter().copied(), target, self.space) {
                Hop::Forward(n) => {
                    cur = pr.conns[&n].peer_proc;
                    path.push(cur);
                }
                Hop::DeliverHere => return Some(path),
            }
        }
        None
    }

    /// Fires a request whose reply nobody waits for.
    pub(super) fn fire(&mut self, p: ProcId, target: NodeId, body: Body, tag: TrafficTag) {
        self.start_request(p, target, body, tag, Pending::Fire);
    }
}

