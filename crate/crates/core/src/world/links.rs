//! Link setup, handshakes, liveness and neighbour maintenance.

use std::collections::{BTreeMap, BTreeSet};

use ethnum::U256;
use rand::Rng;

use crate::overlay::{
    desired_neighbors, next_backoff, plan_maintenance, wants_link, ConnectionKind, ConnectionPhase, LinkView,
    MaintenanceAction,
};
use crate::private::{establish_relay, JoinPhase, LinkPlan, RelayCandidate};
use crate::ring::{clockwise_distance, NodeId};
use crate::security::{cookie, verify_peer, Certificate, Token};
use crate::sim::{can_connect_directly, Time};

use super::routing::{Body, Pending};
use super::{Conn, HandshakeRecord, LinkPath, Msg, Overlay, ProcId, World};

/// Fields of a handshake message.
#[derive(Debug, Clone)]
pub(crate) struct Hello {
    pub nonce: u64,
    pub step: u8,
    pub kind: ConnectionKind,
    pub secured: bool,
    pub cookie: Option<Token>,
    pub cert: Option<Certificate>,
}

impl World {
    fn cookie_secret(&self, p: ProcId) -> Vec<u8> {
        let mut s = self.cfg.seed.to_be_bytes().to_vec();
        s.extend(p.0.to_be_bytes());
        s
    }

    fn hello(&self, nonce: u64, step: u8, kind: ConnectionKind, secured: bool) -> Hello {
        Hello { nonce, step, kind, secured, cookie: None, cert: None }
    }

    fn send_hello(&mut self, path: Vec<ProcId>, h: Hello) {
        let Hello { nonce, step, kind, secured, cookie, cert } = h;
        self.transmit(path, Msg::Hello { nonce, step, kind, secured, cookie, cert });
    }

    /// Sends over an existing link (in any phase).
    pub(super) fn send_link(&mut self, p: ProcId, peer: NodeId, msg: Msg) -> bool {
        match self.procs[p.idx()].conns.get(&peer) {
            Some(c) => {
                let path = c.path.clone();
                self.transmit(path, msg);
                true
            }
            None => false,
        }
    }

    fn in_backoff(&self, p: ProcId, peer: NodeId) -> Option<Time> {
        let now = self.now();
        self.procs[p.idx()]
            .failures
            .get(&peer)
            .and_then(|(_, until)| (now < *until).then(|| *until - now))
    }

    pub(super) fn record_failure(&mut self, p: ProcId, peer: NodeId) {
        let now = self.now();
        let cfg = self.cfg.node;
        let e = self.procs[p.idx()].failures.entry(peer).or_insert((0, now));
        e.1 = now + next_backoff(e.0, &cfg);
        e.0 += 1;
    }

    /// Opens a link to `peer` unless one exists or the peer is backing off.
    pub(super) fn connect(&mut self, p: ProcId, peer: NodeId, peer_proc: ProcId, kind: ConnectionKind) {
        let pr = &self.procs[p.idx()];
        if !pr.alive || peer == pr.id || pr.conns.contains_key(&peer) || self.in_backoff(p, peer).is_some() {
            return;
        }
        let overlay = pr.overlay;
        let secured = overlay == Overlay::Private && self.cfg.security;
        let now = self.now();
        let nonce = self.fresh_nonce();
        let direct = overlay == Overlay::Public || can_connect_directly(self.host_of(p).nat, self.host_of(peer_proc).nat);
        let conn = Conn {
            peer_proc,
            kind,
            phase: if direct { ConnectionPhase::HandshakeInProgress } else { ConnectionPhase::Initiating },
            secured,
            initiator: true,
            nonce,
            path: vec![p, peer_proc],
            link_path: LinkPath::Direct,
            started_at: now,
            established_at: None,
            last_heard: now,
            my_shortcut: kind == ConnectionKind::Shortcut,
            peer_wants: true,
            i_want: true,
            unwanted_since: None,
            peer_cert: None,
        };
        self.procs[p.idx()].known.insert(peer, peer_proc);
        self.procs[p.idx()].conns.insert(peer, conn);
        let timeout = self.cfg.node.handshake_timeout;
        if direct {
            self.send_hello(vec![p, peer_proc], self.hello(nonce, 1, kind, secured));
            self.kernel.schedule(timeout, super::Ev::HandshakeTimeout { proc: p, peer, nonce });
        } else {
            self.request_relay_info(p, peer, peer_proc);
            self.kernel.schedule(timeout + self.cfg.request_timeout, super::Ev::HandshakeTimeout { proc: p, peer, nonce });
        }
    }

    fn request_relay_info(&mut self, p: ProcId, peer: NodeId, peer_proc: ProcId) {
        let (Some(my_pub), Some(their_pub)) = (self.procs[p.idx()].partner, self.procs[peer_proc.idx()].partner) else {
            self.relay_info_ready(p, peer, Vec::new(), Vec::new());
            return;
        };
        let target = self.procs[their_pub.idx()].id;
        self.start_request(
            my_pub,
            target,
            Body::RelayInfo { target_proc: their_pub },
            crate::sim::TrafficTag::Relay,
            Pending::RelayInfo { proc: p, peer },
        );
    }

    /// Chooses a path for a link that cannot be direct, then starts the
    /// handshake over it.
    pub(super) fn relay_info_ready(&mut self, p: ProcId, peer: NodeId, private: Vec<ProcId>, public: Vec<ProcId>) {
        let Some(c) = self.procs[p.idx()].conns.get(&peer) else { return };
        if c.phase != ConnectionPhase::Initiating {
            return;
        }
        let (peer_proc, nonce, kind, secured) = (c.peer_proc, c.nonce, c.kind, c.secured);
        let nat = |w: &World, x: ProcId| w.host_of(x).nat;
        let mut cands = Vec::new();
        for (tier, list) in [(0u8, &private), (1u8, &public)] {
            for v in list {
                if !self.procs[v.idx()].alive || *v == p || *v == peer_proc {
                    continue;
                }
                let leg = |a: ProcId, b: ProcId| can_connect_directly(nat(self, a), nat(self, b)).then(|| self.one_way(a, b));
                cands.push((RelayCandidate { via: self.procs[v.idx()].id, tier, leg_a: leg(p, *v), leg_b: leg(*v, peer_proc) }, *v));
            }
        }
        let by_id: BTreeMap<(u8, NodeId), ProcId> = cands.iter().map(|(c, v)| ((c.tier, c.via), *v)).collect();
        let list: Vec<RelayCandidate> = cands.iter().map(|(c, _)| *c).collect();
        let me = self.procs[p.idx()].id;
        let route = self.public_route_path(p, peer_proc);
        let plan = establish_relay(me, peer, false, &list, route.is_some());
        let (path, link_path) = match plan {
            LinkPlan::Relay(r) => {
                let tier = list.iter().filter(|c| c.via == r.via).map(|c| c.tier).min().unwrap_or(1);
                let via = by_id[&(tier, r.via)];
                (vec![p, via, peer_proc], LinkPath::Relayed { via })
            }
            LinkPlan::PublicRoute => (route.expect("route checked"), LinkPath::PublicRoute),
            LinkPlan::Direct => (vec![p, peer_proc], LinkPath::Direct),
            LinkPlan::Impossible => {
                self.procs[p.idx()].conns.remove(&peer);
                self.handshake_failed(p, peer, kind);
                return;
            }
        };
        let c = self.procs[p.idx()].conns.get_mut(&peer).expect("checked above");
        c.path = path.clone();
        c.link_path = link_path;
        c.phase = ConnectionPhase::HandshakeInProgress;
        self.send_hello(path, self.hello(nonce, 1, kind, secured));
    }

    /// Physical path private `a` -> its public partner -> greedy public
    /// route -> `b`'s public partner -> `b`.
    fn public_route_path(&self, a: ProcId, b: ProcId) -> Option<Vec<ProcId>> {
        let pa = self.procs[a.idx()].partner?;
        let pb = self.procs[b.idx()].partner?;
        let target = self.procs[pb.idx()].id;
        let mut path = vec![a, pa];
        let mut cur = pa;
        for _ in 0..self.cfg.max_route_hops {
            if cur == pb {
                path.push(b);
                return Some(path);
            }
            let pr = &self.procs[cur.idx()];
            let links = self.established_links(cur, None, false);
            match crate::ring::next_greedy_hop(pr.id, links.iter().copied(), target, self.space) {
                crate::ring::Hop::Forward(n) => {
                    cur = pr.conns[&n].peer_proc;
                    path.push(cur);
                }
                crate::ring::Hop::DeliverHere => return None,
            }
        }
        None
    }

    pub(super) fn on_hello(&mut self, to: ProcId, from: ProcId, route: Vec<ProcId>, h: Hello) {
        let from_id = self.procs[from.idx()].id;
        let back: Vec<ProcId> = route.iter().rev().copied().collect();
        let now = self.now();
        match h.step {
            1 | 3 => {
                // Responder side.
                if let Some(c) = self.procs[to.idx()].conns.get(&from_id) {
                    if c.initiator && !c.is_established() && self.procs[to.idx()].id < from_id {
                        // Simultaneous attempt: the smaller ID keeps its own.
                        return;
                    }
                    if h.step == 3 && !c.initiator && c.nonce == h.nonce {
                        return;
                    }
                }
                if h.secured && h.step == 1 {
                    let secret = self.cookie_secret(to);
                    let token = cookie(&secret, &from.0.to_be_bytes(), now, self.cfg.cookie_epoch);
                    let mut reply = self.hello(h.nonce, 2, h.kind, true);
                    reply.cookie = Some(token);
                    self.send_hello(back, reply);
                    return;
                }
                if h.secured {
                    let secret = self.cookie_secret(to);
                    let id = from.0.to_be_bytes();
                    let cur = cookie(&secret, &id, now, self.cfg.cookie_epoch);
                    let prev = cookie(&secret, &id, now.saturating_sub(self.cfg.cookie_epoch), self.cfg.cookie_epoch);
                    if h.cookie != Some(cur) && h.cookie != Some(prev) {
                        return;
                    }
                }
                let had = self.procs[to.idx()].conns.remove(&from_id).is_some_and(|c| c.is_established());
                let link_path = match back.len() {
                    2 => LinkPath::Direct,
                    3 => LinkPath::Relayed { via: back[1] },
                    _ => LinkPath::PublicRoute,
                };
                let conn = Conn {
                    peer_proc: from,
                    kind: h.kind,
                    phase: if h.secured { ConnectionPhase::HandshakeInProgress } else { ConnectionPhase::Established },
                    secured: h.secured,
                    initiator: false,
                    nonce: h.nonce,
                    path: back.clone(),
                    link_path,
                    started_at: now,
                    established_at: (!h.secured).then_some(now),
                    last_heard: now,
                    my_shortcut: false,
                    peer_wants: true,
                    i_want: true,
                    unwanted_since: None,
                    peer_cert: None,
                };
                self.procs[to.idx()].known.insert(from_id, from);
                self.procs[to.idx()].conns.insert(from_id, conn);
                if h.secured {
                    let mut reply = self.hello(h.nonce, 4, h.kind, true);
                    reply.cert = self.procs[to.idx()].cert.clone();
                    self.send_hello(back, reply);
                    let timeout = self.cfg.node.handshake_timeout;
                    self.kernel.schedule(timeout, super::Ev::HandshakeTimeout { proc: to, peer: from_id, nonce: h.nonce });
                    if had {
                        self.links_changed(to);
                    }
                } else {
                    self.send_hello(back, self.hello(h.nonce, 2, h.kind, false));
                    self.handshakes.push(HandshakeRecord { at: now, initiator: from, responder: to, established: true });
                    self.link_up(to, from_id);
                }
            }
            2 | 4 | 6 => {
                let Some(c) = self.procs[to.idx()].conns.get(&from_id) else { return };
                if !c.initiator || c.nonce != h.nonce || c.is_established() {
                    return;
                }
                match (h.step, h.secured) {
                    (2, false) | (6, true) => {
                        self.procs[to.idx()].conns.get_mut(&from_id).expect("present").established_at = Some(now);
                        self.link_up(to, from_id);
                    }
                    (2, true) => {
                        let mut reply = self.hello(h.nonce, 3, h.kind, true);
                        reply.cookie = h.cookie;
                        let path = c.path.clone();
                        self.send_hello(path, reply);
                    }
                    (4, true) => {
                        let Some(cert) = h.cert else { return };
                        if !verify_peer(&cert, &self.ca.verifier(), from_id, &self.procs[to.idx()].view).is_accept() {
                            self.reject(to, from_id, h.nonce);
                            return;
                        }
                        self.procs[to.idx()].conns.get_mut(&from_id).expect("present").peer_cert = Some(cert);
                        if self.cfg.revocation_check_on_connect {
                            self.start_race_check(to, from_id, h.nonce, 5);
                        } else {
                            self.continue_handshake(to, from_id, h.nonce, 5);
                        }
                    }
                    _ => {}
                }
            }
            5 => {
                let Some(c) = self.procs[to.idx()].conns.get(&from_id) else { return };
                if c.initiator || c.nonce != h.nonce || c.is_established() {
                    return;
                }
                let ok = h
                    .cert
                    .as_ref()
                    .is_some_and(|cert| verify_peer(cert, &self.ca.verifier(), from_id, &self.procs[to.idx()].view).is_accept());
                if !ok {
                    self.handshakes.push(HandshakeRecord { at: now, initiator: from, responder: to, established: false });
                    self.reject(to, from_id, h.nonce);
                    return;
                }
                self.procs[to.idx()].conns.get_mut(&from_id).expect("present").peer_cert = h.cert;
                if self.cfg.revocation_check_on_connect {
                    self.start_race_check(to, from_id, h.nonce, 6);
                } else {
                    self.continue_handshake(to, from_id, h.nonce, 6);
                }
            }
            _ => {}
        }
    }

    /// Sends the next secured step (5 from the initiator, 6 from the
    /// responder) after verification and any revocation lookup.
    pub(super) fn continue_handshake(&mut self, p: ProcId, peer: NodeId, nonce: u64, step: u8) {
        let Some(c) = self.procs[p.idx()].conns.get(&peer) else { return };
        if c.nonce != nonce || c.is_established() {
            return;
        }
        let revoked = c.peer_cert.as_ref().is_some_and(|cert| self.procs[p.idx()].view.users.contains(&cert.user));
        let (path, kind, peer_proc) = (c.path.clone(), c.kind, c.peer_proc);
        if revoked {
            if step == 6 {
                let now = self.now();
                self.handshakes.push(HandshakeRecord { at: now, initiator: peer_proc, responder: p, established: false });
            }
            self.reject(p, peer, nonce);
            return;
        }
        let mut h = self.hello(nonce, step, kind, true);
        if step == 5 {
            h.cert = self.procs[p.idx()].cert.clone();
            self.send_hello(path, h);
        } else {
            self.send_hello(path, h);
            let now = self.now();
            self.procs[p.idx()].conns.get_mut(&peer).expect("present").established_at = Some(now);
            self.handshakes.push(HandshakeRecord { at: now, initiator: peer_proc, responder: p, established: true });
            self.link_up(p, peer);
        }
    }

    fn reject(&mut self, p: ProcId, peer: NodeId, nonce: u64) {
        if let Some(c) = self.procs[p.idx()].conns.remove(&peer) {
            self.transmit(c.path, Msg::Reject { nonce });
            self.record_failure(p, peer);
        }
    }

    pub(super) fn on_reject(&mut self, to: ProcId, from: ProcId, nonce: u64) {
        let from_id = self.procs[from.idx()].id;
        let Some(c) = self.procs[to.idx()].conns.get(&from_id) else { return };
        if c.nonce != nonce {
            return;
        }
        let kind = c.kind;
        let was = c.is_established();
        self.procs[to.idx()].conns.remove(&from_id);
        self.handshake_failed(to, from_id, kind);
        if was {
            self.links_changed(to);
        }
    }

    pub(super) fn on_handshake_timeout(&mut self, p: ProcId, peer: NodeId, nonce: u64) {
        let Some(c) = self.procs[p.idx()].conns.get(&peer) else { return };
        if c.nonce != nonce || c.is_established() {
            return;
        }
        let kind = c.kind;
        self.procs[p.idx()].conns.remove(&peer);
        self.handshake_failed(p, peer, kind);
    }

    fn handshake_failed(&mut self, p: ProcId, peer: NodeId, kind: ConnectionKind) {
        self.record_failure(p, peer);
        self.procs[p.idx()].known.remove(&peer);
        if kind == ConnectionKind::Bootstrap && !self.procs[p.idx()].ctm_done {
            let pr = &mut self.procs[p.idx()];
            pr.boot_cursor += 1;
            self.try_bootstrap(p);
        }
    }

    fn link_up(&mut self, p: ProcId, peer: NodeId) {
        let now = self.now();
        let pr = &mut self.procs[p.idx()];
        pr.failures.remove(&peer);
        let c = pr.conns.get_mut(&peer).expect("established link exists");
        c.phase = ConnectionPhase::Established;
        c.last_heard = now;
        let (secured, overlay) = (c.secured, pr.overlay);
        let via_bootstrap = c.kind == ConnectionKind::Bootstrap && c.initiator;
        if !pr.ctm_done && pr.ctm_pending.is_none() {
            let me = pr.id;
            self.send_ctm(p, ConnectionKind::Neighbor, me);
        } else if via_bootstrap {
            // Another bootstrap peer may sit in a different partial ring.
            self.lookup_self_via(p, peer);
        }
        if overlay == Overlay::Private && secured && self.cfg.subscribe_on_connect {
            self.subscribe(p, peer);
        }
        self.links_changed(p);
    }

    pub(super) fn on_want(&mut self, p: ProcId, peer: NodeId, want: bool) {
        let now = self.now();
        if let Some(c) = self.procs[p.idx()].conns.get_mut(&peer) {
            c.peer_wants = want;
            if !want && !c.i_want && c.unwanted_since.is_none() {
                c.unwanted_since = Some(now);
            }
        }
    }

    pub(super) fn on_close(&mut self, p: ProcId, from: ProcId, peer: NodeId) {
        let matches = self.procs[p.idx()].conns.get(&peer).is_some_and(|c| c.peer_proc == from && c.is_established());
        if matches {
            self.procs[p.idx()].conns.remove(&peer);
            self.links_changed(p);
        }
    }

    pub(super) fn close_link(&mut self, p: ProcId, peer: NodeId) {
        if self.procs[p.idx()].conns.get(&peer).is_some_and(Conn::is_established) {
            self.send_link(p, peer, Msg::Close);
        }
        if self.procs[p.idx()].conns.remove(&peer).is_some() {
            self.links_changed(p);
        }
    }

    pub(super) fn on_neighbors(&mut self, p: ProcId, from: NodeId, list: Vec<(NodeId, ProcId)>) {
        let me = self.procs[p.idx()].id;
        let pr = &mut self.procs[p.idx()];
        if !pr.conns.contains_key(&from) {
            return;
        }
        for (id, q) in list {
            if id != me && !pr.failures.contains_key(&id) {
                pr.known.insert(id, q);
            }
        }
        self.reconcile(p);
    }

    /// Peers this process would like as near neighbours right now.
    pub(super) fn desired(&self, p: ProcId) -> BTreeSet<NodeId> {
        let pr = &self.procs[p.idx()];
        let pop: BTreeSet<NodeId> = pr.known.keys().chain(pr.conns.keys()).copied().collect();
        desired_neighbors(pr.id, &pop, self.cfg.node.near_neighbors_per_side, self.space)
    }

    fn near_established(&self, p: ProcId) -> BTreeSet<NodeId> {
        let desired = self.desired(p);
        let pr = &self.procs[p.idx()];
        desired.into_iter().filter(|d| pr.conns.get(d).is_some_and(Conn::is_established)).collect()
    }

    /// Nearest established link clockwise (`cw`) or counter-clockwise.
    pub(super) fn nearest_link(&self, p: ProcId, cw: bool) -> Option<(NodeId, ProcId)> {
        let pr = &self.procs[p.idx()];
        pr.conns
            .iter()
            .filter(|(_, c)| c.is_established())
            .min_by_key(|(k, _)| {
                if cw {
                    clockwise_distance(pr.id, **k, self.space)
                } else {
                    clockwise_distance(**k, pr.id, self.space)
                }
            })
            .map(|(k, c)| (*k, c.peer_proc))
    }

    /// Connects toward missing neighbours and refreshes link interest.
    pub(super) fn reconcile(&mut self, p: ProcId) {
        if !self.procs[p.idx()].alive {
            return;
        }
        let desired = self.desired(p);
        for d in &desired {
            let pr = &self.procs[p.idx()];
            if !pr.conns.contains_key(d) {
                if let Some(q) = pr.known.get(d).copied() {
                    self.connect(p, *d, q, ConnectionKind::Neighbor);
                }
            }
        }
        let now = self.now();
        let bootstrapping = !self.procs[p.idx()].ctm_done;
        let mut wants = Vec::new();
        for (peer, c) in &mut self.procs[p.idx()].conns {
            if !c.is_established() {
                continue;
            }
            if c.kind == ConnectionKind::Bootstrap && desired.contains(peer) {
                c.kind = ConnectionKind::Neighbor;
            }
            let want = wants_link(*peer, &view_of(c), &desired, bootstrapping);
            if want != c.i_want {
                c.i_want = want;
                c.unwanted_since = (!want).then_some(now);
                wants.push((*peer, want));
            }
        }
        for (peer, w) in wants {
            self.send_link(p, peer, Msg::Want(w));
        }
    }

    /// Reacts to any change in this process's set of established links.
    pub(super) fn links_changed(&mut self, p: ProcId) {
        if !self.procs[p.idx()].alive {
            return;
        }
        let overlay = self.procs[p.idx()].overlay;
        self.note_connected(p);
        for q in self.ring_neighbor_procs(p) {
            self.note_connected(q);
        }
        self.check_well_formed(overlay);
        let near = self.near_established(p);
        if near != self.procs[p.idx()].last_near {
            let now = self.now();
            self.restart_probes(p, now);
            let old = std::mem::replace(&mut self.procs[p.idx()].last_near, near.clone());
            let list: Vec<(NodeId, ProcId)> = near.iter().map(|n| (*n, self.procs[p.idx()].conns[n].peer_proc)).collect();
            for n in &near {
                self.send_link(p, *n, Msg::Neighbors(list.clone()));
            }
            if overlay == Overlay::Public {
                let added: Vec<NodeId> = near.difference(&old).copied().collect();
                self.rereplicate(p, &added);
            }
        }
        self.reconcile(p);
        self.update_belief(p);
    }

    fn ring_neighbor_procs(&self, p: ProcId) -> Vec<ProcId> {
        let overlay = self.procs[p.idx()].overlay;
        match self.ring_neighbors_live(p) {
            Some((s, q)) => [s, q].iter().filter_map(|x| self.live[overlay.idx()].get(x).copied()).collect(),
            None => Vec::new(),
        }
    }

    /// Whether this process's local view says it sits between linked
    /// successor and predecessor.
    fn local_belief(&self, p: ProcId) -> bool {
        let pr = &self.procs[p.idx()];
        if !pr.ctm_done {
            return false;
        }
        let pop: Vec<NodeId> = pr.known.keys().chain(pr.conns.keys()).copied().collect();
        match crate::overlay::ring_neighbors(pr.id, &pop, self.space) {
            None => pr.bootstrap.is_empty(),
            Some((s, q)) => [s, q].iter().all(|x| pr.conns.get(x).is_some_and(Conn::is_established)),
        }
    }

    fn update_belief(&mut self, p: ProcId) {
        let now_b = self.local_belief(p);
        let pr = &mut self.procs[p.idx()];
        let before = pr.believes_connected;
        pr.believes_connected = now_b;
        if now_b && !before {
            match pr.overlay {
                Overlay::Public => {
                    if pr.partner.is_some() {
                        self.on_public_connected(p);
                    }
                }
                Overlay::Private => self.on_private_connected(p),
            }
        }
    }

    pub(super) fn send_ctm(&mut self, p: ProcId, kind: ConnectionKind, target: NodeId) {
        let me = self.procs[p.idx()].id;
        let pending = if kind == ConnectionKind::Shortcut {
            self.procs[p.idx()].shortcut_pending = true;
            Pending::Shortcut
        } else {
            Pending::Ctm
        };
        let req = self.start_request_opts(
            p,
            target,
            Body::Ctm { kind, requester: (me, p) },
            crate::sim::TrafficTag::Routing,
            pending,
            true,
            None,
        );
        if kind != ConnectionKind::Shortcut {
            self.procs[p.idx()].ctm_pending = req;
        }
    }

    pub(super) fn ctm_reply(&mut self, p: ProcId, kind: ConnectionKind, peers: Vec<(NodeId, ProcId)>) {
        let me = self.procs[p.idx()].id;
        if kind == ConnectionKind::Shortcut {
            self.procs[p.idx()].shortcut_pending = false;
            if let Some((d, q)) = peers.first().copied() {
                if d == me {
                    return;
                }
                match self.procs[p.idx()].conns.get_mut(&d) {
                    Some(c) => {
                        if !c.my_shortcut {
                            c.my_shortcut = true;
                            self.reconcile(p);
                        }
                    }
                    None => self.connect(p, d, q, ConnectionKind::Shortcut),
                }
            }
            return;
        }
        let now = self.now();
        let pr = &mut self.procs[p.idx()];
        let first_ctm = !pr.ctm_done;
        pr.ctm_done = true;
        pr.ctm_pending = None;
        for (id, q) in peers {
            if id != me {
                pr.known.insert(id, q);
            }
        }
        if first_ctm {
            self.restart_probes(p, now);
        }
        self.links_changed(p);
    }

    /// Answers a connect-to-me request that ended here.
    pub(super) fn ctm_answer(&mut self, p: ProcId, requester: (NodeId, ProcId)) -> Vec<(NodeId, ProcId)> {
        let me = self.procs[p.idx()].id;
        let mut out = vec![(me, p)];
        for n in self.near_established(p) {
            out.push((n, self.procs[p.idx()].conns[&n].peer_proc));
        }
        if requester.0 != me {
            self.procs[p.idx()].known.insert(requester.0, requester.1);
            self.reconcile(p);
        }
        out
    }

    pub(super) fn try_bootstrap(&mut self, p: ProcId) {
        let pr = &self.procs[p.idx()];
        if !pr.alive || pr.ctm_done || pr.bootstrap.is_empty() || pr.ctm_pending.is_some() {
            return;
        }
        let in_flight_max = if pr.overlay == Overlay::Private { self.cfg.bootstrap_in_flight.max(1) } else { 1 };
        let boot: BTreeSet<NodeId> = pr.bootstrap.iter().map(|(id, _)| *id).collect();
        let mut in_flight = pr.conns.keys().filter(|k| boot.contains(k)).count();
        if pr.conns.values().any(Conn::is_established) {
            let p_id = pr.id;
            self.send_ctm(p, ConnectionKind::Neighbor, p_id);
            return;
        }
        let len = pr.bootstrap.len();
        let mut wait: Option<Time> = None;
        let mut tried = 0;
        while in_flight < in_flight_max && tried < len {
            let pr = &self.procs[p.idx()];
            let (id, q) = pr.bootstrap[pr.boot_cursor % len];
            tried += 1;
            if pr.conns.contains_key(&id) {
                self.procs[p.idx()].boot_cursor += 1;
                continue;
            }
            if let Some(w) = self.in_backoff(p, id) {
                wait = Some(wait.map_or(w, |x: Time| x.min(w)));
                self.procs[p.idx()].boot_cursor += 1;
                continue;
            }
            self.connect(p, id, q, ConnectionKind::Bootstrap);
            self.procs[p.idx()].boot_cursor += 1;
            in_flight += 1;
        }
        if in_flight == 0 {
            if let Some(w) = wait {
                self.kernel.schedule(w, super::Ev::Bootstrap { proc: p });
            }
        }
    }

    pub(super) fn on_tick(&mut self, p: ProcId) {
        if !self.procs[p.idx()].alive {
            return;
        }
        let now = self.now();
        let cfg = self.cfg.node;
        self.kernel.schedule(cfg.ping_interval, super::Ev::Tick(p));
        let me = self.procs[p.idx()].id;
        let dead: Vec<NodeId> = self.procs[p.idx()]
            .conns
            .iter()
            .filter(|(_, c)| c.is_established() && now.saturating_sub(c.last_heard) > cfg.liveness_timeout)
            .map(|(k, _)| *k)
            .collect();
        for d in &dead {
            let pr = &mut self.procs[p.idx()];
            pr.conns.remove(d);
            pr.known.remove(d);
        }
        let ping: Vec<NodeId> =
            self.procs[p.idx()].conns.iter().filter(|(k, c)| c.is_established() && me < **k).map(|(k, _)| *k).collect();
        for peer in ping {
            self.send_link(p, peer, Msg::Ping);
        }
        self.procs[p.idx()].dht.purge(now);
        if !dead.is_empty() {
            self.links_changed(p);
        }
        self.maintain(p);
        if !self.procs[p.idx()].ctm_done {
            self.try_bootstrap(p);
        }
    }

    /// Probes soon, then back off again. Called when the near set changes.
    fn restart_probes(&mut self, p: ProcId, now: Time) {
        if self.cfg.ring_probe_interval == 0 || !self.procs[p.idx()].ctm_done {
            return;
        }
        let initial = self.cfg.ring_probe_initial.clamp(1, self.cfg.ring_probe_interval);
        let pr = &mut self.procs[p.idx()];
        pr.probe_delay = initial;
        if pr.next_probe <= now || pr.next_probe > now + initial {
            pr.next_probe = now + initial;
            self.kernel.schedule(initial, super::Ev::Probe(p));
        }
    }

    pub(super) fn on_probe(&mut self, p: ProcId) {
        let now = self.now();
        let pr = &mut self.procs[p.idx()];
        if !pr.alive || now != pr.next_probe {
            return;
        }
        pr.probe_delay = (pr.probe_delay * 2).clamp(1, self.cfg.ring_probe_interval);
        pr.next_probe = now + pr.probe_delay;
        let delay = pr.probe_delay;
        self.kernel.schedule(delay, super::Ev::Probe(p));
        self.probe_ring(p);
    }

    /// Looks up the middle of the gap to the nearest link on each side,
    /// starting from a random link. Any node inside a gap is closer to its
    /// middle than we are, so greedy routing from elsewhere can find ring
    /// neighbours that local gossip never reached. That happens when two
    /// rings interleave.
    fn probe_ring(&mut self, p: ProcId) {
        let links = self.established_links(p, None, false);
        if links.len() < 2 {
            return;
        }
        let me = self.procs[p.idx()].id;
        let space = self.space;
        let cw = links.iter().map(|l| clockwise_distance(me, *l, space)).min().expect("non-empty");
        let ccw = links.iter().map(|l| clockwise_distance(*l, me, space)).min().expect("non-empty");
        for target in [space.add(me, cw >> 1), space.add(me, U256::ZERO.wrapping_sub(ccw >> 1))] {
            let first = links[self.rng.gen_range(0..links.len())];
            self.lookup_via(p, first, target);
        }
    }

    fn lookup_self_via(&mut self, p: ProcId, first: NodeId) {
        let me = self.procs[p.idx()].id;
        self.lookup_via(p, first, me);
    }

    fn lookup_via(&mut self, p: ProcId, first: NodeId, target: NodeId) {
        let me = self.procs[p.idx()].id;
        self.start_request_opts(
            p,
            target,
            Body::Ctm { kind: ConnectionKind::Neighbor, requester: (me, p) },
            crate::sim::TrafficTag::Routing,
            Pending::Probe,
            true,
            Some(first),
        );
    }

    pub(super) fn probe_reply(&mut self, p: ProcId, peers: Vec<(NodeId, ProcId)>) {
        let me = self.procs[p.idx()].id;
        let pr = &mut self.procs[p.idx()];
        let mut fresh = false;
        for (id, q) in peers {
            if id != me {
                fresh |= pr.known.insert(id, q).is_none();
            }
        }
        if fresh {
            self.links_changed(p);
        }
    }

    fn maintain(&mut self, p: ProcId) {
        let pr = &self.procs[p.idx()];
        if !pr.ctm_done {
            return;
        }
        let known: BTreeSet<NodeId> = pr.known.keys().copied().collect();
        let links: BTreeMap<NodeId, LinkView> = pr.conns.iter().map(|(k, c)| (*k, view_of(c))).collect();
        let n = self.n_estimate(pr.overlay);
        let actions = plan_maintenance(pr.id, &known, &links, n, false, self.now(), &self.cfg.node, self.space);
        for a in actions {
            match a {
                MaintenanceAction::Connect { peer, kind } => {
                    if let Some(q) = self.procs[p.idx()].known.get(&peer).copied() {
                        self.connect(p, peer, q, kind);
                    }
                }
                MaintenanceAction::SeekShortcuts { .. } => {
                    if !self.procs[p.idx()].shortcut_pending {
                        let me = self.procs[p.idx()].id;
                        let target = crate::overlay::sample_shortcut_target(me, n, &mut self.rng, self.space);
                        self.send_ctm(p, ConnectionKind::Shortcut, target);
                    }
                }
                MaintenanceAction::Close { peer } => self.close_link(p, peer),
            }
        }
    }

    /// Private process phase while joining.
    pub fn join_phase(&self, p: ProcId) -> JoinPhase {
        self.procs[p.idx()].phase
    }
}

fn view_of(c: &Conn) -> LinkView {
    LinkView {
        kind: c.kind,
        established: c.is_established(),
        my_shortcut: c.my_shortcut,
        peer_wants: c.peer_wants,
        unwanted_since: c.unwanted_since,
    }
}
