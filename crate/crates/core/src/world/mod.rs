//! Event-driven simulation of a public overlay and a private overlay
//! bootstrapped through it.
//!
//! Every host runs one public process and, when paired, one private
//! process. Processes talk only through scheduled message deliveries whose
//! delay comes from the latency matrix and whose bytes land in the meter.
//! Events are plain data, so a settled world can be cloned and each clone
//! driven independently.

mod links;
mod private_join;
mod revocation;
mod routing;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::broadcast::BroadcastTask;
use crate::dht::{DhtEntry, DhtStore};
use crate::error::{Error, Result};
use crate::overlay::{ring_neighbors, ConnectionKind, ConnectionPhase, NodeConfig};
use crate::private::{JoinPhase, QueryMode, QuerySchedule, ADVERT_TTL};
use crate::ring::{clockwise_distance, AddressSpace, NodeId};
use crate::security::{Certificate, Enrollment, GroupCA, RevocationNotice, RevocationView, SigningPolicy, Token};
use crate::sim::{BandwidthMeter, Kernel, LatencyMatrix, NatFractions, NatProfile, Time, TrafficTag};

pub use routing::{GetMode, OpResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ProcId(pub u32);

impl ProcId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Overlay {
    Public,
    Private,
}

impl Overlay {
    fn idx(self) -> usize {
        match self {
            Overlay::Public => 0,
            Overlay::Private => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Host {
    pub site: usize,
    pub nat: NatProfile,
}

/// How packets of a link travel between its endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkPath {
    Direct,
    Relayed { via: ProcId },
    /// Tunnelled hop by hop across the public overlay.
    PublicRoute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RevocationMode {
    Broadcast,
    Dht,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub bits: u32,
    pub node: NodeConfig,
    /// Secure private-overlay links with certificates.
    pub security: bool,
    pub query_mode: QueryMode,
    /// Responders look up the initiator's revocation key before
    /// finishing a secured handshake.
    pub revocation_check_on_connect: bool,
    /// Peers put a subscription at each new link partner's revocation key.
    pub subscribe_on_connect: bool,
    pub advert_ttl: Time,
    pub subscription_ttl: Time,
    pub bootstrap_in_flight: usize,
    pub discovery_backoff_initial: Time,
    pub discovery_backoff_max: Time,
    pub meter_window: Time,
    pub group: String,
    pub seed: u64,
    pub nat: NatFractions,
    pub cookie_epoch: Time,
    pub request_timeout: Time,
    pub max_route_hops: usize,
    /// Delay before a process probes the gaps to its nearest links on
    /// each side for ring neighbours it is missing. Restarts whenever the
    /// near set changes and doubles after each probe up to
    /// `ring_probe_interval`.
    pub ring_probe_initial: Time,
    /// Longest probe delay. Zero disables probing.
    pub ring_probe_interval: Time,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            bits: crate::ring::DEFAULT_BITS,
            node: NodeConfig::default(),
            security: false,
            query_mode: QueryMode::Dynamic,
            revocation_check_on_connect: false,
            subscribe_on_connect: false,
            advert_ttl: ADVERT_TTL,
            subscription_ttl: 7_200_000,
            bootstrap_in_flight: 3,
            discovery_backoff_initial: 1_000,
            discovery_backoff_max: 60_000,
            meter_window: 60_000,
            group: "group".to_string(),
            seed: 0,
            nat: NatFractions::default(),
            cookie_epoch: crate::security::COOKIE_EPOCH_MS,
            request_timeout: 5_000,
            max_route_hops: 64,
            ring_probe_initial: 2_000,
            ring_probe_interval: 3_600_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conn {
    pub peer_proc: ProcId,
    pub kind: ConnectionKind,
    pub phase: ConnectionPhase,
    pub secured: bool,
    pub initiator: bool,
    pub nonce: u64,
    /// Physical hops from this process to the peer, both ends included.
    pub path: Vec<ProcId>,
    pub link_path: LinkPath,
    pub started_at: Time,
    pub established_at: Option<Time>,
    pub last_heard: Time,
    pub my_shortcut: bool,
    pub peer_wants: bool,
    pub i_want: bool,
    pub unwanted_since: Option<Time>,
    pub peer_cert: Option<Certificate>,
}

impl Conn {
    pub fn is_established(&self) -> bool {
        self.phase == ConnectionPhase::Established
    }
}

#[derive(Debug, Clone)]
pub struct Proc {
    pub id: NodeId,
    pub overlay: Overlay,
    pub host: usize,
    pub partner: Option<ProcId>,
    pub alive: bool,
    pub started_at: Option<Time>,
    pub conns: BTreeMap<NodeId, Conn>,
    pub known: BTreeMap<NodeId, ProcId>,
    failures: BTreeMap<NodeId, (u32, Time)>,
    bootstrap: Vec<(NodeId, ProcId)>,
    boot_cursor: usize,
    ctm_done: bool,
    ctm_pending: Option<u64>,
    pub believes_connected: bool,
    pub dht: DhtStore,
    pending: BTreeMap<u64, routing::PendingReq>,
    last_near: BTreeSet<NodeId>,
    shortcut_pending: bool,
    shortcut_misses: usize,
    next_probe: Time,
    probe_delay: Time,
    // Private-process state.
    pub phase: JoinPhase,
    pub user: String,
    pub cert: Option<Certificate>,
    pub view: RevocationView,
    pub discovery_group: String,
    query: QuerySchedule,
    query_gen: u64,
    discovery_attempt: u32,
    advert_gen: u64,
    seen_notices: BTreeSet<Token>,
    /// First time this process was linked to its true ring neighbours.
    pub connected_at: Option<Time>,
}

#[derive(Debug, Clone)]
pub(crate) enum Ev {
    Start(ProcId),
    Crash(ProcId),
    Tick(ProcId),
    Deliver { to: ProcId, from: ProcId, route: Vec<ProcId>, msg: Msg },
    HandshakeTimeout { proc: ProcId, peer: NodeId, nonce: u64 },
    RequestTimeout { proc: ProcId, req: u64 },
    LeaseRenew { proc: ProcId, gen: u64 },
    Query { proc: ProcId, gen: u64 },
    Bootstrap { proc: ProcId },
    Probe(ProcId),
}

#[derive(Debug, Clone)]
pub(crate) enum Msg {
    Hello { nonce: u64, step: u8, kind: ConnectionKind, secured: bool, cookie: Option<Token>, cert: Option<Certificate> },
    Reject { nonce: u64 },
    Ping,
    Pong,
    Want(bool),
    Close,
    Neighbors(Vec<(NodeId, ProcId)>),
    Routed(Box<routing::Routed>),
    Reply(Box<routing::Reply>),
    Replicate(DhtEntry),
    Broadcast { task: BroadcastTask, notice: RevocationNotice },
}

/// Outcome of one handshake, kept for inspection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HandshakeRecord {
    pub at: Time,
    pub initiator: ProcId,
    pub responder: ProcId,
    pub established: bool,
}

/// Successor-walk summary of one overlay.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrawlReport {
    pub visited: BTreeSet<NodeId>,
    pub cycle_count: usize,
    pub is_single_cycle: bool,
}

#[derive(Debug, Clone)]
pub struct World {
    pub cfg: WorldConfig,
    space: AddressSpace,
    latency: Arc<LatencyMatrix>,
    kernel: Kernel<Ev>,
    rng: ChaCha8Rng,
    hosts: Vec<Host>,
    procs: Vec<Proc>,
    live: [BTreeMap<NodeId, ProcId>; 2],
    meter: BandwidthMeter,
    ca: GroupCA,
    next_nonce: u64,
    next_req: u64,
    trace_hash: u64,
    pub violations: Vec<String>,
    watch: [bool; 2],
    watch_min: [usize; 2],
    well_formed_at: [Option<Time>; 2],
    ops: BTreeMap<u64, OpResult>,
    pub handshakes: Vec<HandshakeRecord>,
    notice_received: BTreeMap<ProcId, Time>,
    queries: Vec<(ProcId, Time)>,
    users: usize,
    addr: [BTreeMap<NodeId, ProcId>; 2],
    revocation_traffic: (u64, u64),
}

impl World {
    pub fn new(cfg: WorldConfig, latency: LatencyMatrix) -> Result<Self> {
        let space = AddressSpace::new(cfg.bits)?;
        NatFractions::new(cfg.nat.0[0], cfg.nat.0[1], cfg.nat.0[2])?;
        let ca = GroupCA::new(&cfg.group, cfg.seed, SigningPolicy::AutoSign);
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            meter: BandwidthMeter::new(cfg.meter_window),
            space,
            latency: Arc::new(latency),
            kernel: Kernel::new(),
            hosts: Vec::new(),
            procs: Vec::new(),
            live: [BTreeMap::new(), BTreeMap::new()],
            ca,
            next_nonce: 1,
            next_req: 1,
            trace_hash: 0xcbf2_9ce4_8422_2325,
            violations: Vec::new(),
            watch: [false; 2],
            watch_min: [1; 2],
            well_formed_at: [None; 2],
            ops: BTreeMap::new(),
            handshakes: Vec::new(),
            notice_received: BTreeMap::new(),
            queries: Vec::new(),
            users: 0,
            addr: [BTreeMap::new(), BTreeMap::new()],
            revocation_traffic: (0, 0),
            cfg,
        })
    }

    /// Replaces the random stream, so clones of one world can diverge.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn space(&self) -> AddressSpace {
        self.space
    }

    pub fn now(&self) -> Time {
        self.kernel.now()
    }

    pub fn meter(&self) -> &BandwidthMeter {
        &self.meter
    }

    pub fn latency(&self) -> &LatencyMatrix {
        &self.latency
    }

    pub fn proc(&self, p: ProcId) -> &Proc {
        &self.procs[p.idx()]
    }

    pub fn procs(&self) -> impl Iterator<Item = (ProcId, &Proc)> {
        self.procs.iter().enumerate().map(|(i, p)| (ProcId(i as u32), p))
    }

    pub fn host_of(&self, p: ProcId) -> Host {
        self.hosts[self.procs[p.idx()].host]
    }

    pub fn ca(&self) -> &GroupCA {
        &self.ca
    }

    pub fn trace_hash(&self) -> u64 {
        self.trace_hash
    }

    pub fn live_ids(&self, overlay: Overlay) -> &BTreeMap<NodeId, ProcId> {
        &self.live[overlay.idx()]
    }

    fn fresh_id(&mut self, overlay: Overlay) -> NodeId {
        loop {
            let id = self.space.random_id(&mut self.rng);
            if !self.addr[overlay.idx()].contains_key(&id) {
                return id;
            }
        }
    }

    fn new_host(&mut self, site: Option<usize>, nat: Option<NatProfile>) -> usize {
        let site = site.unwrap_or_else(|| self.rng.gen_range(0..self.latency.n_sites()));
        let nat = nat.unwrap_or_else(|| {
            let u: f64 = self.rng.gen();
            let f = self.cfg.nat.0;
            if u < f[0] {
                NatProfile::Public
            } else if u < f[0] + f[1] {
                NatProfile::Cone
            } else {
                NatProfile::Symmetric
            }
        });
        self.hosts.push(Host { site: site.min(self.latency.n_sites() - 1), nat });
        self.hosts.len() - 1
    }

    fn new_proc(&mut self, overlay: Overlay, host: usize) -> ProcId {
        let id = self.fresh_id(overlay);
        let group = self.cfg.group.clone();
        self.procs.push(Proc {
            id,
            overlay,
            host,
            partner: None,
            alive: false,
            started_at: None,
            conns: BTreeMap::new(),
            known: BTreeMap::new(),
            failures: BTreeMap::new(),
            bootstrap: Vec::new(),
            boot_cursor: 0,
            ctm_done: false,
            ctm_pending: None,
            believes_connected: false,
            dht: DhtStore::new(),
            pending: BTreeMap::new(),
            last_near: BTreeSet::new(),
            shortcut_pending: false,
            shortcut_misses: 0,
            next_probe: 0,
            probe_delay: 0,
            phase: JoinPhase::PublicConnecting,
            user: String::new(),
            cert: None,
            view: RevocationView::default(),
            discovery_group: group,
            query: QuerySchedule::new(self.cfg.query_mode),
            query_gen: 0,
            discovery_attempt: 0,
            advert_gen: 0,
            seen_notices: BTreeSet::new(),
            connected_at: None,
        });
        let p = ProcId(self.procs.len() as u32 - 1);
        self.addr[overlay.idx()].insert(id, p);
        p
    }

    /// Adds a public-pool host (no NAT unless given) running a public process.
    pub fn add_public_node(&mut self, site: Option<usize>, nat: Option<NatProfile>) -> ProcId {
        let host = self.new_host(site, Some(nat.unwrap_or(NatProfile::Public)));
        self.new_proc(Overlay::Public, host)
    }

    /// Adds a host running a public process paired with a private one.
    /// The NAT profile is drawn from the configured fractions unless given.
    pub fn add_paired_node(&mut self, site: Option<usize>, nat: Option<NatProfile>) -> Result<(ProcId, ProcId)> {
        let host = self.new_host(site, nat);
        let pub_p = self.new_proc(Overlay::Public, host);
        let priv_p = self.new_proc(Overlay::Private, host);
        self.procs[pub_p.idx()].partner = Some(priv_p);
        self.procs[priv_p.idx()].partner = Some(pub_p);
        self.users += 1;
        let user = format!("user{}", self.users);
        let secret = format!("secret{}", self.users);
        self.ca.add_member(&user, &secret);
        let id = self.procs[priv_p.idx()].id;
        let cert = match self.ca.enroll(&user, &secret, id, self.now())? {
            Enrollment::Issued(c) => c,
            Enrollment::Pending(r) => return Err(Error::UnknownRequest(r)),
        };
        let q = &mut self.procs[priv_p.idx()];
        q.user = user;
        q.cert = Some(cert);
        Ok((pub_p, priv_p))
    }

    pub fn set_bootstrap(&mut self, p: ProcId, peers: &[ProcId]) {
        let list = peers.iter().map(|b| (self.procs[b.idx()].id, *b)).collect();
        self.procs[p.idx()].bootstrap = list;
    }

    pub fn start_at(&mut self, p: ProcId, at: Time) {
        self.kernel.schedule_at(at, Ev::Start(p));
    }

    pub fn crash_at(&mut self, p: ProcId, at: Time) {
        self.kernel.schedule_at(at, Ev::Crash(p));
    }

    /// Starts observing when every live process of `overlay` is linked to
    /// its ring neighbours.
    pub fn watch_well_formed(&mut self, overlay: Overlay) {
        self.watch_well_formed_min(overlay, 1);
    }

    /// Like [`World::watch_well_formed`] but only counts once at least
    /// `min_live` processes are live.
    pub fn watch_well_formed_min(&mut self, overlay: Overlay, min_live: usize) {
        self.watch[overlay.idx()] = true;
        self.watch_min[overlay.idx()] = min_live.max(1);
        self.well_formed_at[overlay.idx()] = None;
        self.check_well_formed(overlay);
    }

    pub fn well_formed_at(&self, overlay: Overlay) -> Option<Time> {
        self.well_formed_at[overlay.idx()]
    }

    pub fn op_result(&self, op: u64) -> Option<&OpResult> {
        self.ops.get(&op)
    }

    pub fn queries(&self) -> &[(ProcId, Time)] {
        &self.queries
    }

    pub fn notice_received(&self) -> &BTreeMap<ProcId, Time> {
        &self.notice_received
    }

    pub fn run_until(&mut self, t_end: Time) {
        while let Some((t, seq, ev)) = self.kernel.pop_until(t_end) {
            self.hash_event(t, seq, &ev);
            self.handle(ev);
        }
        self.kernel.advance_to(t_end);
    }

    /// Runs until `pred` holds (checked after each event) or `t_end`.
    pub fn run_until_pred<F: Fn(&World) -> bool>(&mut self, t_end: Time, pred: F) -> bool {
        if pred(self) {
            return true;
        }
        while let Some((t, seq, ev)) = self.kernel.pop_until(t_end) {
            self.hash_event(t, seq, &ev);
            self.handle(ev);
            if pred(self) {
                return true;
            }
        }
        self.kernel.advance_to(t_end);
        false
    }

    fn hash_event(&mut self, t: Time, seq: u64, ev: &Ev) {
        let (code, p) = match ev {
            Ev::Start(p) => (1u64, p.0),
            Ev::Crash(p) => (2, p.0),
            Ev::Tick(p) => (3, p.0),
            Ev::Deliver { to, .. } => (4, to.0),
            Ev::HandshakeTimeout { proc, .. } => (5, proc.0),
            Ev::RequestTimeout { proc, .. } => (6, proc.0),
            Ev::LeaseRenew { proc, .. } => (7, proc.0),
            Ev::Query { proc, .. } => (8, proc.0),
            Ev::Bootstrap { proc } => (9, proc.0),
            Ev::Probe(p) => (10, p.0),
        };
        for v in [t, seq, code, p as u64] {
            self.trace_hash ^= v;
            self.trace_hash = self.trace_hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::Start(p) => self.on_start(p),
            Ev::Crash(p) => self.on_crash(p),
            Ev::Tick(p) => self.on_tick(p),
            Ev::Deliver { to, from, route, msg } => self.on_deliver(to, from, route, msg),
            Ev::HandshakeTimeout { proc, peer, nonce } => self.on_handshake_timeout(proc, peer, nonce),
            Ev::RequestTimeout { proc, req } => self.on_request_timeout(proc, req),
            Ev::LeaseRenew { proc, gen } => self.on_lease_renew(proc, gen),
            Ev::Query { proc, gen } => self.on_query(proc, gen),
            Ev::Bootstrap { proc } => self.try_bootstrap(proc),
            Ev::Probe(p) => self.on_probe(p),
        }
    }

    fn on_start(&mut self, p: ProcId) {
        if self.procs[p.idx()].alive {
            return;
        }
        let now = self.now();
        let overlay = self.procs[p.idx()].overlay;
        {
            let pr = &mut self.procs[p.idx()];
            pr.alive = true;
            pr.started_at = Some(now);
        }
        let id = self.procs[p.idx()].id;
        self.live[overlay.idx()].insert(id, p);
        let offset = self.rng.gen_range(0..self.cfg.node.ping_interval);
        self.kernel.schedule(offset, Ev::Tick(p));
        if let Some(q) = self.procs[p.idx()].partner {
            if overlay == Overlay::Public && !self.procs[q.idx()].alive {
                self.on_start(q);
            }
        }
        match overlay {
            Overlay::Public => {
                if self.procs[p.idx()].bootstrap.is_empty() {
                    self.procs[p.idx()].ctm_done = true;
                }
                self.try_bootstrap(p);
                self.links_changed(p);
            }
            Overlay::Private => {
                let pp = self.procs[p.idx()].partner.expect("private process has a partner");
                if self.procs[pp.idx()].believes_connected {
                    self.on_public_connected(pp);
                }
            }
        }
        self.population_changed(overlay);
    }

    fn on_crash(&mut self, p: ProcId) {
        if !self.procs[p.idx()].alive {
            return;
        }
        let overlay = self.procs[p.idx()].overlay;
        let id = self.procs[p.idx()].id;
        self.live[overlay.idx()].remove(&id);
        let pr = &mut self.procs[p.idx()];
        pr.alive = false;
        pr.conns.clear();
        pr.pending.clear();
        pr.believes_connected = false;
        if overlay == Overlay::Public {
            if let Some(q) = self.procs[p.idx()].partner {
                self.on_crash(q);
            }
        }
        self.population_changed(overlay);
    }

    fn population_changed(&mut self, overlay: Overlay) {
        let ids: Vec<ProcId> = self.live[overlay.idx()].values().copied().collect();
        for p in ids {
            self.note_connected(p);
        }
        self.check_well_formed(overlay);
    }

    /// Whether `p` has links to its true ring neighbours.
    pub fn is_connected(&self, p: ProcId) -> bool {
        let pr = &self.procs[p.idx()];
        if !pr.alive {
            return false;
        }
        let live = &self.live[pr.overlay.idx()];
        let succ = live
            .range((std::ops::Bound::Excluded(pr.id), std::ops::Bound::Unbounded))
            .next()
            .or_else(|| live.iter().next())
            .map(|(k, _)| *k);
        let pred = live
            .range(..pr.id)
            .next_back()
            .or_else(|| live.iter().next_back())
            .map(|(k, _)| *k);
        let ok = |n: Option<NodeId>| match n {
            None => true,
            Some(n) if n == pr.id => true,
            Some(n) => pr.conns.get(&n).is_some_and(Conn::is_established),
        };
        ok(succ) && ok(pred)
    }

    /// Diagnostic summary of why `p` is not connected.
    pub fn debug_proc(&self, p: ProcId) -> String {
        let pr = &self.procs[p.idx()];
        let rn = self.ring_neighbors_live(p);
        let mut out = format!("{:?} {:?} ctm={} bel={} phase={:?}\n", p, pr.overlay, pr.ctm_done, pr.believes_connected, pr.phase);
        if let Some((s, q)) = rn {
            for x in [s, q] {
                out += &format!(
                    "  ring nbr {:?} known={} conn={:?} fail={:?}\n",
                    self.live[pr.overlay.idx()].get(&x),
                    pr.known.contains_key(&x),
                    pr.conns.get(&x).map(|c| (c.phase, c.initiator, c.link_path)),
                    pr.failures.get(&x)
                );
            }
        }
        out
    }

    fn note_connected(&mut self, p: ProcId) {
        if self.procs[p.idx()].connected_at.is_none() && self.is_connected(p) {
            let now = self.now();
            self.procs[p.idx()].connected_at = Some(now);
        }
    }

    fn check_well_formed(&mut self, overlay: Overlay) {
        let i = overlay.idx();
        if !self.watch[i] || self.well_formed_at[i].is_some() {
            return;
        }
        if self.live[i].len() >= self.watch_min[i]
            && self.live[i].values().all(|p| self.is_connected(*p))
            && self.crawl(overlay).is_single_cycle
        {
            self.well_formed_at[i] = Some(self.now());
        }
    }

    /// Nearest clockwise established link of each live process.
    pub fn view_successors(&self, overlay: Overlay) -> BTreeMap<NodeId, Option<NodeId>> {
        self.live[overlay.idx()]
            .iter()
            .map(|(id, p)| {
                let succ = self.procs[p.idx()]
                    .conns
                    .iter()
                    .filter(|(peer, c)| c.is_established() && self.live[overlay.idx()].contains_key(*peer))
                    .map(|(peer, _)| *peer)
                    .min_by_key(|peer| clockwise_distance(*id, *peer, self.space));
                (*id, succ)
            })
            .collect()
    }

    pub fn crawl(&self, overlay: Overlay) -> CrawlReport {
        crawl_successors(&self.view_successors(overlay), self.space)
    }

    /// Established links of `p` (peer IDs).
    pub fn established(&self, p: ProcId) -> BTreeSet<NodeId> {
        self.procs[p.idx()]
            .conns
            .iter()
            .filter(|(_, c)| c.is_established())
            .map(|(id, _)| *id)
            .collect()
    }

    /// Links of every live process in `overlay`, keyed by node ID.
    pub fn topology(&self, overlay: Overlay) -> BTreeMap<NodeId, BTreeSet<NodeId>> {
        self.live[overlay.idx()]
            .iter()
            .map(|(id, p)| (*id, self.established(*p)))
            .collect()
    }

    fn fresh_nonce(&mut self) -> u64 {
        self.next_nonce += 1;
        self.next_nonce
    }

    fn fresh_req(&mut self) -> u64 {
        self.next_req += 1;
        self.next_req
    }

    fn one_way(&self, a: ProcId, b: ProcId) -> Time {
        let sa = self.hosts[self.procs[a.idx()].host].site;
        let sb = self.hosts[self.procs[b.idx()].host].site;
        self.latency.one_way(sa, sb)
    }

    fn msg_size(&self, msg: &Msg) -> u64 {
        let s = &self.cfg.node.sizes;
        match msg {
            Msg::Hello { secured, cert, .. } => {
                let base = if *secured { s.handshake_secured } else { s.handshake_unsecured };
                base + if cert.is_some() { s.certificate } else { 0 }
            }
            Msg::Reject { .. } => s.control,
            Msg::Ping | Msg::Pong => s.ping,
            Msg::Want(_) | Msg::Close => s.control,
            Msg::Neighbors(v) => s.control + v.len() as u64 * s.neighbor_entry,
            Msg::Routed(r) => s.routed_header + r.body_size(s),
            Msg::Reply(r) => s.routed_header + r.body_size(s),
            Msg::Replicate(e) => s.dht_header + e.value.len() as u64,
            Msg::Broadcast { .. } => s.revocation_notice + s.broadcast_header,
        }
    }

    fn tag_of(msg: &Msg) -> TrafficTag {
        match msg {
            Msg::Hello { .. } | Msg::Reject { .. } => TrafficTag::Handshake,
            Msg::Ping | Msg::Pong => TrafficTag::Ping,
            Msg::Want(_) | Msg::Close | Msg::Neighbors(_) => TrafficTag::Topology,
            Msg::Routed(r) => r.tag,
            Msg::Reply(r) => r.tag,
            Msg::Replicate(_) => TrafficTag::Dht,
            Msg::Broadcast { .. } => TrafficTag::Broadcast,
        }
    }

    /// Sends along a physical path. Intermediate hops are metered at send
    /// time; the destination on delivery.
    fn transmit(&mut self, path: Vec<ProcId>, msg: Msg) {
        let now = self.now();
        let bytes = self.msg_size(&msg);
        let tag = Self::tag_of(&msg);
        let from = path[0];
        let to = *path.last().expect("non-empty path");
        self.meter.record_send(from.idx(), tag, bytes, now);
        if matches!(tag, TrafficTag::Broadcast | TrafficTag::Revocation) {
            self.revocation_traffic.0 += 1;
            self.revocation_traffic.1 += bytes;
        }
        let mut delay = 0;
        for w in path.windows(2) {
            delay += self.one_way(w[0], w[1]);
        }
        for mid in &path[1..path.len() - 1] {
            if !self.procs[mid.idx()].alive {
                self.meter.record_drop(bytes);
                return;
            }
            self.meter.record_receive(mid.idx(), bytes, now);
            self.meter.record_send(mid.idx(), tag, bytes, now);
        }
        self.kernel.schedule(delay, Ev::Deliver { to, from, route: path, msg });
    }

    fn on_deliver(&mut self, to: ProcId, from: ProcId, route: Vec<ProcId>, msg: Msg) {
        let bytes = self.msg_size(&msg);
        if !self.procs[to.idx()].alive {
            self.meter.record_drop(bytes);
            return;
        }
        let now = self.now();
        self.meter.record_receive(to.idx(), bytes, now);
        let from_id = self.procs[from.idx()].id;
        if let Some(c) = self.procs[to.idx()].conns.get_mut(&from_id) {
            if c.peer_proc == from {
                c.last_heard = now;
            }
        }
        match msg {
            Msg::Hello { nonce, step, kind, secured, cookie, cert } => {
                self.on_hello(to, from, route, links::Hello { nonce, step, kind, secured, cookie, cert })
            }
            Msg::Reject { nonce } => self.on_reject(to, from, nonce),
            Msg::Ping => {
                self.send_link(to, from_id, Msg::Pong);
            }
            Msg::Pong => {}
            Msg::Want(w) => self.on_want(to, from_id, w),
            Msg::Close => self.on_close(to, from, from_id),
            Msg::Neighbors(list) => self.on_neighbors(to, from_id, list),
            Msg::Routed(r) => self.on_routed(to, *r),
            Msg::Reply(r) => self.on_reply(to, *r),
            Msg::Replicate(e) => self.on_replicate(to, e),
            Msg::Broadcast { task, notice } => self.on_broadcast(to, from, task, notice),
        }
    }

    fn shuffle<T>(&mut self, v: &mut [T]) {
        v.shuffle(&mut self.rng);
    }

    fn n_estimate(&self, overlay: Overlay) -> usize {
        self.live[overlay.idx()].len()
    }

    fn ring_neighbors_live(&self, p: ProcId) -> Option<(NodeId, NodeId)> {
        let pr = &self.procs[p.idx()];
        ring_neighbors(pr.id, self.live[pr.overlay.idx()].keys(), self.space)
    }
}

/// Walks successor pointers. `is_single_cycle` holds when the walk from
/// the smallest ID visits every node once, winds the ring exactly once,
/// and returns to the start. A lone node is a single cycle.
pub fn crawl_successors(succ: &BTreeMap<NodeId, Option<NodeId>>, space: AddressSpace) -> CrawlReport {
    let Some(start) = succ.keys().next().copied() else {
        return CrawlReport { visited: BTreeSet::new(), cycle_count: 0, is_single_cycle: true };
    };
    if succ.len() == 1 {
        return CrawlReport { visited: [start].into(), cycle_count: 1, is_single_cycle: true };
    }
    let mut visited = BTreeSet::new();
    let mut cur = start;
    let mut winding = ethnum::U256::ZERO;
    let mut closed = false;
    loop {
        if !visited.insert(cur) {
            break;
        }
        match succ.get(&cur).copied().flatten() {
            Some(next) if succ.contains_key(&next) => {
                winding += clockwise_distance(cur, next, space);
                if next == start {
                    closed = true;
                    break;
                }
                cur = next;
            }
            _ => break,
        }
    }
    // Count cycles in the functional graph.
    let mut state: BTreeMap<NodeId, u8> = BTreeMap::new();
    let mut cycles = 0;
    for s in succ.keys() {
        let mut trail = Vec::new();
        let mut x = *s;
        loop {
            match state.get(&x) {
                Some(1) => {
                    cycles += 1;
                    break;
                }
                Some(_) => break,
                None => {}
            }
            state.insert(x, 1);
            trail.push(x);
            match succ.get(&x).copied().flatten() {
                Some(n) if succ.contains_key(&n) => x = n,
                _ => break,
            }
        }
        for t in trail {
            state.insert(t, 2);
        }
    }
    let single = closed && visited.len() == succ.len() && winding == space.size();
    CrawlReport { visited, cycle_count: cycles, is_single_cycle: single }
}
