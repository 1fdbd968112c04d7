//! Per-node overlay rules: which peers to link to, shortcut draws, backoff,
//! handshake cost, and the connectivity predicate.
//!
//! Everything here is a pure function of a node's local view so that the
//! simulator and the unit tests exercise the same decisions.

use std::collections::{BTreeMap, BTreeSet};

use ethnum::U256;
use rand::Rng;

use crate::ring::{clockwise_distance, closest_to, AddressSpace, NodeId};
use crate::sim::Time;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConnectionKind {
    Neighbor,
    Shortcut,
    Bootstrap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConnectionPhase {
    Initiating,
    HandshakeInProgress,
    Established,
    Closing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConnectionState {
    pub peer: NodeId,
    pub kind: ConnectionKind,
    pub phase: ConnectionPhase,
    pub secured: bool,
    pub established_at: Option<Time>,
}

/// Wire sizes in bytes. Every value is a knob; the defaults put an idle
/// node in the low hundreds of bytes per second.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MessageSizes {
    pub handshake_unsecured: u64,
    pub handshake_secured: u64,
    pub certificate: u64,
    /// One direction of a keep-alive exchange.
    pub ping: u64,
    /// Routing envelope added to every overlay-routed message.
    pub routed_header: u64,
    pub neighbor_entry: u64,
    pub dht_header: u64,
    pub broadcast_header: u64,
    pub revocation_notice: u64,
    /// Transport endpoint hints carried in a discovery advertisement.
    pub advert_hints: u64,
    pub control: u64,
}

impl Default for MessageSizes {
    fn default() -> Self {
        Self {
            handshake_unsecured: 50,
            handshake_secured: 150,
            certificate: 800,
            ping: 20,
            routed_header: 40,
            neighbor_entry: 28,
            dht_header: 48,
            broadcast_header: 60,
            revocation_notice: 300,
            advert_hints: 320,
            control: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeConfig {
    pub near_neighbors_per_side: usize,
    pub security_enabled: bool,
    pub backoff_initial: Time,
    pub backoff_max: Time,
    pub handshake_timeout: Time,
    pub ping_interval: Time,
    pub liveness_timeout: Time,
    pub trim_grace: Time,
    /// Multiplier on log2(N) for the shortcut count.
    pub shortcut_factor: f64,
    pub sizes: MessageSizes,
}

impl Default for NodeConfig {
    fn default() -> Self {
        Self {
            near_neighbors_per_side: 3,
            security_enabled: false,
            backoff_initial: 1_000,
            backoff_max: 60_000,
            handshake_timeout: 10_000,
            ping_interval: 15_000,
            liveness_timeout: 45_000,
            trim_grace: 30_000,
            shortcut_factor: 0.5,
            sizes: MessageSizes::default(),
        }
    }
}

impl NodeConfig {
    pub fn shortcut_count(&self, n_estimate: usize) -> usize {
        shortcut_count_with(n_estimate, self.shortcut_factor)
    }
}

/// `round(0.5 * log2 n)`.
pub fn shortcut_count(n: usize) -> usize {
    shortcut_count_with(n, 0.5)
}

fn shortcut_count_with(n: usize, factor: f64) -> usize {
    if n < 2 {
        return 0;
    }
    (factor * (n as f64).log2()).round() as usize
}

/// The `k` nearest peers on each side of `self_id`.
pub fn desired_neighbors<'a, I>(self_id: NodeId, known_peers: I, k: usize, space: AddressSpace) -> BTreeSet<NodeId>
where
    I: IntoIterator<Item = &'a NodeId>,
{
    let mut peers: Vec<NodeId> = known_peers.into_iter().copied().filter(|p| *p != self_id).collect();
    peers.sort_by_key(|p| clockwise_distance(self_id, *p, space));
    peers.dedup();
    let mut out: BTreeSet<NodeId> = peers.iter().take(k).copied().collect();
    out.extend(peers.iter().rev().take(k).copied());
    out
}

/// Ring distance `size * n^(u-1)` for `u` in `[0, 1)`.
pub fn harmonic_distance(n_estimate: usize, u: f64, space: AddressSpace) -> U256 {
    let n = n_estimate.max(2) as f64;
    space.scaled((n.ln() * (u - 1.0)).exp())
}

/// Harmonic shortcut target for a given uniform draw `u`.
pub fn shortcut_target_for(self_id: NodeId, n_estimate: usize, u: f64, space: AddressSpace) -> NodeId {
    space.add(self_id, harmonic_distance(n_estimate, u, space))
}

pub fn sample_shortcut_target<R: Rng + ?Sized>(self_id: NodeId, n_estimate: usize, rng: &mut R, space: AddressSpace) -> NodeId {
    let u: f64 = rng.gen();
    shortcut_target_for(self_id, n_estimate, u, space)
}

/// `min(initial * 2^attempt, max)`.
pub fn next_backoff(attempt: u32, config: &NodeConfig) -> Time {
    let factor = 1u64.checked_shl(attempt.min(63)).unwrap_or(u64::MAX);
    config.backoff_initial.saturating_mul(factor).min(config.backoff_max)
}

pub fn handshake_messages(secured: bool) -> u32 {
    if secured {
        6
    } else {
        2
    }
}

/// Round trips before a link is usable.
pub fn handshake_rtts(secured: bool) -> u64 {
    handshake_messages(secured) as u64 / 2
}

/// Immediate clockwise and counter-clockwise neighbours of `self_id` in
/// `population` (which may contain `self_id`).
pub fn ring_neighbors<'a, I>(self_id: NodeId, population: I, space: AddressSpace) -> Option<(NodeId, NodeId)>
where
    I: IntoIterator<Item = &'a NodeId>,
{
    let mut succ: Option<(U256, NodeId)> = None;
    let mut pred: Option<(U256, NodeId)> = None;
    for p in population {
        if *p == self_id {
            continue;
        }
        let cw = clockwise_distance(self_id, *p, space);
        let ccw = clockwise_distance(*p, self_id, space);
        if succ.is_none_or(|(d, _)| cw < d) {
            succ = Some((cw, *p));
        }
        if pred.is_none_or(|(d, _)| ccw < d) {
            pred = Some((ccw, *p));
        }
    }
    Some((succ?.1, pred?.1))
}

/// Whether `self_id` has established links to its immediate successor and
/// predecessor among the live population. A node alone is connected.
pub fn is_connected(self_id: NodeId, established: &BTreeSet<NodeId>, live: &BTreeSet<NodeId>, space: AddressSpace) -> bool {
    match ring_neighbors(self_id, live, space) {
        None => true,
        Some((succ, pred)) => established.contains(&succ) && established.contains(&pred),
    }
}

/// A node's view of one of its links, as seen by the maintenance planner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinkView {
    pub kind: ConnectionKind,
    pub established: bool,
    /// This node keeps the link for a shortcut it chose.
    pub my_shortcut: bool,
    /// The remote side has said it still needs the link.
    pub peer_wants: bool,
    /// When this side first stopped needing the link.
    pub unwanted_since: Option<Time>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MaintenanceAction {
    Connect { peer: NodeId, kind: ConnectionKind },
    /// Draw and route toward `count` new shortcut targets.
    SeekShortcuts { count: usize },
    Close { peer: NodeId },
}

/// Whether a node still needs a link, given its desired neighbour set.
pub fn wants_link(peer: NodeId, link: &LinkView, desired: &BTreeSet<NodeId>, bootstrapping: bool) -> bool {
    desired.contains(&peer) || link.my_shortcut || (link.kind == ConnectionKind::Bootstrap && bootstrapping)
}

/// One maintenance pass over a node's local view.
///
/// Connects toward missing desired neighbours, asks for missing shortcuts,
/// and closes links that neither side has wanted for the grace period.
#[allow(clippy::too_many_arguments)]
pub fn plan_maintenance(
    self_id: NodeId,
    known_peers: &BTreeSet<NodeId>,
    links: &BTreeMap<NodeId, LinkView>,
    n_estimate: usize,
    bootstrapping: bool,
    now: Time,
    config: &NodeConfig,
    space: AddressSpace,
) -> Vec<MaintenanceAction> {
    let mut actions = Vec::new();
    let population: BTreeSet<NodeId> = known_peers.iter().chain(links.keys()).copied().collect();
    let desired = desired_neighbors(self_id, &population, config.near_neighbors_per_side, space);
    for peer in &desired {
        if !links.contains_key(peer) {
            actions.push(MaintenanceAction::Connect { peer: *peer, kind: ConnectionKind::Neighbor });
        }
    }
    let shortcuts = links.values().filter(|l| l.my_shortcut).count();
    let wanted_shortcuts = config.shortcut_count(n_estimate);
    if !bootstrapping && shortcuts < wanted_shortcuts && population.len() > desired.len() {
        actions.push(MaintenanceAction::SeekShortcuts { count: wanted_shortcuts - shortcuts });
    }
    for (peer, link) in links {
        if !link.established || link.peer_wants || wants_link(*peer, link, &desired, bootstrapping) {
            continue;
        }
        if link.unwanted_since.is_some_and(|t| now >= t + config.trim_grace) {
            actions.push(MaintenanceAction::Close { peer: *peer });
        }
    }
    actions
}

/// Closest known peer to a shortcut target, excluding self.
pub fn shortcut_peer(self_id: NodeId, target: NodeId, known: &BTreeSet<NodeId>, space: AddressSpace) -> Option<NodeId> {
    closest_to(target, known.iter().copied().filter(|p| *p != self_id), space).ok()
}
