//! Ring address arithmetic.
//!
//! Every overlay participant lives on a one-dimensional ring of `2^bits`
//! addresses. Distances, wrap-around arcs and greedy next-hop selection are
//! defined here as pure functions over value types; the simulator, the
//! modeler and the broadcast tree all route through the same code.

use std::cmp::Ordering;
use std::fmt;

use ethnum::{AsU256, U256};
use rand::Rng;

use crate::error::{Error, Result};

/// Largest supported address width.
pub const MAX_BITS: u32 = 160;

/// Address width used when nothing else is configured.
pub const DEFAULT_BITS: u32 = 160;

/// A ring of `2^bits` addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AddressSpace {
    bits: u32,
}

impl AddressSpace {
    pub fn new(bits: u32) -> Result<Self> {
        if bits == 0 || bits > MAX_BITS {
            return Err(Error::InvalidAddressBits(bits));
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    /// Number of addresses, `2^bits`.
    pub fn size(&self) -> U256 {
        U256::ONE << self.bits
    }

    fn mask(&self) -> U256 {
        self.size() - U256::ONE
    }

    /// Number of bytes needed to carry one address on the wire.
    pub fn id_bytes(&self) -> usize {
        self.bits.div_ceil(8) as usize
    }

    /// Reduces an arbitrary value into the space.
    pub fn wrap(&self, value: U256) -> NodeId {
        NodeId(value & self.mask())
    }

    pub fn id(&self, value: u128) -> NodeId {
        self.wrap(U256::new(value))
    }

    pub fn contains(&self, id: NodeId) -> bool {
        id.0 <= self.mask()
    }

    /// Uniformly distributed address.
    pub fn random_id<R: Rng + ?Sized>(&self, rng: &mut R) -> NodeId {
        let hi: u128 = rng.gen();
        let lo: u128 = rng.gen();
        self.wrap(U256::from_words(hi, lo))
    }

    /// `id + delta` around the ring.
    pub fn add(&self, id: NodeId, delta: U256) -> NodeId {
        self.wrap(id.0.wrapping_add(delta))
    }

    /// `id - delta` around the ring.
    pub fn sub(&self, id: NodeId, delta: U256) -> NodeId {
        self.wrap(id.0.wrapping_sub(delta))
    }

    /// Scales the ring size by a fraction in `[0, 1]`, rounding to the
    /// nearest address distance.
    pub fn scaled(&self, fraction: f64) -> U256 {
        let fraction = fraction.clamp(0.0, 1.0);
        if fraction >= 1.0 {
            return self.size();
        }
        // Keep 53 significant bits of the fraction, then shift into place.
        let mantissa_bits = 53u32;
        let scaled = (fraction * (1u64 << mantissa_bits) as f64).round();
        let scaled: U256 = scaled.as_u256();
        if self.bits >= mantissa_bits {
            scaled << (self.bits - mantissa_bits)
        } else {
            let shift = mantissa_bits - self.bits;
            let half = U256::ONE << (shift - 1);
            (scaled + half) >> shift
        }
    }

    /// Distance as a fraction of the ring size.
    pub fn fraction(&self, distance: U256) -> f64 {
        distance.as_f64() / self.size().as_f64()
    }
}

impl Default for AddressSpace {
    fn default() -> Self {
        Self { bits: DEFAULT_BITS }
    }
}

/// Ring address of an overlay participant or a DHT key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub U256);

impl NodeId {
    pub fn value(&self) -> U256 {
        self.0
    }

    /// Big-endian encoding truncated to the space's byte width.
    pub fn to_bytes(&self, space: AddressSpace) -> Vec<u8> {
        let all = self.0.to_be_bytes();
        all[all.len() - space.id_bytes()..].to_vec()
    }

    pub fn from_bytes(bytes: &[u8], space: AddressSpace) -> NodeId {
        let mut buf = [0u8; 32];
        let n = bytes.len().min(32);
        buf[32 - n..].copy_from_slice(&bytes[bytes.len() - n..]);
        space.wrap(U256::from_be_bytes(buf))
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Clockwise arc from `start` to `end`, possibly wrapping through zero.
///
/// `start` is always inside the arc. With `end_inclusive` and
/// `start == end` the arc is the single address `start`; without it and
/// `start == end` the arc is the whole ring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RingRange {
    pub start: NodeId,
    pub end: NodeId,
    pub end_inclusive: bool,
}

impl RingRange {
    pub fn new(start: NodeId, end: NodeId, end_inclusive: bool) -> Self {
        Self { start, end, end_inclusive }
    }

    pub fn half_open(start: NodeId, end: NodeId) -> Self {
        Self::new(start, end, false)
    }

    pub fn closed(start: NodeId, end: NodeId) -> Self {
        Self::new(start, end, true)
    }
}

impl fmt::Display for RingRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let close = if self.end_inclusive { ']' } else { ')' };
        write!(f, "[{}, {}{}", self.start, self.end, close)
    }
}

/// `(b - a) mod size`.
pub fn clockwise_distance(a: NodeId, b: NodeId, space: AddressSpace) -> U256 {
    b.0.wrapping_sub(a.0) & space.mask()
}

/// Shorter of the two arcs between `a` and `b`.
pub fn ring_distance(a: NodeId, b: NodeId, space: AddressSpace) -> U256 {
    let cw = clockwise_distance(a, b, space);
    let ccw = clockwise_distance(b, a, space);
    cw.min(ccw)
}

/// Orders candidates by closeness to `target`, smaller address first on ties.
pub fn closeness_cmp(target: NodeId, a: NodeId, b: NodeId, space: AddressSpace) -> Ordering {
    ring_distance(a, target, space)
        .cmp(&ring_distance(b, target, space))
        .then(a.cmp(&b))
}

/// Candidate closest to `target` by ring distance, smaller address on ties.
pub fn closest_to<I>(target: NodeId, candidates: I, space: AddressSpace) -> Result<NodeId>
where
    I: IntoIterator<Item = NodeId>,
{
    candidates
        .into_iter()
        .min_by(|a, b| closeness_cmp(target, *a, *b, space))
        .ok_or(Error::EmptyCandidates)
}

/// Whether `addr` lies on the clockwise arc described by `range`.
pub fn in_range(addr: NodeId, range: &RingRange, space: AddressSpace) -> bool {
    let offset = clockwise_distance(range.start, addr, space);
    let span = clockwise_distance(range.start, range.end, space);
    if range.end_inclusive {
        offset <= span
    } else if span == U256::ZERO {
        // [x, x) covers the whole ring.
        true
    } else {
        offset < span
    }
}

/// Outcome of one greedy routing decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hop {
    Forward(NodeId),
    DeliverHere,
}

/// Greedy recursive routing step.
///
/// Forwards to the connection that is strictly closer to `target` than
/// `self_id` under (ring distance, address) ordering; delivers locally
/// when no connection improves on this node.
pub fn next_greedy_hop<I>(self_id: NodeId, connections: I, target: NodeId, space: AddressSpace) -> Hop
where
    I: IntoIterator<Item = NodeId>,
{
    let best = connections
        .into_iter()
        .filter(|c| *c != self_id)
        .min_by(|a, b| closeness_cmp(target, *a, *b, space));
    match best {
        Some(c) if closeness_cmp(target, c, self_id, space) == Ordering::Less => Hop::Forward(c),
        _ => Hop::DeliverHere,
    }
}

/// Sorts addresses clockwise starting from `origin` (origin first if present).
pub fn sort_clockwise(origin: NodeId, ids: &mut [NodeId], space: AddressSpace) {
    ids.sort_by_key(|id| clockwise_distance(origin, *id, space));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s8() -> AddressSpace {
        AddressSpace::new(8).unwrap()
    }

    fn id(v: u128) -> NodeId {
        s8().id(v)
    }

    fn d(v: u128) -> U256 {
        U256::new(v)
    }

    #[test]
    fn clockwise_examples() {
        assert_eq!(clockwise_distance(id(10), id(250), s8()), d(240));
        assert_eq!(clockwise_distance(id(250), id(10), s8()), d(16));
        assert_eq!(clockwise_distance(id(77), id(77), s8()), d(0));
    }

    #[test]
    fn ring_distance_examples() {
        assert_eq!(ring_distance(id(250), id(10), s8()), d(16));
        assert_eq!(ring_distance(id(0), id(128), s8()), d(128));
        assert_eq!(ring_distance(id(3), id(3), s8()), d(0));
    }

    #[test]
    fn closest_examples() {
        assert_eq!(closest_to(id(100), [id(90), id(120)], s8()).unwrap(), id(90));
        assert_eq!(closest_to(id(100), [id(110), id(90)], s8()).unwrap(), id(90));
        assert_eq!(closest_to(id(100), [id(100), id(7)], s8()).unwrap(), id(100));
        assert!(matches!(closest_to(id(1), [], s8()), Err(Error::EmptyCandidates)));
    }

    #[test]
    fn in_range_examples() {
        let r = RingRange::half_open(id(250), id(10));
        assert!(in_range(id(5), &r, s8()));
        assert!(!in_range(id(100), &r, s8()));
        assert!(in_range(id(250), &r, s8()));
        assert!(!in_range(id(10), &r, s8()));
        assert!(in_range(id(10), &RingRange::closed(id(250), id(10)), s8()));
        assert!(in_range(id(42), &RingRange::closed(id(42), id(42)), s8()));
        assert!(!in_range(id(43), &RingRange::closed(id(42), id(42)), s8()));
        assert!(in_range(id(43), &RingRange::half_open(id(42), id(42)), s8()));
    }

    #[test]
    fn greedy_examples() {
        // Candidate distances to 100: 0 -> 100, 64 -> 36, 128 -> 28, 192 -> 92.
        let hop = next_greedy_hop(id(0), [id(64), id(128), id(192)], id(100), s8());
        assert_eq!(hop, Hop::Forward(id(128)));
        // 90 -> 10, 64 -> 36, 128 -> 28.
        let hop = next_greedy_hop(id(90), [id(64), id(128)], id(100), s8());
        assert_eq!(hop, Hop::DeliverHere);
        let hop = next_greedy_hop(id(5), [id(64), id(100), id(128)], id(100), s8());
        assert_eq!(hop, Hop::Forward(id(100)));
    }

    #[test]
    fn greedy_tie_prefers_smaller_address() {
        // 95 and 105 are equidistant from 100; the smaller one wins.
        assert_eq!(next_greedy_hop(id(105), [id(95)], id(100), s8()), Hop::Forward(id(95)));
        assert_eq!(next_greedy_hop(id(95), [id(105)], id(100), s8()), Hop::DeliverHere);
    }

    #[test]
    fn address_bits_bounds() {
        assert!(AddressSpace::new(0).is_err());
        assert!(AddressSpace::new(161).is_err());
        let big = AddressSpace::new(160).unwrap();
        assert_eq!(big.id_bytes(), 20);
        assert_eq!(big.size(), U256::ONE << 160u32);
    }

    #[test]
    fn scaled_fraction_matches_closed_form() {
        assert_eq!(s8().scaled(0.5), d(128));
        assert_eq!(s8().scaled(1.0 / 256.0), d(1));
        let big = AddressSpace::new(160).unwrap();
        assert_eq!(big.scaled(0.25), U256::ONE << 158u32);
    }

    #[test]
    fn bytes_round_trip() {
        let space = AddressSpace::new(160).unwrap();
        let mut rng = rand::thread_rng();
        for _ in 0..32 {
            let x = space.random_id(&mut rng);
            assert_eq!(NodeId::from_bytes(&x.to_bytes(space), space), x);
        }
    }

    /// Exhaustive metric axioms on the 8-bit ring.
    #[test]
    fn ring_distance_is_a_metric_on_8_bits() {
        let sp = s8();
        for a in 0..256u128 {
            for b in 0..256u128 {
                let dab = ring_distance(id(a), id(b), sp);
                assert_eq!(dab, ring_distance(id(b), id(a), sp));
                assert_eq!(dab == U256::ZERO, a == b);
                for c in (0..256u128).step_by(7) {
                    let lhs = dab;
                    let rhs = ring_distance(id(a), id(c), sp) + ring_distance(id(c), id(b), sp);
                    assert!(lhs <= rhs, "triangle fails for {a} {b} {c}");
                }
            }
        }
    }
}
