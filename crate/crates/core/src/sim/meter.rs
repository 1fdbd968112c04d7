//! Per-process byte accounting with fixed-length windows.

use std::collections::BTreeMap;

use crate::sim::kernel::Time;

/// What a transmission was for; used to split traffic totals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TrafficTag {
    Handshake,
    Ping,
    Routing,
    Topology,
    Dht,
    Discovery,
    Broadcast,
    Revocation,
    Relay,
}

impl TrafficTag {
    pub const ALL: [TrafficTag; 9] = [
        TrafficTag::Handshake,
        TrafficTag::Ping,
        TrafficTag::Routing,
        TrafficTag::Topology,
        TrafficTag::Dht,
        TrafficTag::Discovery,
        TrafficTag::Broadcast,
        TrafficTag::Revocation,
        TrafficTag::Relay,
    ];
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Counters {
    sent: u64,
    received: u64,
    // window index -> (sent, received)
    windows: BTreeMap<u64, (u64, u64)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BandwidthMeter {
    window_ms: Time,
    nodes: Vec<Counters>,
    tags: BTreeMap<(TrafficTag, u64), u64>,
    dropped: u64,
    dropped_messages: u64,
}

impl BandwidthMeter {
    pub fn new(window_ms: Time) -> Self {
        Self {
            window_ms: window_ms.max(1),
            nodes: Vec::new(),
            tags: BTreeMap::new(),
            dropped: 0,
            dropped_messages: 0,
        }
    }

    pub fn window_ms(&self) -> Time {
        self.window_ms
    }

    fn node(&mut self, node: usize) -> &mut Counters {
        if node >= self.nodes.len() {
            self.nodes.resize_with(node + 1, Counters::default);
        }
        &mut self.nodes[node]
    }

    pub fn record_send(&mut self, node: usize, tag: TrafficTag, bytes: u64, now: Time) {
        let w = now / self.window_ms;
        let c = self.node(node);
        c.sent += bytes;
        c.windows.entry(w).or_default().0 += bytes;
        *self.tags.entry((tag, w)).or_default() += bytes;
    }

    pub fn record_receive(&mut self, node: usize, bytes: u64, now: Time) {
        let w = now / self.window_ms;
        let c = self.node(node);
        c.received += bytes;
        c.windows.entry(w).or_default().1 += bytes;
    }

    pub fn record_drop(&mut self, bytes: u64) {
        self.dropped += bytes;
        self.dropped_messages += 1;
    }

    pub fn sent(&self, node: usize) -> u64 {
        self.nodes.get(node).map_or(0, |c| c.sent)
    }

    pub fn received(&self, node: usize) -> u64 {
        self.nodes.get(node).map_or(0, |c| c.received)
    }

    pub fn total_sent(&self) -> u64 {
        self.nodes.iter().map(|c| c.sent).sum()
    }

    pub fn total_received(&self) -> u64 {
        self.nodes.iter().map(|c| c.received).sum()
    }

    pub fn dropped_bytes(&self) -> u64 {
        self.dropped
    }

    pub fn dropped_messages(&self) -> u64 {
        self.dropped_messages
    }

    fn window_span(&self, from: Time, to: Time) -> std::ops::Range<u64> {
        from / self.window_ms..to.div_ceil(self.window_ms)
    }

    /// `(sent, received)` over the windows overlapping `[from, to)`.
    /// Exact when both bounds are window-aligned.
    pub fn node_bytes_between(&self, node: usize, from: Time, to: Time) -> (u64, u64) {
        let Some(c) = self.nodes.get(node) else {
            return (0, 0);
        };
        c.windows
            .range(self.window_span(from, to))
            .fold((0, 0), |(s, r), (_, (ws, wr))| (s + ws, r + wr))
    }

    /// Bytes sent under `tag` over the windows overlapping `[from, to)`.
    pub fn tag_bytes_between(&self, tag: TrafficTag, from: Time, to: Time) -> u64 {
        let span = self.window_span(from, to);
        self.tags
            .range((tag, span.start)..(tag, span.end))
            .map(|(_, v)| *v)
            .sum()
    }

    /// Bytes sent by everyone over the windows overlapping `[from, to)`.
    pub fn sent_between(&self, from: Time, to: Time) -> u64 {
        TrafficTag::ALL
            .iter()
            .map(|t| self.tag_bytes_between(*t, from, to))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_sum_to_totals() {
        let mut m = BandwidthMeter::new(1000);
        m.record_send(0, TrafficTag::Ping, 20, 10);
        m.record_receive(1, 20, 60);
        m.record_send(1, TrafficTag::Ping, 20, 1500);
        m.record_receive(0, 20, 1550);
        m.record_send(0, TrafficTag::Dht, 100, 2999);
        m.record_drop(100);
        assert_eq!(m.sent(0), 120);
        assert_eq!(m.node_bytes_between(0, 0, 3000), (120, 20));
        assert_eq!(m.node_bytes_between(0, 1000, 2000), (0, 20));
        assert_eq!(m.tag_bytes_between(TrafficTag::Ping, 0, 3000), 40);
        assert_eq!(m.tag_bytes_between(TrafficTag::Dht, 0, 2000), 0);
        assert_eq!(m.total_sent(), m.total_received() + m.dropped_bytes());
        assert_eq!(m.sent_between(0, 3000), m.total_sent());
    }

    #[test]
    fn unknown_node_is_zero() {
        let m = BandwidthMeter::new(60_000);
        assert_eq!(m.sent(7), 0);
        assert_eq!(m.node_bytes_between(7, 0, 1), (0, 0));
    }
}
