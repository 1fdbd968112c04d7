//! Deterministic discrete-event queue.
//!
//! Events fire in `(fire_time, sequence)` order; the sequence number is the
//! insertion order, so two events scheduled for the same millisecond run in
//! the order they were scheduled. The queue stores plain data, which keeps a
//! whole simulation `Clone` and replayable.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

/// Virtual time in milliseconds.
pub type Time = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventHandle(u64);

#[derive(Debug, Clone)]
struct Scheduled<E> {
    fire_time: Time,
    sequence: u64,
    action: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        self.fire_time == other.fire_time && self.sequence == other.sequence
    }
}

impl<E> Eq for Scheduled<E> {}

impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Scheduled<E> {
    // BinaryHeap is a max-heap; reverse so the earliest event pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .fire_time
            .cmp(&self.fire_time)
            .then_with(|| other.sequence.cmp(&self.sequence))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunStats {
    pub executed: u64,
    pub pending: usize,
    pub clock: Time,
}

#[derive(Debug, Clone)]
pub struct Kernel<E> {
    now: Time,
    next_sequence: u64,
    queue: BinaryHeap<Scheduled<E>>,
    cancelled: HashSet<u64>,
    executed: u64,
}

impl<E> Default for Kernel<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Kernel<E> {
    pub fn new() -> Self {
        Self {
            now: 0,
            next_sequence: 0,
            queue: BinaryHeap::new(),
            cancelled: HashSet::new(),
            executed: 0,
        }
    }

    pub fn now(&self) -> Time {
        self.now
    }

    pub fn executed(&self) -> u64 {
        self.executed
    }

    pub fn pending(&self) -> usize {
        self.queue.len() - self.cancelled.len()
    }

    /// Enqueues `action` to fire `delay` ms from now.
    pub fn schedule(&mut self, delay: Time, action: E) -> EventHandle {
        self.schedule_at(self.now.saturating_add(delay), action)
    }

    /// Enqueues `action` at an absolute time (clamped to now).
    pub fn schedule_at(&mut self, fire_time: Time, action: E) -> EventHandle {
        let sequence = self.next_sequence;
        self.next_sequence += 1;
        self.queue.push(Scheduled {
            fire_time: fire_time.max(self.now),
            sequence,
            action,
        });
        EventHandle(sequence)
    }

    /// Cancels a pending event. Returns false when it already fired or was
    /// never scheduled.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        if handle.0 >= self.next_sequence {
            return false;
        }
        if !self.queue.iter().any(|s| s.sequence == handle.0) {
            return false;
        }
        self.cancelled.insert(handle.0)
    }

    /// Time of the next live event, if any.
    pub fn peek_time(&mut self) -> Option<Time> {
        self.skip_cancelled();
        self.queue.peek().map(|s| s.fire_time)
    }

    fn skip_cancelled(&mut self) {
        while let Some(top) = self.queue.peek() {
            if self.cancelled.remove(&top.sequence) {
                self.queue.pop();
            } else {
                break;
            }
        }
    }

    /// Pops the next event with `fire_time <= t_end`, advancing the clock to
    /// it. Returns `None` once no such event remains.
    pub fn pop_until(&mut self, t_end: Time) -> Option<(Time, u64, E)> {
        self.skip_cancelled();
        match self.queue.peek() {
            Some(top) if top.fire_time <= t_end => {
                let ev = self.queue.pop().expect("peeked");
                self.now = ev.fire_time;
                self.executed += 1;
                Some((ev.fire_time, ev.sequence, ev.action))
            }
            _ => None,
        }
    }

    /// Moves the clock forward without executing anything.
    pub fn advance_to(&mut self, t: Time) {
        self.now = self.now.max(t);
    }

    /// Executes every event due by `t_end` and leaves the clock at `t_end`.
    pub fn run_until<F>(&mut self, t_end: Time, mut handler: F) -> RunStats
    where
        F: FnMut(&mut Self, Time, E),
    {
        let start = self.executed;
        while let Some((t, _, action)) = self.pop_until(t_end) {
            handler(self, t, action);
        }
        self.advance_to(t_end);
        RunStats {
            executed: self.executed - start,
            pending: self.pending(),
            clock: self.now,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_time_runs_in_insertion_order() {
        let mut k = Kernel::new();
        k.schedule(0, "x");
        k.schedule(0, "y");
        let mut seen = Vec::new();
        k.run_until(10, |_, _, e| seen.push(e));
        assert_eq!(seen, vec!["x", "y"]);
    }

    #[test]
    fn delay_is_relative_to_now() {
        let mut k: Kernel<&str> = Kernel::new();
        k.run_until(10, |_, _, _| {});
        k.schedule(5, "x");
        let mut fired = None;
        k.run_until(100, |_, t, _| fired = Some(t));
        assert_eq!(fired, Some(15));
    }

    #[test]
    fn cancelled_never_runs() {
        let mut k = Kernel::new();
        let h = k.schedule(3, 1);
        k.schedule(4, 2);
        assert!(k.cancel(h));
        assert!(!k.cancel(h));
        let mut seen = Vec::new();
        k.run_until(10, |_, _, e| seen.push(e));
        assert_eq!(seen, vec![2]);
        assert_eq!(k.pending(), 0);
    }

    #[test]
    fn empty_queue_advances_clock() {
        let mut k: Kernel<()> = Kernel::new();
        let stats = k.run_until(500, |_, _, _| {});
        assert_eq!(stats.clock, 500);
        assert_eq!(stats.executed, 0);
    }

    #[test]
    fn chained_events_within_horizon_execute() {
        let mut k = Kernel::new();
        k.schedule(1, 0u32);
        let mut seen = Vec::new();
        k.run_until(10, |k, t, e| {
            seen.push((t, e));
            if e < 3 {
                k.schedule(2, e + 1);
            }
        });
        assert_eq!(seen, vec![(1, 0), (3, 1), (5, 2), (7, 3)]);
    }

    #[test]
    fn events_past_horizon_stay_queued() {
        let mut k = Kernel::new();
        k.schedule(50, ());
        let stats = k.run_until(20, |_, _, _| panic!("fired early"));
        assert_eq!(stats.pending, 1);
        assert_eq!(k.now(), 20);
    }
}
