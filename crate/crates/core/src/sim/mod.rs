//! Discrete-event simulation substrate: clock, latency, NAT rules, meters.

pub mod kernel;
pub mod latency;
pub mod meter;
pub mod nat;

pub use kernel::{EventHandle, Kernel, RunStats, Time};
pub use latency::{assign_sites, synthetic_latency, LatencyMatrix};
pub use meter::{BandwidthMeter, TrafficTag};
pub use nat::{assign_nat_profiles, can_connect_directly, NatFractions, NatProfile};
