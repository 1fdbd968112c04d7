//! Private overlays bootstrapped through a public structured overlay.
//!
//! The crate contains the ring arithmetic, a deterministic event-driven
//! simulator, the overlay/DHT/broadcast/PKI protocol pieces that run inside
//! it, a static network modeler, and the experiment harness.

pub mod broadcast;
pub mod dht;
pub mod error;
pub mod modeler;
pub mod overlay;
pub mod private;
pub mod ring;
pub mod security;
pub mod sim;
pub mod stats;
pub mod world;
pub mod harness;

pub use error::{Error, Result};
pub use ring::{AddressSpace, NodeId, RingRange};
