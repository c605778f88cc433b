//! Prototyping and benchmarking kit for geo-replicated key-value consistency
//! protocols.
//!
//! The crate hosts protocol implementations behind a small event-driven
//! kernel ([`runtime`]) that runs either over TCP or inside a seeded
//! discrete-event simulator ([`sim`]). Four reference protocols live under
//! [`protocols`]: eventual consistency, COPS-style explicit dependency
//! tracking, GentleRain, and CausalSpartan.

pub mod checker;
pub mod codec;
pub mod config;
pub mod descriptor;
pub mod experiment;
pub mod history;
pub mod hlc;
pub mod node;
pub mod protocols;
pub mod runtime;
pub mod sim;
pub mod storage;
pub mod workload;

pub use node::{ClusterShape, NodeId, TreeShape};
