//! Networked roles of the swarm: block servers, registry replicas, the
//! client library, and the HTTP gateway, plus an in-process test harness.

pub mod client;
pub mod events;
pub mod gateway;
pub mod harness;
pub mod registry;
pub mod rpc;
pub mod server;
pub mod shaper;
