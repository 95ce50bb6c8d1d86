//! Networked runtime for the masked GWAS pipeline.
//!
//! One server and `P` parties exchange length-prefixed [`frame`]s whose
//! payloads are typed in [`message`]. The [`server`] sequences the phases
//! behind barriers, each [`party`] runs its side of every phase, and the
//! [`simulator`] wires both together in one process over memory channels.

pub mod error;
pub mod frame;
pub mod message;
pub mod party;
pub mod phase;
pub mod report;
pub mod server;
pub mod simulator;
pub mod transport;

pub use error::{NetError, NetResult};
