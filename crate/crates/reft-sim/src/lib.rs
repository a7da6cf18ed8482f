//! In-memory checkpoint protection and snapshot scheduling for hybrid-parallel
//! training, plus a discrete-event simulator to measure what the scheduling
//! costs and a set of analytical models to decide how often to do it.
//!
//! The crate is organized around the lifecycle of a training snapshot:
//!
//! * [`topology`] lays out nodes and sharding groups from a cluster spec.
//! * [`pipeline`] builds 1F1B stage schedules and profiles their bubbles.
//! * [`has`] plans where snapshot transfers go (bubbles, compute overlap,
//!   communication overlap) and sizes the spillover.
//! * [`simkernel`] executes schedules and snapshot plans as discrete events
//!   and reports per-iteration timing.
//! * [`protection`] adds intra-node redundancy: peer copies, XOR parity,
//!   and host-side optimizer recomputation.
//! * [`store`] holds double-buffered snapshot sets in memory, with tmpfs and
//!   archival checkpoint-file formats.
//! * [`failure`] samples Weibull failures and drives per-node health signals.
//! * [`recovery`] reassembles full parameter state after failures, falling
//!   back to the archival checkpoint when redundancy is exhausted.
//! * [`reliability`] closed-form survival probabilities and snapshot-interval
//!   planning.

pub mod config;
pub mod error;
pub mod failure;
pub mod has;
pub mod pipeline;
pub mod protection;
pub mod recovery;
pub mod reliability;
pub mod simkernel;
pub mod store;
pub mod topology;

pub use error::{Error, Result};
