//! Agent-based crowdshipping simulation with an embedded streaming delay
//! predictor and a bid-based task-transfer negotiation engine.
//!
//! The library is organized around the lifecycle of a delivery task:
//!
//! - [`traces`] parses or synthesizes courier GPS trips and turns them into a
//!   timed event stream.
//! - [`situation`] folds each courier's GPS events into a sliding-window
//!   situation vector (location, speed aggregates, stop counts).
//! - [`predictor`] hosts the incremental Hoeffding-tree classifier that maps
//!   (situation, task) feature vectors to an on-time probability, plus the
//!   training buffer and prequential metrics around it.
//! - [`courier`] models tasks and self-interested couriers: utility, detour
//!   cost, noisy arrival estimates, bids, and transfer acceptance.
//! - [`negotiation`] implements the provider-side machinery: the global
//!   situation registry, the trigger policy, candidate ranking, and the
//!   offer/bid/accept protocol (with a forced-transfer variant).
//! - [`sim`] runs the deterministic fixed-step world that ties everything
//!   together, and [`experiment`] drives the canned experiment setups and
//!   writes result files.

pub mod courier;
pub mod experiment;
pub mod geo;
pub mod negotiation;
pub mod predictor;
pub mod sim;
pub mod situation;
pub mod traces;

use std::fmt;

/// Identifier of a courier (one per trip appearing in the trace data).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CourierId(pub u64);

/// Identifier of a delivery task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskId(pub u64);

impl fmt::Display for CourierId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}
