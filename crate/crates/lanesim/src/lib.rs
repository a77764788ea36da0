//! Discrete-event simulator of fine-grained GPU sharing among deep-learning
//! jobs. GPU memory is split into a persistent region (model weights, grows
//! from offset 0) and a set of reference-counted ephemeral lanes (scratch
//! memory for one iteration, carved downward from the top of memory).
//! Execution within a lane is serialized at iteration granularity; lanes
//! proceed in parallel. Scheduling policies decide admission and which
//! resident job a lane runs next.

pub mod engine;
pub mod error;
pub mod lane;
pub mod metrics;
pub mod policy;
pub mod units;
pub mod workload;

pub use error::SimError;
