//! Discrete-event simulation of the bottleneck link shared by the workers.

mod collective;
mod link;
mod schedule;

pub use collective::{allgather_crossover, CollectiveKind, CollectiveModel};
pub use link::{LinkConfig, LinkState, TraceEvent, TraceKind, TransferResult};
pub use schedule::{make_schedule, BandwidthSchedule, Schedule};
