//! Network-aware adaptive gradient compression for data-parallel training.
//!
//! The crate couples a bandwidth-delay-product controller ([`controller`])
//! with a quantize / prune / TopK compression pipeline ([`compressor`]) and
//! runs both inside a deterministic fluid simulation of a bottleneck link
//! ([`netsim`]), driving desk-scale SGD ([`trainer`]) and an experiment
//! harness ([`experiment`]).

// Validation uses `!(x > 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod compressor;
pub mod controller;
pub mod error;
pub mod experiment;
pub mod grad;
pub mod netsim;
pub mod trainer;

pub use compressor::{CompressedPayload, CompressionConfig, Precision, PruneMask};
pub use controller::{ControllerConfig, ControllerState, IntervalMeasurement, Phase};
pub use error::{Error, Result};
pub use grad::{GradientVector, ResidualBuffer};
pub use experiment::{ExperimentConfig, ExperimentRecord};
pub use netsim::{BandwidthSchedule, LinkConfig, LinkState};
pub use trainer::{StrategyKind, TaskConfig, Trainer, TrainingConfig};
