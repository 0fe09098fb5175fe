use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveKind {
    /// Bandwidth-optimal ring allreduce on a dense tensor.
    RingAllreduceDense,
    /// Every worker receives every other worker's sparse payload.
    AllgatherSparse,
}

/// Per-worker bottleneck volume of one synchronization round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollectiveModel {
    kind: CollectiveKind,
    workers: usize,
}

impl CollectiveModel {
    pub fn new(kind: CollectiveKind, workers: usize) -> Result<Self> {
        if workers < 2 {
            return Err(Error::config(format!("collectives need at least 2 workers, got {workers}")));
        }
        Ok(Self { kind, workers })
    }

    pub fn kind(&self) -> CollectiveKind {
        self.kind
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Bits each worker moves through its link for a `payload_bits` payload:
    /// `2 (N-1)/N * P` for ring allreduce, `(N-1) * P` for allgather.
    pub fn volume(&self, payload_bits: f64) -> f64 {
        let n = self.workers as f64;
        match self.kind {
            CollectiveKind::RingAllreduceDense => 2.0 * (n - 1.0) / n * payload_bits,
            CollectiveKind::AllgatherSparse => (n - 1.0) * payload_bits,
        }
    }
}

/// Sparse-to-dense payload size ratio below which allgather moves fewer bits
/// than ring allreduce: `2 / N`.
pub fn allgather_crossover(workers: usize) -> f64 {
    2.0 / workers as f64
}
