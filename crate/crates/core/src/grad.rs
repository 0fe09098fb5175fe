//! Flat gradient containers and the error-feedback residual.
//!
//! Gradients are stored as one concatenated `f64` vector per worker. The
//! residual buffer holds whatever mass the compressor did not transmit and is
//! folded back into the next step's gradient.

use crate::error::{Error, Result};

/// A flat model gradient tagged with the training step that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    values: Vec<f64>,
    step_index: u64,
}

impl GradientVector {
    /// Builds a gradient, rejecting NaN and infinite entries.
    pub fn new(values: Vec<f64>, step_index: u64) -> Result<Self> {
        check_finite(&values)?;
        Ok(Self { values, step_index })
    }

    pub fn zeros(dim: usize, step_index: u64) -> Self {
        Self {
            values: vec![0.0; dim],
            step_index,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn l2_norm(&self) -> f64 {
        l2_norm_slice(&self.values)
    }
}

/// Per-worker store of untransmitted gradient mass.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBuffer {
    values: Vec<f64>,
}

impl ResidualBuffer {
    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        check_finite(&values)?;
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }
}

/// Euclidean norm of a gradient.
pub fn l2_norm(g: &GradientVector) -> f64 {
    g.l2_norm()
}

pub(crate) fn l2_norm_slice(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Returns `g + r` elementwise. Neither input is modified.
pub fn accumulate(g: &GradientVector, r: &ResidualBuffer) -> Result<GradientVector> {
    check_dim(g.dim(), r.dim())?;
    let values = g
        .values
        .iter()
        .zip(&r.values)
        .map(|(a, b)| a + b)
        .collect();
    GradientVector::new(values, g.step_index)
}

/// Residual left after transmitting `transmitted_dense` out of `accumulated`.
pub fn update_residual(
    accumulated: &GradientVector,
    transmitted_dense: &GradientVector,
) -> Result<ResidualBuffer> {
    check_dim(accumulated.dim(), transmitted_dense.dim())?;
    let values = accumulated
        .values
        .iter()
        .zip(&transmitted_dense.values)
        .map(|(a, t)| a - t)
        .collect();
    ResidualBuffer::from_values(values)
}

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}
