//! Adaptive gradient compression: half-precision quantization, weight-magnitude
//! pruning and TopK sparsification, applied after error-feedback accumulation.
//!
//! The payload carries exact wire-size accounting. On the wire a payload is a
//! 16-byte header (step index: 8, k: 4, precision flag + reserved: 4), then
//! `k` 4-byte indices, then `k` values of 4 bytes (full precision) or 2 bytes
//! (half precision).


use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{accumulate, check_dim, update_residual};
use crate::grad::{GradientVector, ResidualBuffer};

pub const HEADER_BYTES: u64 = 16;
pub const INDEX_WIDTH_BYTES: u64 = 4;

/// Wire precision of payload values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Full32,
    Half16,
}

impl Precision {
    pub fn value_width_bytes(self) -> u64 {
        match self {
            Precision::Full32 => 4,
            Precision::Half16 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressionConfig {
    /// Quantization engages only when the ratio is strictly below this.
    pub tr_q: f64,
    /// Quantization engages only when the gradient L2 norm exceeds this.
    pub tr_d: f64,
    pub index_width_bytes: u64,
    pub header_bytes: u64,
    /// Exclude the gradients of small-magnitude weights before TopK.
    pub pruning: bool,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            tr_q: 0.05,
            tr_d: 1e-6,
            index_width_bytes: INDEX_WIDTH_BYTES,
            header_bytes: HEADER_BYTES,
            pruning: true,
        }
    }
}

impl CompressionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tr_q >= 0.0 && self.tr_q <= 1.0) {
            return Err(Error::config(format!("tr_q must lie in [0, 1], got {}", self.tr_q)));
        }
        if !(self.tr_d >= 0.0 && self.tr_d.is_finite()) {
            return Err(Error::config(format!("tr_d must be finite and >= 0, got {}", self.tr_d)));
        }
        if self.index_width_bytes == 0 {
            return Err(Error::config("index_width_bytes must be positive"));
        }
        Ok(())
    }

    /// Bytes on the wire for a payload with `k` entries.
    pub fn wire_size(&self, k: usize, precision: Precision) -> u64 {
        let k = k as u64;
        self.header_bytes + k * self.index_width_bytes + k * precision.value_width_bytes()
    }

    /// Whether the quantization gate fires for this ratio and gradient norm.
    pub fn quantization_gate(&self, ratio: f64, l2: f64) -> bool {
        ratio < self.tr_q && l2 > self.tr_d
    }

    /// Wire size a payload will have when compressed at `ratio`, given whether
    /// the accumulated gradient clears the density threshold.
    pub fn predicted_wire_size(&self, ratio: f64, dim: usize, dense_enough: bool) -> u64 {
        let (precision, effective) = if ratio < self.tr_q && dense_enough {
            (Precision::Half16, (2.0 * ratio).min(1.0))
        } else {
            (Precision::Full32, ratio)
        };
        self.wire_size(keep_count(effective, dim), precision)
    }
}

/// Number of entries TopK keeps: `max(1, round(ratio * dim))`, capped at `dim`.
pub fn keep_count(ratio: f64, dim: usize) -> usize {
    if dim == 0 {
        return 0;
    }
    ((ratio * dim as f64).round() as usize).clamp(1, dim)
}

/// Sparse, possibly quantized gradient as it crosses the network.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedPayload {
    indices: Vec<u32>,
    values: Vec<f64>,
    precision: Precision,
    wire_size_bytes: u64,
    source_step: u64,
}

impl CompressedPayload {
    /// Assembles a payload, checking index order and that every value is
    /// representable at `precision`.
    pub fn new(
        indices: Vec<u32>,
        values: Vec<f64>,
        precision: Precision,
        source_step: u64,
        cfg: &CompressionConfig,
    ) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(Error::config(format!(
                "payload has {} indices but {} values",
                indices.len(),
                values.len()
            )));
        }
        if let Some(w) = indices.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "payload indices not strictly increasing at {} -> {}",
                w[0], w[1]
            )));
        }
        if precision == Precision::Half16 {
            if let Some(v) = values.iter().find(|v| to_half(**v) != **v) {
                return Err(Error::config(format!("value {v} is not representable at half precision")));
            }
        }
        let wire_size_bytes = cfg.wire_size(indices.len(), precision);
        Ok(Self {
            indices,
            values,
            precision,
            wire_size_bytes,
            source_step,
        })
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    /// Kept values, widened to `f64`. Half-precision payloads only hold values
    /// exactly representable in binary16.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn wire_size_bytes(&self) -> u64 {
        self.wire_size_bytes
    }

    pub fn wire_size_bits(&self) -> u64 {
        self.wire_size_bytes * 8
    }

    pub fn source_step(&self) -> u64 {
        self.source_step
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Bytes used by the value section alone.
    pub fn value_section_bytes(&self) -> u64 {
        self.values.len() as u64 * self.precision.value_width_bytes()
    }
}

/// Gradient indices excluded from transmission for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    excluded: Vec<usize>,
    pruning_rate: f64,
}

impl PruneMask {
    pub fn empty() -> Self {
        Self {
            excluded: Vec::new(),
            pruning_rate: 0.0,
        }
    }

    pub fn from_indices(mut excluded: Vec<usize>, pruning_rate: f64) -> Self {
        excluded.sort_unstable();
        excluded.dedup();
        Self {
            excluded,
            pruning_rate,
        }
    }

    /// Sorted excluded indices.
    pub fn excluded(&self) -> &[usize] {
        &self.excluded
    }

    pub fn pruning_rate(&self) -> f64 {
        self.pruning_rate
    }

    pub fn len(&self) -> usize {
        self.excluded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.excluded.is_empty()
    }
}

/// Result of the quantization gate.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub grad: GradientVector,
    pub precision: Precision,
    pub ratio: f64,
}

/// Rounds the gradient to binary16 when the ratio is below `tr_q` and the
/// gradient is not effectively zero; the ratio then doubles (capped at 1).
pub fn adaptive_quantize(g: &GradientVector, ratio: f64, cfg: &CompressionConfig) -> Result<Quantized> {
    check_ratio(ratio)?;
    if cfg.quantization_gate(ratio, g.l2_norm()) {
        let values = g.values().iter().map(|v| to_half(*v)).collect();
        Ok(Quantized {
            grad: GradientVector::new(values, g.step_index())?,
            precision: Precision::Half16,
            ratio: (2.0 * ratio).min(1.0),
        })
    } else {
        Ok(Quantized {
            grad: g.clone(),
            precision: Precision::Full32,
            ratio,
        })
    }
}

/// Rounds to the nearest binary16 value, saturating at ±65504 so the result
/// stays finite. The rounding error lands in the residual.
pub(crate) fn to_half(v: f64) -> f64 {
    let max = f64::from(f16::MAX);
    f64::from(f16::from_f64(v.clamp(-max, max)))
}

/// Pruning rate for a compression ratio: `0.5 * (1 - ratio)`.
pub fn pruning_rate(ratio: f64) -> f64 {
    0.5 * (1.0 - ratio)
}

/// Masks the `floor(pruning_rate * D)` weights of smallest magnitude, lower
/// index first on ties.
pub fn prune_mask(weights: &[f64], ratio: f64) -> Result<PruneMask> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::config(format!("compression ratio must lie in [0, 1], got {ratio}")));
    }
    if weights.len() > u32::MAX as usize {
        return Err(Error::config("weight dimension exceeds the 4-byte index range"));
    }
    let rate = pruning_rate(ratio);
    let count = ((rate * weights.len() as f64).floor() as usize).min(weights.len());
    if count == 0 {
        return Ok(PruneMask {
            excluded: Vec::new(),
            pruning_rate: rate,
        });
    }
    let mut keyed: Vec<(u64, u32)> = weights
        .iter()
        .enumerate()
        .map(|(i, w)| (w.abs().to_bits(), i as u32))
        .collect();
    if count < keyed.len() {
        keyed.select_nth_unstable(count - 1);
    }
    let mut order: Vec<usize> = keyed[..count].iter().map(|&(_, i)| i as usize).collect();
    order.sort_unstable();
    Ok(PruneMask {
        excluded: order,
        pruning_rate: rate,
    })
}

/// Zeroes the masked entries of `g`.
pub fn apply_mask(g: &GradientVector, mask: &PruneMask) -> Result<GradientVector> {
    let mut values = g.values().to_vec();
    for &i in &mask.excluded {
        if i >= values.len() {
            return Err(Error::config(format!(
                "prune mask index {i} out of range for dimension {}",
                values.len()
            )));
        }
        values[i] = 0.0;
    }
    GradientVector::new(values, g.step_index())
}

/// Keeps the `max(1, round(ratio * D))` largest-magnitude entries at full
/// precision.
pub fn topk_sparsify(g: &GradientVector, ratio: f64) -> Result<CompressedPayload> {
    topk_with_precision(g, ratio, Precision::Full32, &CompressionConfig::default())
}

pub(crate) fn topk_with_precision(
    g: &GradientVector,
    ratio: f64,
    precision: Precision,
    cfg: &CompressionConfig,
) -> Result<CompressedPayload> {
    check_ratio(ratio)?;
    let values = g.values();
    if values.len() > u32::MAX as usize {
        return Err(Error::config("gradient dimension exceeds the 4-byte index range"));
    }
    let k = keep_count(ratio, values.len());
    let mut kept = topk_indices(values, k);
    kept.sort_unstable();
    let indices: Vec<u32> = kept.iter().map(|&i| i as u32).collect();
    let kept_values = kept.iter().map(|&i| values[i]).collect();
    CompressedPayload::new(indices, kept_values, precision, g.step_index(), cfg)
}

/// Indices of the `k` largest |values|, ties to the lower index. Unordered.
fn topk_indices(values: &[f64], k: usize) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    // |v| bit patterns order like the magnitudes; inverting them puts the
    // largest first and leaves the index as the tie-break.
    let mut keyed: Vec<(u64, u32)> = values
        .iter()
        .enumerate()
        .map(|(i, v)| (!v.abs().to_bits(), i as u32))
        .collect();
    if k < keyed.len() {
        keyed.select_nth_unstable(k - 1);
    }
    keyed[..k].iter().map(|&(_, i)| i as usize).collect()
}

/// Scatters a payload into a dense zero vector of dimension `dim`.
pub fn densify(p: &CompressedPayload, dim: usize) -> Result<GradientVector> {
    let mut out = vec![0.0; dim];
    for (&i, &v) in p.indices.iter().zip(&p.values) {
        let i = i as usize;
        if i >= dim {
            return Err(Error::CorruptPayload { index: i, dim });
        }
        out[i] = v;
    }
    GradientVector::new(out, p.source_step)
}

/// Everything one pass of the pipeline produces.
#[derive(Debug, Clone)]
pub struct Compressed {
    pub payload: CompressedPayload,
    pub residual: ResidualBuffer,
    /// Ratio TopK actually used (doubled when quantization fired).
    pub effective_ratio: f64,
    pub pruned: usize,
    /// L2 norm of gradient + old residual, the quantity the density gate saw.
    pub accumulated_norm: f64,
}

/// accumulate → adaptive_quantize → prune/mask → TopK, then the new residual
/// against the transmitted (widened) values.
pub fn compress(
    g: &GradientVector,
    residual: &ResidualBuffer,
    weights: &[f64],
    ratio: f64,
    cfg: &CompressionConfig,
) -> Result<Compressed> {
    check_dim(g.dim(), weights.len())?;
    compress_with_mask(g, residual, ratio, cfg, |r| prune_mask(weights, r))
}

/// [`compress`] with the prune mask supplied by `mask_for(effective_ratio)`,
/// so callers compressing many gradients against the same weights can
/// compute each mask once.
pub fn compress_with_mask(
    g: &GradientVector,
    residual: &ResidualBuffer,
    ratio: f64,
    cfg: &CompressionConfig,
    mask_for: impl FnOnce(f64) -> Result<PruneMask>,
) -> Result<Compressed> {
    check_ratio(ratio)?;
    let accumulated = accumulate(g, residual)?;
    let accumulated_norm = accumulated.l2_norm();
    let quantized = adaptive_quantize(&accumulated, ratio, cfg)?;

    let mask = if cfg.pruning {
        mask_for(quantized.ratio)?
    } else {
        PruneMask::empty()
    };
    let masked = if mask.is_empty() {
        quantized.grad
    } else {
        apply_mask(&quantized.grad, &mask)?
    };

    let payload = topk_with_precision(&masked, quantized.ratio, quantized.precision, cfg)?;
    let transmitted = densify(&payload, g.dim())?;
    let residual = update_residual(&accumulated, &transmitted)?;
    Ok(Compressed {
        payload,
        residual,
        effective_ratio: quantized.ratio,
        pruned: mask.len(),
        accumulated_norm,
    })
}

/// Dense full-precision "payload" used by the uncompressed baseline: the value
/// section only, 4 bytes per parameter.
pub fn dense_wire_size(dim: usize) -> u64 {
    dim as u64 * Precision::Full32.value_width_bytes()
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::config(format!("compression ratio must lie in (0, 1], got {ratio}")));
    }
    Ok(())
}
