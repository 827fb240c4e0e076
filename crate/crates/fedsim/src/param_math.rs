//! Flat parameter-vector algebra shared by server and clients: weighted sums of
//! sparse updates, squared distances, and percentile-based sparsification.
//!
//! All operations are pure functions over immutable inputs.

use crate::error::{FedSimError, Result};

/// A flat, fixed-length vector of model parameters. This is the unit shipped
/// between server and clients; every entry is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    /// Builds a vector after checking that every entry is finite.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FedSimError::Usage(format!(
                "non-finite parameter at index {i}"
            )));
        }
        Ok(Self { values })
    }

    /// All-zero vector of the given length.
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    /// Element-wise `self += other`. Lengths must match.
    pub fn add_assign(&mut self, other: &ParamVector) -> Result<()> {
        if self.len() != other.len() {
            return Err(FedSimError::Usage(format!(
                "length mismatch in add_assign: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }

    /// Element-wise difference `self - other`.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        if self.len() != other.len() {
            return Err(FedSimError::Usage(format!(
                "length mismatch in sub: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(ParamVector {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

impl std::ops::IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.values[i]
    }
}

/// The top-fraction slice of a client's model delta: strictly increasing
/// indices paired with the unmodified delta values, tagged with the round it
/// belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseUpdate {
    pub entries: Vec<(u32, f64)>,
    pub round: u32,
}

impl SparseUpdate {
    /// Validates the structural invariants: strictly increasing indices below
    /// `dim`, finite deltas.
    pub fn validate(&self, dim: usize) -> Result<()> {
        let mut prev: Option<u32> = None;
        for &(idx, delta) in &self.entries {
            if (idx as usize) >= dim {
                return Err(FedSimError::Usage(format!(
                    "sparse index {idx} out of range for dimension {dim}"
                )));
            }
            if let Some(p) = prev {
                if idx <= p {
                    return Err(FedSimError::Usage(format!(
                        "sparse indices not strictly increasing at {idx}"
                    )));
                }
            }
            if !delta.is_finite() {
                return Err(FedSimError::Usage(format!(
                    "non-finite delta at sparse index {idx}"
                )));
            }
            prev = Some(idx);
        }
        Ok(())
    }

    /// Expands to a dense delta of length `dim`; unshared coordinates are zero.
    pub fn densify(&self, dim: usize) -> Result<ParamVector> {
        self.validate(dim)?;
        let mut out = vec![0.0; dim];
        for &(idx, delta) in &self.entries {
            out[idx as usize] = delta;
        }
        Ok(ParamVector { values: out })
    }
}

/// Dense weighted sum of sparse updates: `result[p] = sum_k weights[k] * delta_k[p]`,
/// treating unshared coordinates as zero. Weights are not renormalized per
/// coordinate.
pub fn weighted_sum(updates: &[SparseUpdate], weights: &[f64], dim: usize) -> Result<ParamVector> {
    if updates.is_empty() {
        return Err(FedSimError::Usage("weighted_sum needs K >= 1 updates".into()));
    }
    if updates.len() != weights.len() {
        return Err(FedSimError::Usage(format!(
            "weighted_sum: {} updates but {} weights",
            updates.len(),
            weights.len()
        )));
    }
    for (k, &w) in weights.iter().enumerate() {
        if !w.is_finite() || w < 0.0 {
            return Err(FedSimError::Usage(format!(
                "weighted_sum: weight {k} is {w}, must be finite and >= 0"
            )));
        }
    }
    let mut out = vec![0.0; dim];
    for (update, &w) in updates.iter().zip(weights) {
        update.validate(dim)?;
        for &(idx, delta) in &update.entries {
            out[idx as usize] += w * delta;
        }
    }
    Ok(ParamVector { values: out })
}

/// Squared Euclidean distance between two equal-length vectors.
pub fn sq_distance(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    if a.len() != b.len() {
        return Err(FedSimError::Usage(format!(
            "sq_distance: length mismatch {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum())
}

/// Keeps the `ceil(fraction * P)` coordinates of `delta` with the largest
/// absolute values; ties at the cutoff magnitude are broken toward the lower
/// index. Retained values are unmodified.
pub fn top_fraction_mask(delta: &ParamVector, fraction: f64, round: u32) -> Result<SparseUpdate> {
    if delta.is_empty() {
        return Err(FedSimError::Usage("top_fraction_mask: empty delta".into()));
    }
    if fraction.is_nan() || fraction <= 0.0 || fraction > 1.0 {
        return Err(FedSimError::Usage(format!(
            "top_fraction_mask: fraction {fraction} outside (0, 1]"
        )));
    }
    let p = delta.len();
    let keep = ((fraction * p as f64).ceil() as usize).clamp(1, p);

    let mut order: Vec<u32> = (0..p as u32).collect();
    // Sort by |value| descending, index ascending on ties; sort_by is stable
    // so equal magnitudes stay in index order.
    order.sort_by(|&a, &b| {
        let ma = delta.values[a as usize].abs();
        let mb = delta.values[b as usize].abs();
        mb.partial_cmp(&ma).expect("finite magnitudes")
    });
    let mut kept: Vec<u32> = order[..keep].to_vec();
    kept.sort_unstable();

    Ok(SparseUpdate {
        entries: kept
            .into_iter()
            .map(|idx| (idx, delta.values[idx as usize]))
            .collect(),
        round,
    })
}
