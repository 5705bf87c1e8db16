//! Dense K-mode tensors, observation masks and CP models.
//!
//! Values are stored in a single flat buffer with mode 0 varying fastest
//! (column-major / Fortran order): the cell `(i_0, i_1, ..., i_{K-1})` lives
//! at `i_0 + I_0 * (i_1 + I_1 * (i_2 + ...))`. Every file format and every
//! contraction in this crate relies on that order.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, shape_err, Result, WdgError};

/// Largest supported number of modes.
pub const MAX_MODES: usize = 8;

fn validate_shape(shape: &[usize]) -> Result<usize> {
    if shape.len() < 2 || shape.len() > MAX_MODES {
        return input_err(format!(
            "tensor must have between 2 and {MAX_MODES} modes, got {}",
            shape.len()
        ));
    }
    let mut n: usize = 1;
    for (k, &d) in shape.iter().enumerate() {
        if d == 0 {
            return input_err(format!("mode {k} has size 0"));
        }
        n = n
            .checked_mul(d)
            .ok_or_else(|| WdgError::Input("tensor size overflows usize".into()))?;
    }
    Ok(n)
}

fn check_same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return shape_err(format!("{what}: {a:?} vs {b:?}"));
    }
    Ok(())
}

/// Converts a multi-index into the canonical linear offset.
pub fn linear_index(shape: &[usize], index: &[usize]) -> Result<usize> {
    if index.len() != shape.len() {
        return input_err(format!(
            "index {index:?} has {} modes, tensor has {}",
            index.len(),
            shape.len()
        ));
    }
    let mut offset = 0;
    let mut stride = 1;
    for (k, (&i, &d)) in index.iter().zip(shape).enumerate() {
        if i >= d {
            return input_err(format!("index {index:?} out of range in mode {k} (size {d})"));
        }
        offset += i * stride;
        stride *= d;
    }
    Ok(offset)
}

/// Inverse of [`linear_index`]; `out` must have one slot per mode.
pub fn multi_index(shape: &[usize], mut offset: usize, out: &mut [usize]) {
    for (slot, &d) in out.iter_mut().zip(shape) {
        *slot = offset % d;
        offset /= d;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n = validate_shape(&shape)?;
        if values.len() != n {
            return shape_err(format!(
                "shape {shape:?} needs {n} values, got {}",
                values.len()
            ));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return input_err(format!("non-finite value at linear offset {pos}"));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = validate_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            values: vec![0.0; n],
        })
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        Self { shape, values }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.values[linear_index(&self.shape, index)?])
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Multiplies every entry by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    /// Returns a copy with every unobserved cell set to zero.
    pub fn masked(&self, mask: &ObservationMask) -> Result<Self> {
        check_same_shape(&self.shape, mask.shape(), "tensor vs mask")?;
        let values = self
            .values
            .iter()
            .zip(mask.flags())
            .map(|(&v, &m)| if m { v } else { 0.0 })
            .collect();
        Ok(Self::from_parts_unchecked(self.shape.clone(), values))
    }
}

/// Boolean tensor marking observed cells (`true` = observed).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationMask {
    shape: Vec<usize>,
    flags: Vec<bool>,
}

impl ObservationMask {
    pub fn new(shape: Vec<usize>, flags: Vec<bool>) -> Result<Self> {
        let n = validate_shape(&shape)?;
        if flags.len() != n {
            return shape_err(format!(
                "shape {shape:?} needs {n} flags, got {}",
                flags.len()
            ));
        }
        Ok(Self { shape, flags })
    }

    pub fn filled(shape: &[usize], observed: bool) -> Result<Self> {
        let n = validate_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            flags: vec![observed; n],
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn observed_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn is_observed(&self, index: &[usize]) -> Result<bool> {
        Ok(self.flags[linear_index(&self.shape, index)?])
    }

    /// The mask of unobserved cells.
    pub fn complement(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            flags: self.flags.iter().map(|f| !f).collect(),
        }
    }

    pub fn overlaps(&self, other: &ObservationMask) -> Result<bool> {
        check_same_shape(&self.shape, other.shape(), "mask vs mask")?;
        Ok(self.flags.iter().zip(&other.flags).any(|(a, b)| *a && *b))
    }
}

/// Builds a tensor and its observation mask from sparse `(index, value)`
/// pairs. Cells not listed are unobserved and hold zero.
pub fn tensor_from_entries(
    shape: &[usize],
    entries: &[(Vec<usize>, f64)],
) -> Result<(DenseTensor, ObservationMask)> {
    let mut tensor = DenseTensor::zeros(shape)?;
    let mut mask = ObservationMask::filled(shape, false)?;
    for (index, value) in entries {
        let offset = linear_index(shape, index)?;
        if mask.flags[offset] {
            return input_err(format!("duplicate entry at index {index:?}"));
        }
        if !value.is_finite() {
            return input_err(format!("non-finite value at index {index:?}"));
        }
        mask.flags[offset] = true;
        tensor.values[offset] = *value;
    }
    Ok((tensor, mask))
}

/// `out[a] = sum_i data[a + lead * i] * v[i]`: contracts the slowest mode of
/// a column-major block.
fn contract_slowest(data: &[f64], lead: usize, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; lead];
    for (i, &vi) in v.iter().enumerate() {
        let block = &data[lead * i..lead * (i + 1)];
        for (o, &d) in out.iter_mut().zip(block) {
            *o += d * vi;
        }
    }
    out
}

/// Outer product of `vectors` (first vector varies fastest), scaled by
/// `scale`, written into a fresh buffer.
pub(crate) fn outer_product(scale: f64, vectors: &[&[f64]]) -> Vec<f64> {
    let total: usize = vectors.iter().map(|v| v.len()).product();
    let mut buf = Vec::with_capacity(total);
    buf.push(scale);
    for v in vectors {
        let len = buf.len();
        buf.resize(len * v.len(), 0.0);
        // Fill back to front so the prefix can be read while writing.
        for i in (0..v.len()).rev() {
            for a in 0..len {
                buf[a + len * i] = buf[a] * v[i];
            }
        }
    }
    buf
}

fn check_vectors(shape: &[usize], vectors: &[&[f64]], skip: Option<usize>) -> Result<()> {
    let expected = shape.len() - usize::from(skip.is_some());
    if vectors.len() != expected {
        return shape_err(format!("expected {expected} vectors, got {}", vectors.len()));
    }
    let modes = (0..shape.len()).filter(|&j| Some(j) != skip);
    for (v, j) in vectors.iter().zip(modes) {
        if v.len() != shape[j] {
            return shape_err(format!(
                "vector for mode {j} has length {}, mode size is {}",
                v.len(),
                shape[j]
            ));
        }
    }
    Ok(())
}

/// Contracts `t` with one vector on every mode except `skip_mode`.
///
/// `vectors` lists the vectors in mode order with `skip_mode` omitted, so it
/// has `K - 1` entries. The result has length `I_{skip_mode}`.
pub fn contract_all_but(t: &DenseTensor, vectors: &[&[f64]], skip_mode: usize) -> Result<Vec<f64>> {
    let shape = t.shape();
    if skip_mode >= shape.len() {
        return input_err(format!("mode {skip_mode} out of range for {}-mode tensor", shape.len()));
    }
    check_vectors(shape, vectors, Some(skip_mode))?;

    // Contract the modes slower than `skip_mode`, slowest first.
    let mut lead: usize = t.len();
    let mut owned: Option<Vec<f64>> = None;
    for j in (skip_mode + 1..shape.len()).rev() {
        lead /= shape[j];
        let src = owned.as_deref().unwrap_or(t.values());
        owned = Some(contract_slowest(src, lead, vectors[j - 1]));
    }
    let block = owned.as_deref().unwrap_or(t.values());

    // What remains is column-major (I_0 .. I_skip); fold the faster modes
    // with their outer product.
    let fast = outer_product(1.0, &vectors[..skip_mode]);
    let inner = fast.len();
    Ok((0..shape[skip_mode])
        .map(|i| {
            block[inner * i..inner * (i + 1)]
                .iter()
                .zip(&fast)
                .map(|(d, w)| d * w)
                .sum()
        })
        .collect())
}

/// Full inner product of `t` with the rank-one tensor built from `vectors`.
pub fn contract_all(t: &DenseTensor, vectors: &[&[f64]]) -> Result<f64> {
    check_vectors(t.shape(), vectors, None)?;
    let partial = contract_all_but(t, &vectors[1..], 0)?;
    Ok(partial.iter().zip(vectors[0]).map(|(a, b)| a * b).sum())
}

/// Weighted sum of rank-one terms, one unit-norm column per mode.
#[derive(Debug, Clone, PartialEq)]
pub struct CpModel {
    weights: Vec<f64>,
    factors: Vec<DMatrix<f64>>,
}

impl CpModel {
    /// Builds a model; every factor must have one column per weight.
    pub fn new(weights: Vec<f64>, factors: Vec<DMatrix<f64>>) -> Result<Self> {
        if factors.len() < 2 || factors.len() > MAX_MODES {
            return input_err(format!("CP model needs 2..={MAX_MODES} factors, got {}", factors.len()));
        }
        for (k, f) in factors.iter().enumerate() {
            if f.ncols() != weights.len() {
                return shape_err(format!(
                    "factor {k} has {} columns, expected rank {}",
                    f.ncols(),
                    weights.len()
                ));
            }
            if f.nrows() == 0 {
                return input_err(format!("factor {k} has no rows"));
            }
        }
        Ok(Self { weights, factors })
    }

    /// A rank-zero model for the given mode sizes.
    pub fn empty(shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        Ok(Self {
            weights: Vec::new(),
            factors: shape.iter().map(|&d| DMatrix::zeros(d, 0)).collect(),
        })
    }

    pub fn rank(&self) -> usize {
        self.weights.len()
    }

    pub fn ndim(&self) -> usize {
        self.factors.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn factors(&self) -> &[DMatrix<f64>] {
        &self.factors
    }

    pub fn mode_sizes(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.nrows()).collect()
    }

    /// Column `r` of factor `k`.
    pub fn column(&self, k: usize, r: usize) -> &[f64] {
        let f = &self.factors[k];
        let n = f.nrows();
        &f.as_slice()[n * r..n * (r + 1)]
    }

    pub fn set_column(&mut self, k: usize, r: usize, values: &[f64]) {
        let f = &mut self.factors[k];
        let n = f.nrows();
        f.as_mut_slice()[n * r..n * (r + 1)].copy_from_slice(values);
    }

    /// All K columns of component `r`, in mode order.
    pub fn component(&self, r: usize) -> Vec<&[f64]> {
        (0..self.ndim()).map(|k| self.column(k, r)).collect()
    }

    /// Drops every component whose weight is exactly zero.
    pub fn prune_zero_weights(&mut self) {
        let keep: Vec<usize> = (0..self.rank()).filter(|&r| self.weights[r] != 0.0).collect();
        if keep.len() == self.rank() {
            return;
        }
        self.weights = keep.iter().map(|&r| self.weights[r]).collect();
        self.factors = self.factors.iter().map(|f| f.select_columns(&keep)).collect();
    }

    pub fn nonzero_weights(&self) -> usize {
        self.weights.iter().filter(|&&w| w != 0.0).count()
    }

    /// Adds `scale * lambda_r * u_r^(0) ∘ ... ∘ u_r^(K-1)` into `out`.
    pub(crate) fn accumulate_component(&self, r: usize, scale: f64, out: &mut [f64]) {
        let term = outer_product(scale * self.weights[r], &self.component(r));
        for (o, t) in out.iter_mut().zip(&term) {
            *o += t;
        }
    }
}

/// Evaluates the CP model on the full grid.
pub fn cp_reconstruct(m: &CpModel, shape: &[usize]) -> Result<DenseTensor> {
    if m.mode_sizes() != shape {
        return shape_err(format!(
            "model mode sizes {:?} do not match shape {shape:?}",
            m.mode_sizes()
        ));
    }
    let mut out = DenseTensor::zeros(shape)?;
    for r in 0..m.rank() {
        if m.weights[r] != 0.0 {
            m.accumulate_component(r, 1.0, &mut out.values);
        }
    }
    Ok(out)
}

/// Takes `source` on observed cells and `target` everywhere else.
pub fn project_replace(
    target: &DenseTensor,
    mask: &ObservationMask,
    source: &DenseTensor,
) -> Result<DenseTensor> {
    check_same_shape(target.shape(), mask.shape(), "target vs mask")?;
    check_same_shape(target.shape(), source.shape(), "target vs source")?;
    let values = target
        .values
        .iter()
        .zip(&source.values)
        .zip(&mask.flags)
        .map(|((&t, &s), &m)| if m { s } else { t })
        .collect();
    Ok(DenseTensor::from_parts_unchecked(target.shape.clone(), values))
}

/// Squared Frobenius distance, optionally restricted to the `true` cells of
/// `restrict`. Not halved.
pub fn sq_frobenius_diff(
    a: &DenseTensor,
    b: &DenseTensor,
    restrict: Option<&ObservationMask>,
) -> Result<f64> {
    check_same_shape(a.shape(), b.shape(), "a vs b")?;
    let diffs = a.values.iter().zip(&b.values).map(|(x, y)| (x - y) * (x - y));
    match restrict {
        None => Ok(diffs.sum()),
        Some(mask) => {
            check_same_shape(a.shape(), mask.shape(), "tensor vs mask")?;
            Ok(diffs.zip(&mask.flags).filter(|(_, &m)| m).map(|(d, _)| d).sum())
        }
    }
}
