//! Dense named-dimension tensors used by both evaluators.
//!
//! Values are always stored as `f64`; the graph-level dtype only controls
//! rounding on materialization and byte accounting, so fusion-induced error
//! stays separable from precision error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    /// Round a value to this dtype's precision (storage model).
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DType::F32 => write!(f, "f32"),
            DType::F64 => write!(f, "f64"),
        }
    }
}

/// A dense row-major tensor with named dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub dims: Vec<String>,
    pub extents: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorData {
    pub fn new(dims: Vec<String>, extents: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.len(), extents.len());
        debug_assert_eq!(extents.iter().product::<usize>(), data.len());
        TensorData { dims, extents, data }
    }

    pub fn zeros(dims: Vec<String>, extents: Vec<usize>) -> Self {
        let len = extents.iter().product();
        TensorData { dims, extents, data: vec![0.0; len] }
    }

    pub fn filled(dims: Vec<String>, extents: Vec<usize>, v: f64) -> Self {
        let len = extents.iter().product();
        TensorData { dims, extents, data: vec![v; len] }
    }

    pub fn scalar(v: f64) -> Self {
        TensorData { dims: vec![], extents: vec![], data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Row-major strides, in elements.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.extents)
    }

    pub fn extent_of(&self, dim: &str) -> Option<usize> {
        self.dims.iter().position(|d| d == dim).map(|i| self.extents[i])
    }

    /// Round every element to `dtype` precision in place.
    pub fn round_to(&mut self, dtype: DType) {
        if dtype == DType::F32 {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Reorder axes so that `dims` matches `order` (a permutation by name).
    pub fn permuted(&self, order: &[String]) -> Result<TensorData> {
        if order.len() != self.dims.len() {
            return Err(Error::Shape(format!(
                "permutation rank {} does not match tensor rank {}",
                order.len(),
                self.dims.len()
            )));
        }
        if order == self.dims.as_slice() {
            return Ok(self.clone());
        }
        let mut axis = Vec::with_capacity(order.len());
        for name in order {
            let i = self
                .dims
                .iter()
                .position(|d| d == name)
                .ok_or_else(|| Error::Shape(format!("dim {name} not present in tensor")))?;
            axis.push(i);
        }
        let src_strides = self.strides();
        let out_extents: Vec<usize> = axis.iter().map(|&i| self.extents[i]).collect();
        let mut out = vec![0.0; self.data.len()];
        let out_strides = strides_of(&out_extents);
        // walk the output index space, mapping back into the source
        let rank = axis.len();
        let mut idx = vec![0usize; rank];
        for slot in out.iter_mut() {
            let mut src = 0;
            for (k, &i) in idx.iter().zip(axis.iter()) {
                src += k * src_strides[i];
            }
            *slot = self.data[src];
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out_extents[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let _ = out_strides;
        Ok(TensorData::new(order.to_vec(), out_extents, out))
    }
}

pub fn strides_of(extents: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; extents.len()];
    for i in (0..extents.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * extents[i + 1];
    }
    strides
}

/// Elementwise error metrics between two same-shaped tensors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub max_abs: f64,
    pub max_rel: f64,
}

/// Relative error uses a `max(|a|, |b|, 1)` denominator, so sub-unit values
/// are judged by absolute error — the same convention as the algebra
/// residuals. Inputs are drawn from [−1, 1], so outputs sit near unit scale.
pub fn compare(a: &TensorData, b: &TensorData) -> Result<ErrorMetrics> {
    if a.extents != b.extents {
        return Err(Error::Shape(format!(
            "compare: shape mismatch {:?} vs {:?}",
            a.extents, b.extents
        )));
    }
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let abs = (x - y).abs();
        let denom = x.abs().max(y.abs()).max(1.0);
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(abs / denom);
    }
    Ok(ErrorMetrics { max_abs, max_rel })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compare_identical_is_zero() {
        let t = TensorData::filled(vec!["a".into()], vec![4], 2.5);
        let m = compare(&t, &t).unwrap();
        assert_eq!(m.max_abs, 0.0);
        assert_eq!(m.max_rel, 0.0);
    }

    #[test]
    fn compare_relative_definition() {
        let x = 1.0f64;
        let y = 1.0f64 + 1e-6;
        let a = TensorData::new(vec![], vec![], vec![x]);
        let b = TensorData::new(vec![], vec![], vec![y]);
        let m = compare(&a, &b).unwrap();
        assert_eq!(m.max_abs, (x - y).abs());
        assert_eq!(m.max_rel, (x - y).abs() / y);
    }

    #[test]
    fn compare_shape_mismatch_errors() {
        let a = TensorData::zeros(vec!["a".into()], vec![2]);
        let b = TensorData::zeros(vec!["a".into()], vec![3]);
        assert!(compare(&a, &b).is_err());
    }

    #[test]
    fn permute_roundtrip() {
        let t = TensorData::new(
            vec!["r".into(), "c".into()],
            vec![2, 3],
            vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
        );
        let p = t.permuted(&["c".into(), "r".into()]).unwrap();
        assert_eq!(p.extents, vec![3, 2]);
        assert_eq!(p.data, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let back = p.permuted(&["r".into(), "c".into()]).unwrap();
        assert_eq!(back.data, t.data);
    }
}
