//! Task vectors: weight deltas between a fine-tuned model and its base.
//!
//! A [`TaskVector`] never stores negative zero; every constructor folds
//! `-0.0` into `+0.0` so exact-zero sparsity and bitwise round trips agree.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Schema, Tensor, TensorMap};

#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    delta: TensorMap,
    origin: Option<String>,
}

#[inline]
fn canonical_zero(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v
    }
}

impl TaskVector {
    pub fn new(delta: TensorMap) -> Self {
        let delta = delta.map_values(|_, _, v| canonical_zero(v));
        Self {
            delta,
            origin: None,
        }
    }

    pub fn with_origin(mut self, origin: impl Into<String>) -> Self {
        self.origin = Some(origin.into());
        self
    }

    /// All-zero vector over `schema`.
    pub fn zeros(schema: &Schema) -> Self {
        let mut delta = TensorMap::new();
        for (name, spec) in schema.iter() {
            delta
                .insert(name, Tensor::zeros(spec.dtype, spec.shape.clone()))
                .expect("schema names are unique and non-empty");
        }
        Self {
            delta,
            origin: None,
        }
    }

    pub fn delta(&self) -> &TensorMap {
        &self.delta
    }

    pub fn into_delta(self) -> TensorMap {
        self.delta
    }

    pub fn origin(&self) -> Option<&str> {
        self.origin.as_deref()
    }

    pub fn schema(&self) -> Schema {
        self.delta.schema()
    }

    pub fn num_elements(&self) -> usize {
        self.delta.num_elements()
    }

    /// Count of non-zero elements.
    pub fn nnz(&self) -> usize {
        self.delta
            .iter()
            .map(|(_, t)| t.len() - t.count_zeros())
            .sum()
    }

    /// `c · τ`, element-wise.
    pub fn scaled(&self, c: f64) -> TaskVector {
        TaskVector::new(self.delta.map_values(|_, _, v| c * v))
    }

    pub fn bit_eq(&self, other: &TaskVector) -> bool {
        self.delta.bit_eq(&other.delta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Add,
    #[default]
    Negate,
}

/// Scaling coefficient and sign for applying a task vector to a base model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NegationConfig {
    pub lambda: f64,
    pub direction: Direction,
}

impl NegationConfig {
    pub fn negate(lambda: f64) -> Self {
        Self {
            lambda,
            direction: Direction::Negate,
        }
    }

    pub fn add(lambda: f64) -> Self {
        Self {
            lambda,
            direction: Direction::Add,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() {
            return Err(Error::InvalidConfig("lambda must be finite".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::InvalidConfig("lambda must be non-negative".into()));
        }
        Ok(())
    }
}

/// `fine_tuned − base`, element-wise, stored in each tensor's dtype.
pub fn diff(fine_tuned: &TensorMap, base: &TensorMap) -> Result<TaskVector> {
    let delta = fine_tuned.zip_values(base, |ft, b| canonical_zero(ft - b))?;
    Ok(TaskVector {
        delta,
        origin: None,
    })
}

#[inline]
fn shift(base: f64, tau: f64, cfg: &NegationConfig) -> f64 {
    match cfg.direction {
        Direction::Add => base + cfg.lambda * tau,
        Direction::Negate => base - cfg.lambda * tau,
    }
}

/// `base ± λ·τ`. Elements where τ is zero (or λ is zero) keep the base bits.
pub fn apply(base: &TensorMap, tau: &TaskVector, cfg: &NegationConfig) -> Result<TensorMap> {
    cfg.validate()?;
    base.schema().check_compatible(&tau.schema())?;
    if cfg.lambda == 0.0 {
        return Ok(base.clone());
    }
    let mut out = base.zip_values(tau.delta(), |b, t| if t == 0.0 { b } else { shift(b, t, cfg) })?;
    *out.metadata_mut() = base.metadata().clone();
    Ok(out)
}

/// Non-zero entries of one tensor, by row-major flat ordinal.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseTensor {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseTensor {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// Checks index ordering, bounds and the non-zero value rule.
    pub fn validate(&self, name: &str, len: usize) -> Result<()> {
        if self.indices.len() != self.values.len() {
            return Err(Error::MalformedSparse {
                name: name.to_string(),
                reason: "index and value counts differ".into(),
            });
        }
        for (k, &idx) in self.indices.iter().enumerate() {
            if idx >= len {
                return Err(Error::IndexOutOfRange {
                    name: name.to_string(),
                    index: idx,
                    len,
                });
            }
            if k > 0 && self.indices[k - 1] >= idx {
                return Err(Error::MalformedSparse {
                    name: name.to_string(),
                    reason: "indices are not strictly increasing".into(),
                });
            }
        }
        if self.values.iter().any(|&v| v == 0.0 || !v.is_finite()) {
            return Err(Error::MalformedSparse {
                name: name.to_string(),
                reason: "stored values must be finite and non-zero".into(),
            });
        }
        Ok(())
    }
}

/// Active-weight lookup table: only the non-zero elements of a task vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTaskVector {
    schema: Schema,
    tensors: BTreeMap<String, SparseTensor>,
    nnz_total: usize,
}

impl SparseTaskVector {
    /// Assembles and validates a sparse vector from raw parts.
    pub fn from_parts(schema: Schema, tensors: BTreeMap<String, SparseTensor>) -> Result<Self> {
        for name in tensors.keys() {
            if schema.get(name).is_none() {
                return Err(Error::MalformedSparse {
                    name: name.clone(),
                    reason: "tensor not present in schema".into(),
                });
            }
        }
        let mut full = BTreeMap::new();
        let mut nnz_total = 0;
        for (name, spec) in schema.iter() {
            let st = tensors.get(name).cloned().unwrap_or_default();
            st.validate(name, spec.len())?;
            nnz_total += st.nnz();
            full.insert(name.to_string(), st);
        }
        Ok(Self {
            schema,
            tensors: full,
            nnz_total,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn get(&self, name: &str) -> Option<&SparseTensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &SparseTensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn nnz_total(&self) -> usize {
        self.nnz_total
    }
}

/// Stores exactly the non-zero elements of `tau`.
pub fn sparsify(tau: &TaskVector) -> SparseTaskVector {
    let mut tensors = BTreeMap::new();
    let mut nnz_total = 0;
    for (name, t) in tau.delta().iter() {
        let mut st = SparseTensor::default();
        for i in 0..t.len() {
            let v = t.get(i);
            if v != 0.0 {
                st.indices.push(i);
                st.values.push(v);
            }
        }
        nnz_total += st.nnz();
        tensors.insert(name.to_string(), st);
    }
    SparseTaskVector {
        schema: tau.schema(),
        tensors,
        nnz_total,
    }
}

/// Rebuilds the dense task vector, writing zeros outside the stored indices.
pub fn densify(s: &SparseTaskVector) -> TaskVector {
    let mut delta = TensorMap::new();
    for (name, spec) in s.schema.iter() {
        let mut values = alloc::vec![0.0; spec.len()];
        if let Some(st) = s.tensors.get(name) {
            for (&i, &v) in st.indices.iter().zip(&st.values) {
                values[i] = v;
            }
        }
        delta
            .insert(
                name,
                Tensor::cast_from_f64(spec.dtype, spec.shape.clone(), values),
            )
            .expect("schema names are unique and non-empty");
    }
    TaskVector {
        delta,
        origin: None,
    }
}

/// Sparse counterpart of [`apply`]; touches only the stored elements.
pub fn apply_sparse(
    base: &TensorMap,
    s: &SparseTaskVector,
    cfg: &NegationConfig,
) -> Result<TensorMap> {
    cfg.validate()?;
    base.schema().check_compatible(&s.schema)?;
    if cfg.lambda == 0.0 {
        return Ok(base.clone());
    }
    let mut out = TensorMap::new();
    for (name, t) in base.iter() {
        let mut values = t.to_f64_vec();
        if let Some(st) = s.tensors.get(name) {
            st.validate(name, values.len())?;
            for (&i, &v) in st.indices.iter().zip(&st.values) {
                values[i] = shift(values[i], v, cfg);
            }
        }
        out.insert(
            name,
            Tensor::cast_from_f64(t.dtype(), t.shape().to_vec(), values),
        )?;
    }
    *out.metadata_mut() = base.metadata().clone();
    Ok(out)
}
