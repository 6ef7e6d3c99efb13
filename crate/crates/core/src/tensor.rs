//! Named tensor collections and their schemas.
//!
//! All arithmetic in this crate upcasts to `f64` and casts back to the
//! tensor's storage type on output, so F32 and F64 checkpoints follow the
//! same code paths.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, MismatchReason, Result};

/// Element type of a tensor buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_in_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F64 => "F64",
        }
    }

    pub fn parse(tag: &str) -> Option<Self> {
        match tag {
            "F32" => Some(DType::F32),
            "F64" => Some(DType::F64),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Contiguous row-major element buffer.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Casts `values` into a buffer of the requested type.
    pub fn from_f64(dtype: DType, values: Vec<f64>) -> Self {
        match dtype {
            DType::F32 => TensorData::F32(values.into_iter().map(|v| v as f32).collect()),
            DType::F64 => TensorData::F64(values),
        }
    }

    fn first_nonfinite(&self) -> Option<usize> {
        match self {
            TensorData::F32(v) => v.iter().position(|x| !x.is_finite()),
            TensorData::F64(v) => v.iter().position(|x| !x.is_finite()),
        }
    }

    /// Compares raw bit patterns, so `-0.0 != 0.0` and equal NaN payloads match.
    pub fn bit_eq(&self, other: &TensorData) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

/// Number of elements implied by `shape`; the empty shape is a scalar.
pub fn shape_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    /// Builds a tensor, rejecting element-count mismatches and non-finite values.
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let t = Self::new_allow_nonfinite(shape, data)?;
        if let Some(index) = t.data.first_nonfinite() {
            return Err(Error::NonFiniteValue {
                name: String::new(),
                index,
            });
        }
        Ok(t)
    }

    /// Like [`Tensor::new`] but accepts NaN and infinities.
    pub fn new_allow_nonfinite(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let expected = shape_len(&shape);
        if expected != data.len() {
            return Err(Error::ElementCount {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(values))
    }

    pub fn from_f64(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        Self::new(shape, TensorData::F64(values))
    }

    /// One-dimensional F64 tensor.
    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            shape: alloc::vec![values.len()],
            data: TensorData::F64(values),
        }
    }

    pub fn zeros(dtype: DType, shape: Vec<usize>) -> Self {
        let n = shape_len(&shape);
        Self {
            shape,
            data: TensorData::from_f64(dtype, alloc::vec![0.0; n]),
        }
    }

    /// Builds a tensor of `dtype` from `f64` values, casting on the way in.
    pub(crate) fn cast_from_f64(dtype: DType, shape: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(shape_len(&shape), values.len());
        Self {
            shape,
            data: TensorData::from_f64(dtype, values),
        }
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        match &self.data {
            TensorData::F32(v) => f64::from(v[i]),
            TensorData::F64(v) => v[i],
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.first_nonfinite().is_none()
    }

    pub fn first_nonfinite(&self) -> Option<usize> {
        self.data.first_nonfinite()
    }

    pub fn count_zeros(&self) -> usize {
        (0..self.len()).filter(|&i| self.get(i) == 0.0).count()
    }

    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape && self.data.bit_eq(&other.data)
    }

    pub fn spec(&self) -> TensorSpec {
        TensorSpec {
            dtype: self.dtype(),
            shape: self.shape.clone(),
        }
    }
}

/// Ordered, uniquely named tensor collection with optional string metadata.
///
/// Iteration order is the lexicographic order of names; every reduction in
/// the crate walks tensors in this order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorMap {
    entries: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor; names must be non-empty and unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::EmptyName);
        }
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    /// Builder-style insert for tests and literals.
    pub fn with(mut self, name: impl Into<String>, tensor: Tensor) -> Result<Self> {
        self.insert(name, tensor)?;
        Ok(self)
    }

    pub fn from_tensors<I, S>(tensors: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Tensor)>,
        S: Into<String>,
    {
        let mut map = Self::new();
        for (name, t) in tensors {
            map.insert(name, t)?;
        }
        Ok(map)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn schema(&self) -> Schema {
        Schema {
            tensors: self
                .entries
                .iter()
                .map(|(k, t)| (k.clone(), t.spec()))
                .collect(),
        }
    }

    /// First tensor holding a non-finite element, if any.
    pub fn first_nonfinite(&self) -> Option<(&str, usize)> {
        self.iter()
            .find_map(|(name, t)| t.first_nonfinite().map(|i| (name, i)))
    }

    /// Bitwise equality of all tensors (metadata ignored).
    pub fn bit_eq(&self, other: &TensorMap) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }

    pub fn into_entries(self) -> BTreeMap<String, Tensor> {
        self.entries
    }

    /// Rebuilds every tensor element-wise through `f64`, keeping dtypes and metadata.
    pub fn map_values(&self, mut f: impl FnMut(&str, usize, f64) -> f64) -> TensorMap {
        let entries = self
            .entries
            .iter()
            .map(|(name, t)| {
                let values = (0..t.len()).map(|i| f(name, i, t.get(i))).collect();
                let out = Tensor::cast_from_f64(t.dtype(), t.shape.clone(), values);
                (name.clone(), out)
            })
            .collect();
        TensorMap {
            entries,
            metadata: self.metadata.clone(),
        }
    }

    /// Element-wise combination of two schema-compatible maps.
    pub(crate) fn zip_values(
        &self,
        other: &TensorMap,
        mut f: impl FnMut(f64, f64) -> f64,
    ) -> Result<TensorMap> {
        self.schema().check_compatible(&other.schema())?;
        let entries = self
            .entries
            .iter()
            .zip(other.entries.values())
            .map(|((name, a), b)| {
                let values = (0..a.len()).map(|i| f(a.get(i), b.get(i))).collect();
                (
                    name.clone(),
                    Tensor::cast_from_f64(a.dtype(), a.shape.clone(), values),
                )
            })
            .collect();
        Ok(TensorMap {
            entries,
            metadata: BTreeMap::new(),
        })
    }
}

/// Dtype and shape of one tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub dtype: DType,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        shape_len(&self.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-name `(dtype, shape)` signature of a [`TensorMap`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schema {
    tensors: BTreeMap<String, TensorSpec>,
}

impl Schema {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, spec: TensorSpec) {
        self.tensors.insert(name.into(), spec);
    }

    pub fn get(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorSpec)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(TensorSpec::len).sum()
    }

    /// Succeeds iff the schemas are equal; otherwise names the first
    /// mismatching tensor in canonical order.
    pub fn check_compatible(&self, other: &Schema) -> Result<()> {
        let mut a = self.tensors.iter().peekable();
        let mut b = other.tensors.iter().peekable();
        loop {
            match (a.peek(), b.peek()) {
                (None, None) => return Ok(()),
                (Some((name, _)), None) | (None, Some((name, _))) => {
                    return Err(mismatch(name, MismatchReason::Missing))
                }
                (Some((na, sa)), Some((nb, sb))) => {
                    if na != nb {
                        let missing = if na < nb { na } else { nb };
                        return Err(mismatch(missing, MismatchReason::Missing));
                    }
                    if sa.dtype != sb.dtype {
                        return Err(mismatch(na, MismatchReason::Dtype));
                    }
                    if sa.shape != sb.shape {
                        return Err(mismatch(na, MismatchReason::Shape));
                    }
                    a.next();
                    b.next();
                }
            }
        }
    }
}

fn mismatch(name: &str, reason: MismatchReason) -> Error {
    Error::SchemaMismatch {
        name: name.to_string(),
        reason,
    }
}

/// Standalone form of [`Schema::check_compatible`].
pub fn check_compatible(a: &Schema, b: &Schema) -> Result<()> {
    a.check_compatible(b)
}

pub fn schema_of(map: &TensorMap) -> Schema {
    map.schema()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn map(entries: &[(&str, Vec<f64>)]) -> TensorMap {
        TensorMap::from_tensors(entries.iter().map(|(n, v)| (*n, Tensor::vector(v.clone())))).unwrap()
    }

    #[test]
    fn identical_maps_are_compatible() {
        let a = map(&[("w", vec![1.0, 2.0]), ("b", vec![0.0])]);
        assert!(a.schema().check_compatible(&a.clone().schema()).is_ok());
    }

    #[test]
    fn shape_mismatch_names_tensor() {
        let a = map(&[("w", vec![1.0, 2.0])]);
        let b = map(&[("w", vec![1.0, 2.0, 3.0])]);
        assert_eq!(
            a.schema().check_compatible(&b.schema()),
            Err(Error::SchemaMismatch {
                name: "w".into(),
                reason: MismatchReason::Shape
            })
        );
    }

    #[test]
    fn missing_tensor_is_reported() {
        let a = map(&[("a", vec![1.0]), ("b", vec![1.0])]);
        let b = map(&[("a", vec![1.0])]);
        let err = Error::SchemaMismatch {
            name: "b".into(),
            reason: MismatchReason::Missing,
        };
        assert_eq!(a.schema().check_compatible(&b.schema()), Err(err.clone()));
        assert_eq!(b.schema().check_compatible(&a.schema()), Err(err));
    }

    #[test]
    fn dtype_mismatch() {
        let a = TensorMap::new()
            .with("w", Tensor::from_f32(vec![1], vec![1.0]).unwrap())
            .unwrap();
        let b = map(&[("w", vec![1.0])]);
        assert!(matches!(
            a.schema().check_compatible(&b.schema()),
            Err(Error::SchemaMismatch {
                reason: MismatchReason::Dtype,
                ..
            })
        ));
    }

    #[test]
    fn rejects_bad_names_and_counts() {
        let mut m = TensorMap::new();
        assert_eq!(m.insert("", Tensor::vector(vec![])), Err(Error::EmptyName));
        m.insert("x", Tensor::vector(vec![])).unwrap();
        assert!(matches!(
            m.insert("x", Tensor::vector(vec![])),
            Err(Error::DuplicateName(_))
        ));
        assert!(matches!(
            Tensor::from_f64(vec![2, 2], vec![0.0; 3]),
            Err(Error::ElementCount { expected: 4, actual: 3 })
        ));
        // scalar shape holds exactly one element
        assert!(Tensor::from_f64(vec![], vec![1.0]).is_ok());
    }

    #[test]
    fn nonfinite_requires_opt_in() {
        assert!(matches!(
            Tensor::from_f32(vec![2], vec![1.0, f32::NAN]),
            Err(Error::NonFiniteValue { index: 1, .. })
        ));
        let t = Tensor::new_allow_nonfinite(vec![1], TensorData::F64(vec![f64::INFINITY])).unwrap();
        assert!(!t.is_all_finite());
    }

    #[test]
    fn iteration_is_lexicographic() {
        let a = map(&[("z", vec![0.0]), ("a", vec![0.0]), ("m", vec![0.0])]);
        let names: Vec<&str> = a.names().collect();
        assert_eq!(names, ["a", "m", "z"]);
    }
}
