//! Container encodings of sparse task vectors and streaming merge state.
//!
//! A sparse vector stores, per tensor `t`, `t.idx` (F64 element ordinals)
//! and `t.val` (values in `t`'s dtype), with metadata `sparse = "1"` and the
//! dense schema as JSON under `schema`.
//!
//! A consensus state stores `t.sign` (F32 in {-1, 0, 1}, 0 for eliminated
//! elements), `t.sum`, `t.min_mag` and `t.max_mag` (F64), with metadata
//! `state = "1"`, the absorbed count under `n` and the schema.

use std::collections::BTreeMap;

use negmerge_core::consensus_stream::{SignConsensusState, TensorState};
use negmerge_core::task_vector::{SparseTaskVector, SparseTensor};
use negmerge_core::{DType, Schema, Tensor, TensorData, TensorMap};

use crate::error::FormatError;

const SPARSE_KEY: &str = "sparse";
const STATE_KEY: &str = "state";
const SCHEMA_KEY: &str = "schema";
const COUNT_KEY: &str = "n";

// F64 represents every integer up to 2^53 exactly.
const MAX_EXACT_ORDINAL: usize = 1 << 53;

pub fn is_sparse(map: &TensorMap) -> bool {
    map.metadata().get(SPARSE_KEY).map(String::as_str) == Some("1")
}

pub fn is_state(map: &TensorMap) -> bool {
    map.metadata().get(STATE_KEY).map(String::as_str) == Some("1")
}

fn schema_json(schema: &Schema) -> String {
    serde_json::to_string(schema).expect("schema serializes")
}

fn read_schema(map: &TensorMap, err: fn(String) -> FormatError) -> Result<Schema, FormatError> {
    let text = map
        .metadata()
        .get(SCHEMA_KEY)
        .ok_or_else(|| err("missing schema metadata".into()))?;
    serde_json::from_str(text).map_err(|e| err(format!("schema metadata: {e}")))
}

pub fn sparse_to_map(s: &SparseTaskVector) -> TensorMap {
    let mut map = TensorMap::new();
    for (name, spec) in s.schema().iter() {
        let st = s.get(name).expect("every schema tensor has an entry");
        let idx: Vec<f64> = st.indices.iter().map(|&i| i as f64).collect();
        map.insert(format!("{name}.idx"), Tensor::from_f64(vec![idx.len()], idx).expect("finite ordinals"))
            .expect("unique name");
        let val = TensorData::from_f64(spec.dtype, st.values.clone());
        map.insert(format!("{name}.val"), Tensor::new(vec![st.nnz()], val).expect("finite values"))
            .expect("unique name");
    }
    map.set_metadata(SPARSE_KEY, "1");
    map.set_metadata(SCHEMA_KEY, schema_json(s.schema()));
    map
}

pub fn sparse_from_map(map: &TensorMap) -> Result<SparseTaskVector, FormatError> {
    if !is_sparse(map) {
        return Err(FormatError::Sparse("missing sparse marker".into()));
    }
    let schema = read_schema(map, FormatError::Sparse)?;
    let expected = 2 * schema.len();
    if map.len() != expected {
        return Err(FormatError::Sparse(format!(
            "expected {expected} tensors for {} dense tensors, found {}",
            schema.len(),
            map.len()
        )));
    }
    let mut tensors = BTreeMap::new();
    for (name, spec) in schema.iter() {
        let get = |suffix: &str| {
            map.get(&format!("{name}.{suffix}"))
                .ok_or_else(|| FormatError::Sparse(format!("missing `{name}.{suffix}`")))
        };
        let (idx, val) = (get("idx")?, get("val")?);
        if idx.dtype() != DType::F64 || val.dtype() != spec.dtype {
            return Err(FormatError::Sparse(format!("`{name}` has unexpected dtypes")));
        }
        let indices = idx
            .to_f64_vec()
            .into_iter()
            .map(|f| {
                if f >= 0.0 && f.fract() == 0.0 && f < MAX_EXACT_ORDINAL as f64 {
                    Ok(f as usize)
                } else {
                    Err(FormatError::Sparse(format!("`{name}` has a non-integral index {f}")))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        tensors.insert(
            name.to_string(),
            SparseTensor {
                indices,
                values: val.to_f64_vec(),
            },
        );
    }
    SparseTaskVector::from_parts(schema, tensors).map_err(|e| FormatError::Sparse(e.to_string()))
}

pub fn state_to_map(state: &SignConsensusState) -> TensorMap {
    let mut map = TensorMap::new();
    for (name, spec) in state.schema().iter() {
        let st = state.tensor_state(name).expect("every schema tensor has a state");
        let shape = spec.shape.clone();
        let sign: Vec<f32> = st.ref_sign.iter().map(|&s| f32::from(s)).collect();
        let mut put = |suffix: &str, t: Tensor| {
            map.insert(format!("{name}.{suffix}"), t).expect("unique name");
        };
        put("sign", Tensor::from_f32(shape.clone(), sign).expect("finite signs"));
        put("sum", Tensor::from_f64(shape.clone(), st.sum.clone()).expect("finite sums"));
        put("min_mag", Tensor::from_f64(shape.clone(), st.min_mag.clone()).expect("finite extremes"));
        put("max_mag", Tensor::from_f64(shape, st.max_mag.clone()).expect("finite extremes"));
    }
    map.set_metadata(STATE_KEY, "1");
    map.set_metadata(COUNT_KEY, state.count().to_string());
    map.set_metadata(SCHEMA_KEY, schema_json(state.schema()));
    map
}

pub fn state_from_map(map: &TensorMap) -> Result<SignConsensusState, FormatError> {
    if !is_state(map) {
        return Err(FormatError::State("missing state marker".into()));
    }
    let schema = read_schema(map, FormatError::State)?;
    let count: usize = map
        .metadata()
        .get(COUNT_KEY)
        .ok_or_else(|| FormatError::State("missing count metadata".into()))?
        .parse()
        .map_err(|e| FormatError::State(format!("count metadata: {e}")))?;
    if map.len() != 4 * schema.len() {
        return Err(FormatError::State("tensor set does not match schema".into()));
    }
    let mut tensors = BTreeMap::new();
    for (name, spec) in schema.iter() {
        let get = |suffix: &str, dtype: DType| {
            let t = map
                .get(&format!("{name}.{suffix}"))
                .ok_or_else(|| FormatError::State(format!("missing `{name}.{suffix}`")))?;
            if t.dtype() != dtype || t.shape() != spec.shape.as_slice() {
                return Err(FormatError::State(format!("`{name}.{suffix}` has the wrong dtype or shape")));
            }
            Ok(t.to_f64_vec())
        };
        let ref_sign = get("sign", DType::F32)?
            .into_iter()
            .map(|s| match s {
                -1.0 => Ok(-1i8),
                0.0 => Ok(0),
                1.0 => Ok(1),
                other => Err(FormatError::State(format!("`{name}` sign {other} outside {{-1, 0, 1}}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        // before the first update everything is provisionally alive
        let alive = ref_sign.iter().map(|&s| count == 0 || s != 0).collect();
        tensors.insert(
            name.to_string(),
            TensorState {
                ref_sign,
                alive,
                sum: get("sum", DType::F64)?,
                min_mag: get("min_mag", DType::F64)?,
                max_mag: get("max_mag", DType::F64)?,
            },
        );
    }
    SignConsensusState::from_parts(schema, count, tensors).map_err(|e| FormatError::State(e.to_string()))
}
