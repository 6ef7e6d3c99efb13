//! Incremental unanimity merge.
//!
//! [`SignConsensusState`] absorbs task vectors one at a time and produces the
//! same result as [`merge_negmerge`](crate::merging::merge_negmerge) with
//! `q = 1` without keeping the pool around. Per element it holds a reference
//! sign, an alive flag, a running sum and the two extreme-magnitude values;
//! its size does not depend on how many vectors were absorbed.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::merging::{ConsensusMask, Reduce};
use crate::sign;
use crate::task_vector::TaskVector;
use crate::tensor::{Schema, Tensor, TensorMap};

/// Accumulators for one tensor. Dead elements hold `ref_sign = 0` and zero
/// accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorState {
    pub ref_sign: Vec<i8>,
    pub alive: Vec<bool>,
    pub sum: Vec<f64>,
    pub min_mag: Vec<f64>,
    pub max_mag: Vec<f64>,
}

impl TensorState {
    fn fresh(len: usize) -> Self {
        Self {
            ref_sign: alloc::vec![0; len],
            alive: alloc::vec![true; len],
            sum: alloc::vec![0.0; len],
            min_mag: alloc::vec![0.0; len],
            max_mag: alloc::vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.alive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alive.is_empty()
    }

    fn kill(&mut self, i: usize) {
        self.alive[i] = false;
        self.ref_sign[i] = 0;
        self.sum[i] = 0.0;
        self.min_mag[i] = 0.0;
        self.max_mag[i] = 0.0;
    }

    fn absorb_first(&mut self, t: &Tensor) {
        for i in 0..t.len() {
            let v = t.get(i);
            match sign(v) {
                0 => self.kill(i),
                s => {
                    self.ref_sign[i] = s;
                    self.sum[i] = v;
                    self.min_mag[i] = v;
                    self.max_mag[i] = v;
                }
            }
        }
    }

    fn absorb(&mut self, t: &Tensor) {
        for i in 0..t.len() {
            if !self.alive[i] {
                continue;
            }
            let v = t.get(i);
            if sign(v) != self.ref_sign[i] {
                self.kill(i);
                continue;
            }
            self.sum[i] += v;
            if v.abs() < self.min_mag[i].abs() {
                self.min_mag[i] = v;
            }
            if v.abs() > self.max_mag[i].abs() {
                self.max_mag[i] = v;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignConsensusState {
    schema: Schema,
    count: usize,
    tensors: BTreeMap<String, TensorState>,
}

impl SignConsensusState {
    /// Empty state: nothing absorbed, every element provisionally alive.
    pub fn init(schema: Schema) -> Self {
        let tensors = schema
            .iter()
            .map(|(name, spec)| (name.to_string(), TensorState::fresh(spec.len())))
            .collect();
        Self {
            schema,
            count: 0,
            tensors,
        }
    }

    /// Rebuilds a state from serialized parts, checking its invariants.
    pub fn from_parts(
        schema: Schema,
        count: usize,
        tensors: BTreeMap<String, TensorState>,
    ) -> Result<Self> {
        let bad = |name: &str, reason: &str| Error::MalformedState {
            name: name.to_string(),
            reason: reason.to_string(),
        };
        if tensors.len() != schema.len() {
            return Err(bad("<state>", "tensor set differs from schema"));
        }
        for (name, spec) in schema.iter() {
            let st = tensors
                .get(name)
                .ok_or_else(|| bad(name, "missing accumulator"))?;
            let len = spec.len();
            if [st.ref_sign.len(), st.sum.len(), st.min_mag.len(), st.max_mag.len()]
                .iter()
                .any(|&l| l != len)
                || st.alive.len() != len
            {
                return Err(bad(name, "accumulator length differs from schema"));
            }
            for i in 0..len {
                if count > 0 && st.alive[i] && st.ref_sign[i] == 0 {
                    return Err(bad(name, "alive element without a reference sign"));
                }
                if !matches!(st.ref_sign[i], -1..=1) {
                    return Err(bad(name, "reference sign outside {-1, 0, 1}"));
                }
            }
        }
        Ok(Self {
            schema,
            count,
            tensors,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    /// Number of vectors absorbed so far.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn tensor_state(&self, name: &str) -> Option<&TensorState> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorState)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Folds one more task vector into the state.
    pub fn update(&mut self, tau: &TaskVector) -> Result<()> {
        self.schema.check_compatible(&tau.schema())?;
        let first = self.count == 0;
        for (name, t) in tau.delta().iter() {
            let st = self.tensors.get_mut(name).expect("schema checked");
            if first {
                st.absorb_first(t);
            } else {
                st.absorb(t);
            }
        }
        self.count += 1;
        Ok(())
    }

    /// Current alive set. Before the first update every element is alive.
    pub fn alive_mask(&self) -> ConsensusMask {
        ConsensusMask::from_parts(
            self.tensors
                .iter()
                .map(|(k, st)| (k.clone(), st.alive.clone()))
                .collect(),
        )
    }

    /// Emits the merged task vector. Dead elements are exactly zero.
    pub fn finalize(&self, reduce: Reduce) -> Result<TaskVector> {
        if self.count == 0 {
            return Err(Error::NoVectorsAbsorbed);
        }
        let n = self.count as f64;
        let mut out = TensorMap::new();
        for (name, spec) in self.schema.iter() {
            let st = &self.tensors[name];
            let values = (0..spec.len())
                .map(|i| {
                    if !st.alive[i] {
                        return 0.0;
                    }
                    let positive = st.ref_sign[i] > 0;
                    match reduce {
                        // identical inputs (equal extremes) reproduce the input exactly
                        Reduce::Avg if st.min_mag[i] == st.max_mag[i] => st.max_mag[i],
                        Reduce::Avg => st.sum[i] / n,
                        Reduce::MinMag => st.min_mag[i],
                        Reduce::MaxMag => st.max_mag[i],
                        Reduce::MinValue if positive => st.min_mag[i],
                        Reduce::MinValue => st.max_mag[i],
                        Reduce::MaxValue if positive => st.max_mag[i],
                        Reduce::MaxValue => st.min_mag[i],
                    }
                })
                .collect();
            out.insert(
                name,
                Tensor::cast_from_f64(spec.dtype, spec.shape.clone(), values),
            )?;
        }
        Ok(TaskVector::new(out))
    }
}

/// Absorbs every vector of `pool` in order.
pub fn fold_pool<'a>(
    schema: Schema,
    pool: impl IntoIterator<Item = &'a TaskVector>,
) -> Result<SignConsensusState> {
    let mut state = SignConsensusState::init(schema);
    for tau in pool {
        state.update(tau)?;
    }
    Ok(state)
}
