//! Batch merging of a pool of task vectors.
//!
//! Every strategy walks tensors in canonical (name) order and, within a
//! tensor, gathers the `n` pool values of one element before reducing them.
//! Accumulation is always `f64` in pool order, whatever the storage dtype.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sign;
use crate::task_vector::{diff, TaskVector};
use crate::tensor::{Schema, Tensor, TensorMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Method {
    #[default]
    #[serde(rename = "negmerge")]
    NegMerge,
    #[serde(rename = "conflict")]
    Conflict,
    #[serde(rename = "uniform")]
    Uniform,
    #[serde(rename = "ties")]
    Ties,
    #[serde(rename = "magmax")]
    MagMax,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::NegMerge => "negmerge",
            Method::Conflict => "conflict",
            Method::Uniform => "uniform",
            Method::Ties => "ties",
            Method::MagMax => "magmax",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "negmerge" | "consensus" => Ok(Method::NegMerge),
            "conflict" => Ok(Method::Conflict),
            "uniform" | "all" => Ok(Method::Uniform),
            "ties" => Ok(Method::Ties),
            "magmax" => Ok(Method::MagMax),
            other => Err(Error::InvalidSpec(alloc::format!("unknown method `{other}`"))),
        }
    }
}

/// How sign-consistent values are combined into one output element.
///
/// `MinMag`/`MaxMag` pick the value of smallest/largest magnitude, so the
/// common sign is preserved. `MinValue`/`MaxValue` compare signed values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduce {
    #[default]
    Avg,
    #[serde(alias = "min")]
    MinMag,
    #[serde(alias = "max")]
    MaxMag,
    MinValue,
    MaxValue,
}

impl Reduce {
    pub fn as_str(self) -> &'static str {
        match self {
            Reduce::Avg => "avg",
            Reduce::MinMag => "min_mag",
            Reduce::MaxMag => "max_mag",
            Reduce::MinValue => "min_value",
            Reduce::MaxValue => "max_value",
        }
    }
}

impl fmt::Display for Reduce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Reduce {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "avg" | "mean" => Ok(Reduce::Avg),
            "min" | "min_mag" => Ok(Reduce::MinMag),
            "max" | "max_mag" => Ok(Reduce::MaxMag),
            "min_value" => Ok(Reduce::MinValue),
            "max_value" => Ok(Reduce::MaxValue),
            other => Err(Error::InvalidSpec(alloc::format!("unknown reduce op `{other}`"))),
        }
    }
}

pub const DEFAULT_CONSENSUS_THRESHOLD: f64 = 1.0;
pub const DEFAULT_TIES_TRIM_FRACTION: f64 = 0.20;

fn default_q() -> f64 {
    DEFAULT_CONSENSUS_THRESHOLD
}

fn default_k() -> f64 {
    DEFAULT_TIES_TRIM_FRACTION
}

/// Strategy selector. Only `NegMerge` consults `reduce` and `q`; only
/// `Ties` consults `ties_trim_fraction`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeSpec {
    pub method: Method,
    #[serde(default)]
    pub reduce: Reduce,
    #[serde(default = "default_q")]
    pub q: f64,
    #[serde(default = "default_k")]
    pub ties_trim_fraction: f64,
}

impl Default for MergeSpec {
    fn default() -> Self {
        Self::new(Method::NegMerge)
    }
}

impl MergeSpec {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            reduce: Reduce::Avg,
            q: DEFAULT_CONSENSUS_THRESHOLD,
            ties_trim_fraction: DEFAULT_TIES_TRIM_FRACTION,
        }
    }

    pub fn negmerge(reduce: Reduce) -> Self {
        Self {
            reduce,
            ..Self::new(Method::NegMerge)
        }
    }

    pub fn ties(k: f64) -> Self {
        Self {
            ties_trim_fraction: k,
            ..Self::new(Method::Ties)
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_q(self.q)?;
        if !(self.ties_trim_fraction > 0.0 && self.ties_trim_fraction <= 1.0) {
            return Err(Error::InvalidSpec(alloc::format!(
                "ties trim fraction {} outside (0, 1]",
                self.ties_trim_fraction
            )));
        }
        Ok(())
    }
}

fn validate_q(q: f64) -> Result<()> {
    if q > 0.5 && q <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidSpec(alloc::format!(
            "consensus threshold {q} outside (0.5, 1]"
        )))
    }
}

/// Number of agreeing inputs needed for an element to stay active.
fn required_agreement(q: f64, n: usize) -> usize {
    if q >= 1.0 {
        return n;
    }
    // the epsilon keeps e.g. 0.7 * 10 from rounding up to 8
    let r = ceil_f64(q * n as f64 - 1e-9);
    (r as usize).clamp(1, n)
}

fn ceil_f64(x: f64) -> f64 {
    let t = x as i64 as f64;
    if t < x {
        t + 1.0
    } else {
        t
    }
}

/// Per-tensor boolean mask of sign-consistent elements.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConsensusMask {
    masks: BTreeMap<String, Vec<bool>>,
}

impl ConsensusMask {
    pub fn from_parts(masks: BTreeMap<String, Vec<bool>>) -> Self {
        Self { masks }
    }

    pub fn get(&self, name: &str) -> Option<&[bool]> {
        self.masks.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[bool])> {
        self.masks.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn count_active(&self) -> usize {
        self.masks.values().flatten().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.masks.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// True iff every active element here is also active in `other`.
    pub fn is_subset_of(&self, other: &ConsensusMask) -> bool {
        self.masks.len() == other.masks.len()
            && self.masks.iter().all(|(name, mask)| {
                other.masks.get(name).is_some_and(|o| {
                    o.len() == mask.len() && mask.iter().zip(o).all(|(&a, &b)| !a || b)
                })
            })
    }
}

fn check_pool(pool: &[TaskVector]) -> Result<Schema> {
    let first = pool.first().ok_or(Error::EmptyPool)?;
    let schema = first.schema();
    for tv in &pool[1..] {
        schema.check_compatible(&tv.schema())?;
    }
    Ok(schema)
}

/// Gathers the `n` pool values of each element into a scratch buffer and
/// maps them through `f`. Output dtypes follow the first pool member.
fn elementwise(
    pool: &[TaskVector],
    schema: &Schema,
    mut f: impl FnMut(&[f64]) -> f64,
) -> TaskVector {
    let mut out = TensorMap::new();
    let mut buf = alloc::vec![0.0; pool.len()];
    for (name, spec) in schema.iter() {
        let tensors: Vec<&Tensor> = pool
            .iter()
            .map(|tv| tv.delta().get(name).expect("schema checked"))
            .collect();
        let mut values = Vec::with_capacity(spec.len());
        for i in 0..spec.len() {
            for (slot, t) in buf.iter_mut().zip(&tensors) {
                *slot = t.get(i);
            }
            values.push(f(&buf));
        }
        out.insert(
            name,
            Tensor::cast_from_f64(spec.dtype, spec.shape.clone(), values),
        )
        .expect("schema names are unique and non-empty");
    }
    TaskVector::new(out)
}

/// Sign shared by at least `required` inputs, if any.
fn agreeing_sign(values: &[f64], required: usize) -> i8 {
    let pos = values.iter().filter(|&&v| v > 0.0).count();
    let neg = values.iter().filter(|&&v| v < 0.0).count();
    if pos >= required && pos > neg {
        1
    } else if neg >= required && neg > pos {
        -1
    } else {
        0
    }
}

/// Arithmetic mean accumulated in order; when every value is identical the
/// value itself is returned, so repeated inputs reproduce exactly.
fn exact_mean(mut values: impl Iterator<Item = f64>) -> f64 {
    let first = values.next().expect("mean of at least one value");
    let (sum, count, same) = values.fold((first, 1usize, true), |(s, c, same), v| {
        (s + v, c + 1, same && v == first)
    });
    if same {
        first
    } else {
        sum / count as f64
    }
}

fn reduce_agreeing(values: &[f64], s: i8, reduce: Reduce) -> f64 {
    let mut agreeing = values.iter().copied().filter(|&v| sign(v) == s);
    let first = agreeing.next().expect("at least one agreeing value");
    match reduce {
        Reduce::Avg => exact_mean(core::iter::once(first).chain(agreeing)),
        Reduce::MinMag => agreeing.fold(first, |m, v| if v.abs() < m.abs() { v } else { m }),
        Reduce::MaxMag => agreeing.fold(first, |m, v| if v.abs() > m.abs() { v } else { m }),
        Reduce::MinValue => agreeing.fold(first, |m, v| if v < m { v } else { m }),
        Reduce::MaxValue => agreeing.fold(first, |m, v| if v > m { v } else { m }),
    }
}

/// Sign-consistency mask used by [`merge_negmerge`].
pub fn consensus_mask(pool: &[TaskVector], q: f64) -> Result<ConsensusMask> {
    validate_q(q)?;
    let schema = check_pool(pool)?;
    let required = required_agreement(q, pool.len());
    let mut masks = BTreeMap::new();
    let mut buf = alloc::vec![0.0; pool.len()];
    for (name, spec) in schema.iter() {
        let tensors: Vec<&Tensor> = pool
            .iter()
            .map(|tv| tv.delta().get(name).expect("schema checked"))
            .collect();
        let mask = (0..spec.len())
            .map(|i| {
                for (slot, t) in buf.iter_mut().zip(&tensors) {
                    *slot = t.get(i);
                }
                agreeing_sign(&buf, required) != 0
            })
            .collect();
        masks.insert(name.to_string(), mask);
    }
    Ok(ConsensusMask { masks })
}

/// Sign-consensus merge.
///
/// With `q = 1` an element is active only when every input has the same
/// non-zero sign; active elements are reduced with `spec.reduce` (the mean
/// for `Avg`) and all others are exactly zero. With `q < 1` an element is
/// active when at least `⌈q·n⌉` inputs share a non-zero sign, and the reduce
/// runs over the agreeing inputs only.
pub fn merge_negmerge(pool: &[TaskVector], spec: &MergeSpec) -> Result<TaskVector> {
    spec.validate()?;
    let schema = check_pool(pool)?;
    let required = required_agreement(spec.q, pool.len());
    let reduce = spec.reduce;
    Ok(elementwise(pool, &schema, |vals| {
        match agreeing_sign(vals, required) {
            0 => 0.0,
            s => reduce_agreeing(vals, s, reduce),
        }
    }))
}

/// Reverse of the consensus rule: keeps only elements where two inputs have
/// opposite non-zero signs, averaged over all `n` inputs.
pub fn merge_conflict(pool: &[TaskVector]) -> Result<TaskVector> {
    let schema = check_pool(pool)?;
    if pool.len() < 2 {
        return Err(Error::PoolTooSmall {
            min: 2,
            actual: pool.len(),
        });
    }
    let n = pool.len() as f64;
    Ok(elementwise(pool, &schema, |vals| {
        let pos = vals.iter().any(|&v| v > 0.0);
        let neg = vals.iter().any(|&v| v < 0.0);
        if pos && neg {
            vals.iter().sum::<f64>() / n
        } else {
            0.0
        }
    }))
}

/// Plain element-wise mean.
pub fn merge_uniform(pool: &[TaskVector]) -> Result<TaskVector> {
    let schema = check_pool(pool)?;
    Ok(elementwise(pool, &schema, |vals| {
        exact_mean(vals.iter().copied())
    }))
}

/// Per element, the input of largest magnitude; ties go to the lowest pool index.
pub fn merge_magmax(pool: &[TaskVector]) -> Result<TaskVector> {
    let schema = check_pool(pool)?;
    Ok(elementwise(pool, &schema, |vals| {
        vals[1..]
            .iter()
            .fold(vals[0], |m, &v| if v.abs() > m.abs() { v } else { m })
    }))
}

fn trim_count(k: f64, total: usize) -> usize {
    (ceil_f64(k * total as f64 - 1e-9) as usize).min(total)
}

/// Keeps the top `k` fraction of `tau`'s elements by magnitude, counted over
/// the whole vector; ties at the cut keep the earlier element in canonical
/// order.
pub fn ties_trim(tau: &TaskVector, k: f64) -> Result<TaskVector> {
    MergeSpec::ties(k).validate()?;
    let total = tau.num_elements();
    let keep = trim_count(k, total);
    let flat: Vec<f64> = tau
        .delta()
        .iter()
        .flat_map(|(_, t)| (0..t.len()).map(move |i| t.get(i)))
        .collect();
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| flat[b].abs().total_cmp(&flat[a].abs()).then(a.cmp(&b)));
    let mut kept = alloc::vec![false; total];
    for &i in &order[..keep] {
        kept[i] = true;
    }
    let mut out = TensorMap::new();
    let mut offset = 0;
    for (name, t) in tau.delta().iter() {
        let values = (0..t.len())
            .map(|i| if kept[offset + i] { t.get(i) } else { 0.0 })
            .collect();
        offset += t.len();
        out.insert(name, Tensor::cast_from_f64(t.dtype(), t.shape().to_vec(), values))?;
    }
    Ok(TaskVector::new(out))
}

/// Elected sign per element: the sign of the sum of trimmed values, summed
/// in ascending value order so the result does not depend on pool order.
fn elect(vals: &mut [f64]) -> i8 {
    vals.sort_by(f64::total_cmp);
    sign(vals.iter().sum())
}

/// Elected signs of the TIES vote after trimming, per tensor.
pub fn ties_elected_signs(pool: &[TaskVector], k: f64) -> Result<BTreeMap<String, Vec<i8>>> {
    let schema = check_pool(pool)?;
    let trimmed = pool
        .iter()
        .map(|tv| ties_trim(tv, k))
        .collect::<Result<Vec<_>>>()?;
    let mut out = BTreeMap::new();
    let mut buf = alloc::vec![0.0; pool.len()];
    for (name, spec) in schema.iter() {
        let tensors: Vec<&Tensor> = trimmed
            .iter()
            .map(|tv| tv.delta().get(name).expect("schema checked"))
            .collect();
        let signs = (0..spec.len())
            .map(|i| {
                for (slot, t) in buf.iter_mut().zip(&tensors) {
                    *slot = t.get(i);
                }
                elect(&mut buf)
            })
            .collect();
        out.insert(name.to_string(), signs);
    }
    Ok(out)
}

/// Trim, elect, disjoint mean.
pub fn merge_ties(pool: &[TaskVector], spec: &MergeSpec) -> Result<TaskVector> {
    spec.validate()?;
    let schema = check_pool(pool)?;
    let trimmed = pool
        .iter()
        .map(|tv| ties_trim(tv, spec.ties_trim_fraction))
        .collect::<Result<Vec<_>>>()?;
    let mut sorted = alloc::vec![0.0; pool.len()];
    Ok(elementwise(&trimmed, &schema, |vals| {
        sorted.copy_from_slice(vals);
        let s = elect(&mut sorted);
        if s == 0 {
            return 0.0;
        }
        exact_mean(vals.iter().copied().filter(|&v| sign(v) == s))
    }))
}

/// Dispatches on `spec.method`.
pub fn merge(pool: &[TaskVector], spec: &MergeSpec) -> Result<TaskVector> {
    spec.validate()?;
    match spec.method {
        Method::NegMerge => merge_negmerge(pool, spec),
        Method::Conflict => merge_conflict(pool),
        Method::Uniform => merge_uniform(pool),
        Method::Ties => merge_ties(pool, spec),
        Method::MagMax => merge_magmax(pool),
    }
}

/// Candidate visiting order for [`greedy_soup`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GreedyOrder {
    /// Highest retain loss first.
    #[default]
    LossDescending,
    LossAscending,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GreedySoup {
    pub tau: TaskVector,
    /// Candidate indices in visiting order.
    pub order: Vec<usize>,
    /// Accepted candidate indices, in acceptance order.
    pub accepted: Vec<usize>,
}

fn soup_model(base: &TensorMap, sums: &[Vec<f64>], count: usize) -> TensorMap {
    let c = count as f64;
    let mut out = TensorMap::new();
    for ((name, t), sum) in base.iter().zip(sums) {
        let values = sum.iter().map(|s| s / c).collect();
        out.insert(name, Tensor::cast_from_f64(t.dtype(), t.shape().to_vec(), values))
            .expect("names come from a valid map");
    }
    out
}

/// Greedy model soup scored by a retain-set loss.
///
/// Candidates are visited in `order` of their individual retain loss. The
/// soup is the uniform average of accepted candidates; a candidate is
/// accepted iff adding it does not increase the soup's loss. The first
/// visited candidate is always accepted. Returns `soup − base`.
pub fn greedy_soup(
    candidates: &[TensorMap],
    base: &TensorMap,
    order: GreedyOrder,
    mut retain_loss: impl FnMut(&TensorMap) -> f64,
) -> Result<GreedySoup> {
    if candidates.is_empty() {
        return Err(Error::EmptyPool);
    }
    let schema = base.schema();
    for c in candidates {
        schema.check_compatible(&c.schema())?;
    }
    let losses: Vec<f64> = candidates.iter().map(&mut retain_loss).collect();
    let mut visit: Vec<usize> = (0..candidates.len()).collect();
    match order {
        GreedyOrder::LossDescending => visit.sort_by(|&a, &b| losses[b].total_cmp(&losses[a])),
        GreedyOrder::LossAscending => visit.sort_by(|&a, &b| losses[a].total_cmp(&losses[b])),
    }

    let first = visit[0];
    let mut sums: Vec<Vec<f64>> = candidates[first].iter().map(|(_, t)| t.to_f64_vec()).collect();
    let mut accepted = alloc::vec![first];
    let mut soup = soup_model(base, &sums, 1);
    let mut soup_loss = retain_loss(&soup);

    for &idx in &visit[1..] {
        let trial_sums: Vec<Vec<f64>> = sums
            .iter()
            .zip(candidates[idx].iter())
            .map(|(s, (_, t))| s.iter().enumerate().map(|(i, v)| v + t.get(i)).collect())
            .collect();
        let trial = soup_model(base, &trial_sums, accepted.len() + 1);
        let trial_loss = retain_loss(&trial);
        if trial_loss <= soup_loss {
            sums = trial_sums;
            soup = trial;
            soup_loss = trial_loss;
            accepted.push(idx);
        }
    }
    Ok(GreedySoup {
        tau: diff(&soup, base)?,
        order: visit,
        accepted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn tv(values: &[f64]) -> TaskVector {
        TaskVector::new(TensorMap::new().with("w", Tensor::vector(values.to_vec())).unwrap())
    }

    fn w(t: &TaskVector) -> Vec<f64> {
        t.delta().get("w").unwrap().to_f64_vec()
    }

    #[test]
    fn negmerge_avg_hand_example() {
        let pool = [tv(&[1.0, -2.0, 0.0, 3.0]), tv(&[2.0, -1.0, 4.0, -3.0])];
        let out = merge_negmerge(&pool, &MergeSpec::negmerge(Reduce::Avg)).unwrap();
        assert_eq!(w(&out), vec![1.5, -1.5, 0.0, 0.0]);
    }

    #[test]
    fn negmerge_max_mag_hand_example() {
        let pool = [tv(&[1.0, -2.0, 0.0, 3.0]), tv(&[2.0, -1.0, 4.0, -3.0])];
        let out = merge_negmerge(&pool, &MergeSpec::negmerge(Reduce::MaxMag)).unwrap();
        assert_eq!(w(&out), vec![2.0, -2.0, 0.0, 0.0]);
        let out = merge_negmerge(&pool, &MergeSpec::negmerge(Reduce::MinMag)).unwrap();
        assert_eq!(w(&out), vec![1.0, -1.0, 0.0, 0.0]);
        let out = merge_negmerge(&pool, &MergeSpec::negmerge(Reduce::MinValue)).unwrap();
        assert_eq!(w(&out), vec![1.0, -2.0, 0.0, 0.0]);
    }

    #[test]
    fn negmerge_degenerate_cases() {
        let t = tv(&[0.5, 0.0, -3.0]);
        let spec = MergeSpec::default();
        assert!(merge_negmerge(std::slice::from_ref(&t), &spec).unwrap().bit_eq(&t));
        let anti = merge_negmerge(&[t.clone(), t.scaled(-1.0)], &spec).unwrap();
        assert_eq!(anti.nnz(), 0);
        assert_eq!(merge_negmerge(&[], &spec), Err(Error::EmptyPool));
    }

    #[test]
    fn partial_consensus() {
        let pool = [tv(&[1.0, 1.0]), tv(&[2.0, -1.0]), tv(&[-3.0, 0.0])];
        let spec = MergeSpec {
            q: 0.6,
            ..MergeSpec::default()
        };
        // ⌈0.6·3⌉ = 2 agreeing inputs needed
        let out = merge_negmerge(&pool, &spec).unwrap();
        assert_eq!(w(&out), vec![1.5, 0.0]);
        assert_eq!(required_agreement(0.7, 10), 7);
        assert_eq!(required_agreement(0.51, 2), 2);
    }

    #[test]
    fn q_out_of_range() {
        for q in [0.4, 0.5, 1.1, f64::NAN] {
            let spec = MergeSpec {
                q,
                ..MergeSpec::default()
            };
            assert!(matches!(
                merge_negmerge(&[tv(&[1.0])], &spec),
                Err(Error::InvalidSpec(_))
            ));
        }
    }

    #[test]
    fn conflict_examples() {
        let out = merge_conflict(&[tv(&[1.0, -2.0]), tv(&[-1.0, -1.0])]).unwrap();
        assert_eq!(w(&out), vec![0.0, 0.0]);
        let out = merge_conflict(&[tv(&[3.0, -2.0]), tv(&[-1.0, -1.0])]).unwrap();
        assert_eq!(w(&out), vec![1.0, 0.0]);
        let same = merge_conflict(&[tv(&[3.0, -2.0]), tv(&[3.0, -2.0])]).unwrap();
        assert_eq!(same.nnz(), 0);
        assert_eq!(
            merge_conflict(&[tv(&[1.0])]),
            Err(Error::PoolTooSmall { min: 2, actual: 1 })
        );
        assert_eq!(merge_conflict(&[]), Err(Error::EmptyPool));
    }

    #[test]
    fn uniform_and_magmax_examples() {
        let out = merge_uniform(&[tv(&[1.0, -2.0]), tv(&[3.0, 2.0])]).unwrap();
        assert_eq!(w(&out), vec![2.0, 0.0]);
        let out = merge_magmax(&[tv(&[1.0, -2.0]), tv(&[-3.0, 1.0])]).unwrap();
        assert_eq!(w(&out), vec![-3.0, -2.0]);
        let t = tv(&[1.0, -2.0]);
        let out = merge_magmax(&[t.clone(), t.scaled(-1.0)]).unwrap();
        assert!(out.bit_eq(&t));
    }

    #[test]
    fn ties_examples() {
        let out = merge_ties(&[tv(&[1.0, -2.0]), tv(&[3.0, 2.0])], &MergeSpec::ties(1.0)).unwrap();
        assert_eq!(w(&out), vec![2.0, 0.0]);
        let trimmed = ties_trim(&tv(&[4.0, 1.0, -3.0, 0.0]), 0.5).unwrap();
        assert_eq!(w(&trimmed), vec![4.0, 0.0, -3.0, 0.0]);
        let t = tv(&[4.0, 1.0, -3.0, 0.0]);
        let out = merge_ties(&[t.clone(), t.clone(), t.clone()], &MergeSpec::ties(1.0)).unwrap();
        assert!(out.bit_eq(&t));
    }

    #[test]
    fn ties_trim_spans_tensors() {
        let t = TaskVector::new(
            TensorMap::new()
                .with("a", Tensor::vector(vec![0.1, 5.0]))
                .unwrap()
                .with("b", Tensor::vector(vec![-4.0, 0.2]))
                .unwrap(),
        );
        let out = ties_trim(&t, 0.5).unwrap();
        assert_eq!(out.delta().get("a").unwrap().to_f64_vec(), vec![0.0, 5.0]);
        assert_eq!(out.delta().get("b").unwrap().to_f64_vec(), vec![-4.0, 0.0]);
    }

    #[test]
    fn mask_examples() {
        let mask = consensus_mask(&[tv(&[1.0, -1.0, 0.0]), tv(&[2.0, 1.0, 0.0])], 1.0).unwrap();
        assert_eq!(mask.get("w").unwrap(), &[true, false, false]);
        let t = tv(&[1.0, -1.0]);
        assert_eq!(consensus_mask(&[t.clone(), t.clone()], 1.0).unwrap().count_active(), 2);
        assert_eq!(consensus_mask(&[t.clone(), t.scaled(-1.0)], 1.0).unwrap().count_active(), 0);
    }

    #[test]
    fn schema_mismatch_in_pool() {
        let other = TaskVector::new(TensorMap::new().with("v", Tensor::vector(vec![1.0])).unwrap());
        assert!(matches!(
            merge_uniform(&[tv(&[1.0]), other]),
            Err(Error::SchemaMismatch { .. })
        ));
    }

    fn model(v: f64) -> TensorMap {
        TensorMap::new().with("w", Tensor::vector(vec![v])).unwrap()
    }

    #[test]
    fn greedy_single_candidate() {
        let base = model(0.0);
        let soup = greedy_soup(&[model(2.0)], &base, GreedyOrder::default(), |m| {
            m.get("w").unwrap().get(0)
        })
        .unwrap();
        assert_eq!(w(&soup.tau), vec![2.0]);
        assert_eq!(soup.accepted, vec![0]);
    }

    #[test]
    fn greedy_rejects_worsening_candidate() {
        let base = model(0.0);
        // loss = |w - 1|: descending order visits 3.0 (loss 2) then 1.5 (loss 0.5)
        let loss = |m: &TensorMap| (m.get("w").unwrap().get(0) - 1.0).abs();
        let soup = greedy_soup(&[model(1.5), model(3.0)], &base, GreedyOrder::LossDescending, loss)
            .unwrap();
        assert_eq!(soup.order, vec![1, 0]);
        // soup of both is 2.25 with loss 1.25 < 2, so accepted
        assert_eq!(soup.accepted, vec![1, 0]);

        // ascending: 1.5 first (loss .5), then soup with 3.0 = 2.25, loss 1.25 > .5
        let soup = greedy_soup(&[model(1.5), model(3.0)], &base, GreedyOrder::LossAscending, loss)
            .unwrap();
        assert_eq!(soup.accepted, vec![0]);
        assert_eq!(w(&soup.tau), vec![1.5]);
        assert_eq!(
            greedy_soup(&[], &base, GreedyOrder::default(), loss),
            Err(Error::EmptyPool)
        );
    }

    #[test]
    fn spec_json_round_trip_names() {
        assert_eq!("NegMerge".parse::<Method>().unwrap(), Method::NegMerge);
        assert_eq!("max".parse::<Reduce>().unwrap(), Reduce::MaxMag);
        assert!("median".parse::<Reduce>().is_err());
    }
}
