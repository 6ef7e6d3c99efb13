//! Test support: random task-vector pools and brute-force oracles.
//!
//! The oracles work on plain `Vec<f64>` buffers flattened out of the pool and
//! share no code with `negmerge-core`'s merge paths.

use negmerge_core::merging::Reduce;
use negmerge_core::task_vector::TaskVector;
use negmerge_core::{DType, Tensor, TensorMap};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use rand::SeedableRng;

pub type TestRng = ChaCha8Rng;

pub fn rng(seed: u64) -> TestRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Shape of a random pool: tensor names with element counts and a dtype.
#[derive(Debug, Clone)]
pub struct PoolLayout {
    pub tensors: Vec<(String, Vec<usize>)>,
    pub dtype: DType,
}

impl PoolLayout {
    /// One to three tensors with at most 64 elements each.
    pub fn random(rng: &mut TestRng, dtype: DType) -> Self {
        let count = rng.random_range(1..=3);
        let tensors = (0..count)
            .map(|k| {
                let shape = if rng.random_bool(0.5) {
                    vec![rng.random_range(1..=64)]
                } else {
                    vec![rng.random_range(1..=8), rng.random_range(1..=8)]
                };
                (format!("layers.{k}.weight"), shape)
            })
            .collect();
        Self { tensors, dtype }
    }
}

/// Uniform in [-2, 2] with roughly `zero_prob` exact zeros.
pub fn random_value(rng: &mut TestRng, zero_prob: f64) -> f64 {
    if rng.random_bool(zero_prob) {
        0.0
    } else {
        rng.random_range(-2.0..2.0)
    }
}

/// Multiples of 2^-20 in [-2, 2]; sums and differences of these are exact.
pub fn random_dyadic(rng: &mut TestRng, zero_prob: f64) -> f64 {
    if rng.random_bool(zero_prob) {
        0.0
    } else {
        let k: i64 = rng.random_range(-(2 << 20)..=(2 << 20));
        k as f64 / f64::from(1 << 20)
    }
}

pub fn random_map(
    rng: &mut TestRng,
    layout: &PoolLayout,
    mut value: impl FnMut(&mut TestRng) -> f64,
) -> TensorMap {
    let mut map = TensorMap::new();
    for (name, shape) in &layout.tensors {
        let len: usize = shape.iter().product();
        let values: Vec<f64> = (0..len).map(|_| value(rng)).collect();
        let t = match layout.dtype {
            DType::F64 => Tensor::from_f64(shape.clone(), values),
            DType::F32 => Tensor::from_f32(shape.clone(), values.iter().map(|&v| v as f32).collect()),
        }
        .unwrap();
        map.insert(name.clone(), t).unwrap();
    }
    map
}

pub fn random_tau(rng: &mut TestRng, layout: &PoolLayout, zero_prob: f64) -> TaskVector {
    TaskVector::new(random_map(rng, layout, |r| random_value(r, zero_prob)))
}

/// Pool of `n` vectors over a shared layout, ~30% exact zeros.
pub fn random_pool(rng: &mut TestRng, layout: &PoolLayout, n: usize) -> Vec<TaskVector> {
    (0..n).map(|_| random_tau(rng, layout, 0.3)).collect()
}

/// A fresh random pool with `n ∈ [1, max_n]`.
pub fn random_pool_case(rng: &mut TestRng, max_n: usize) -> Vec<TaskVector> {
    let dtype = if rng.random_bool(0.5) { DType::F64 } else { DType::F32 };
    let layout = PoolLayout::random(rng, dtype);
    let n = rng.random_range(1..=max_n);
    random_pool(rng, &layout, n)
}

/// Flattened view: per tensor (canonical order), per vector, the values.
pub struct Flat {
    pub names: Vec<String>,
    /// `values[tensor][vector][element]`
    pub values: Vec<Vec<Vec<f64>>>,
    pub dtypes: Vec<DType>,
}

pub fn flatten(pool: &[TaskVector]) -> Flat {
    let names: Vec<String> = pool[0].delta().names().map(str::to_string).collect();
    let dtypes = names
        .iter()
        .map(|n| pool[0].delta().get(n).unwrap().dtype())
        .collect();
    let values = names
        .iter()
        .map(|n| {
            pool.iter()
                .map(|tv| tv.delta().get(n).unwrap().to_f64_vec())
                .collect()
        })
        .collect();
    Flat {
        names,
        values,
        dtypes,
    }
}

fn sgn(v: f64) -> i32 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Value as it would be stored in `dtype`.
pub fn store(dtype: DType, v: f64) -> f64 {
    match dtype {
        DType::F32 => f64::from(v as f32),
        DType::F64 => v,
    }
}

/// Oracle output: per tensor, mask and values.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleOut {
    pub names: Vec<String>,
    pub masks: Vec<Vec<bool>>,
    pub values: Vec<Vec<f64>>,
}

/// Smallest `m` with `m ≥ q·n` (up to float noise).
fn needed(q: f64, n: usize) -> usize {
    if q >= 1.0 {
        return n;
    }
    (1..=n).find(|&m| m as f64 + 1e-9 >= q * n as f64).unwrap_or(n)
}

/// Sign-consensus merge, element by element.
pub fn oracle_negmerge(pool: &[TaskVector], q: f64, reduce: Reduce) -> OracleOut {
    let flat = flatten(pool);
    let n = pool.len();
    let need = needed(q, n);
    let mut masks = Vec::new();
    let mut values = Vec::new();
    for (t, per_vec) in flat.values.iter().enumerate() {
        let len = per_vec[0].len();
        let mut mask = vec![false; len];
        let mut out = vec![0.0; len];
        for i in 0..len {
            let column: Vec<f64> = (0..n).map(|k| per_vec[k][i]).collect();
            let pos = column.iter().filter(|&&v| sgn(v) == 1).count();
            let neg = column.iter().filter(|&&v| sgn(v) == -1).count();
            let s = if pos >= need && pos > neg {
                1
            } else if neg >= need && neg > pos {
                -1
            } else {
                0
            };
            if s == 0 {
                continue;
            }
            mask[i] = true;
            let agree: Vec<f64> = column.into_iter().filter(|&v| sgn(v) == s).collect();
            let v = match reduce {
                Reduce::Avg => {
                    let mut acc = 0.0;
                    for v in &agree {
                        acc += v;
                    }
                    acc / agree.len() as f64
                }
                Reduce::MinMag => *agree
                    .iter()
                    .min_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap())
                    .unwrap(),
                Reduce::MaxMag => *agree
                    .iter()
                    .max_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap())
                    .unwrap(),
                Reduce::MinValue => agree.iter().cloned().fold(f64::INFINITY, f64::min),
                Reduce::MaxValue => agree.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            };
            out[i] = store(flat.dtypes[t], v);
        }
        masks.push(mask);
        values.push(out);
    }
    OracleOut {
        names: flat.names,
        masks,
        values,
    }
}

fn per_element(pool: &[TaskVector], mut f: impl FnMut(&[f64]) -> (bool, f64)) -> OracleOut {
    let flat = flatten(pool);
    let mut masks = Vec::new();
    let mut values = Vec::new();
    for (t, per_vec) in flat.values.iter().enumerate() {
        let len = per_vec[0].len();
        let mut mask = Vec::with_capacity(len);
        let mut out = Vec::with_capacity(len);
        for i in 0..len {
            let column: Vec<f64> = per_vec.iter().map(|v| v[i]).collect();
            let (m, v) = f(&column);
            mask.push(m);
            out.push(store(flat.dtypes[t], v));
        }
        masks.push(mask);
        values.push(out);
    }
    OracleOut {
        names: flat.names,
        masks,
        values,
    }
}

pub fn oracle_uniform(pool: &[TaskVector]) -> OracleOut {
    per_element(pool, |col| {
        let mut acc = 0.0;
        for v in col {
            acc += v;
        }
        (true, acc / col.len() as f64)
    })
}

pub fn oracle_magmax(pool: &[TaskVector]) -> OracleOut {
    per_element(pool, |col| {
        let mut best = 0;
        for k in 1..col.len() {
            if col[k].abs() > col[best].abs() {
                best = k;
            }
        }
        (true, col[best])
    })
}

/// Mask marks elements carrying a sign conflict.
pub fn oracle_conflict(pool: &[TaskVector]) -> OracleOut {
    per_element(pool, |col| {
        let conflict = col.iter().any(|&a| a > 0.0) && col.iter().any(|&a| a < 0.0);
        if !conflict {
            return (false, 0.0);
        }
        let mut acc = 0.0;
        for v in col {
            acc += v;
        }
        (true, acc / col.len() as f64)
    })
}

/// Top-`k` fraction by magnitude over the whole vector; earlier canonical
/// position wins ties at the cut.
pub fn oracle_ties_trim(tau: &TaskVector, k: f64) -> Vec<Vec<f64>> {
    let per_tensor: Vec<Vec<f64>> = tau.delta().iter().map(|(_, t)| t.to_f64_vec()).collect();
    let all: Vec<f64> = per_tensor.iter().flatten().copied().collect();
    let total = all.len();
    let keep = (0..=total).find(|&m| m as f64 + 1e-9 >= k * total as f64).unwrap_or(total);
    // selection by repeated arg-max, O(total²) on purpose
    let mut taken = vec![false; total];
    for _ in 0..keep {
        let mut best: Option<usize> = None;
        for i in 0..total {
            if taken[i] {
                continue;
            }
            match best {
                None => best = Some(i),
                Some(b) if all[i].abs() > all[b].abs() => best = Some(i),
                _ => {}
            }
        }
        taken[best.unwrap()] = true;
    }
    let mut out = Vec::new();
    let mut offset = 0;
    for t in &per_tensor {
        out.push(
            (0..t.len())
                .map(|i| if taken[offset + i] { t[i] } else { 0.0 })
                .collect(),
        );
        offset += t.len();
    }
    out
}

/// Mask marks elements with an elected sign.
pub fn oracle_ties(pool: &[TaskVector], k: f64) -> OracleOut {
    let trimmed: Vec<Vec<Vec<f64>>> = pool.iter().map(|tv| oracle_ties_trim(tv, k)).collect();
    let names: Vec<String> = pool[0].delta().names().map(str::to_string).collect();
    let dtypes: Vec<DType> = names
        .iter()
        .map(|n| pool[0].delta().get(n).unwrap().dtype())
        .collect();
    let mut masks = Vec::new();
    let mut values = Vec::new();
    for t in 0..names.len() {
        let len = trimmed[0][t].len();
        let mut mask = vec![false; len];
        let mut out = vec![0.0; len];
        for i in 0..len {
            let column: Vec<f64> = trimmed.iter().map(|v| store(dtypes[t], v[t][i])).collect();
            let total: f64 = column.iter().sum();
            let s = sgn(total);
            if s == 0 {
                continue;
            }
            mask[i] = true;
            let matching: Vec<f64> = column.into_iter().filter(|&v| sgn(v) == s).collect();
            let mut acc = 0.0;
            for v in &matching {
                acc += v;
            }
            out[i] = store(dtypes[t], acc / matching.len() as f64);
        }
        masks.push(mask);
        values.push(out);
    }
    OracleOut {
        names,
        masks,
        values,
    }
}

/// Replays greedy-soup acceptance from scratch: each trial soup is the
/// freshly computed mean of the accepted candidates plus the new one.
pub fn oracle_greedy(
    candidates: &[TensorMap],
    descending: bool,
    mut loss: impl FnMut(&TensorMap) -> f64,
) -> (Vec<usize>, TensorMap) {
    let losses: Vec<f64> = candidates.iter().map(&mut loss).collect();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    // insertion sort keeps equal losses in index order
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 {
            let (a, b) = (losses[order[j - 1]], losses[order[j]]);
            let swap = if descending { a < b } else { a > b };
            if !swap {
                break;
            }
            order.swap(j - 1, j);
            j -= 1;
        }
    }
    let mean_of = |members: &[usize]| -> TensorMap {
        let mut out = TensorMap::new();
        for (name, t) in candidates[members[0]].iter() {
            let mut acc = vec![0.0; t.len()];
            for &m in members {
                let c = candidates[m].get(name).unwrap();
                for (i, a) in acc.iter_mut().enumerate() {
                    *a += c.get(i);
                }
            }
            let values: Vec<f64> = acc.iter().map(|a| a / members.len() as f64).collect();
            let tensor = match t.dtype() {
                DType::F64 => Tensor::from_f64(t.shape().to_vec(), values),
                DType::F32 => Tensor::from_f32(
                    t.shape().to_vec(),
                    values.iter().map(|&v| v as f32).collect(),
                ),
            }
            .unwrap();
            out.insert(name, tensor).unwrap();
        }
        out
    };
    let mut accepted = vec![order[0]];
    let mut best = loss(&mean_of(&accepted));
    for &c in &order[1..] {
        let mut trial = accepted.clone();
        trial.push(c);
        let l = loss(&mean_of(&trial));
        if l <= best {
            best = l;
            accepted = trial;
        }
    }
    let soup = mean_of(&accepted);
    (accepted, soup)
}

/// `|a − b| ≤ tol · max(|a|, |b|)`, with exact equality required at zero.
pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    if a == b {
        return true;
    }
    (a - b).abs() <= tol * a.abs().max(b.abs())
}

/// Compares a merged vector against an oracle: values to `tol` relative and,
/// when `check_mask` is set, the support exactly against the oracle mask.
pub fn check_against(tau: &TaskVector, oracle: &OracleOut, tol: f64) -> Result<(), String> {
    let names: Vec<&str> = tau.delta().names().collect();
    if names != oracle.names.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err("tensor names differ".into());
    }
    for (t, name) in names.iter().enumerate() {
        let got = tau.delta().get(name).unwrap().to_f64_vec();
        for (i, (&g, &w)) in got.iter().zip(&oracle.values[t]).enumerate() {
            if !rel_close(g, w, tol) {
                return Err(format!("{name}[{i}]: got {g}, oracle {w}"));
            }
        }
    }
    Ok(())
}

/// Support of `tau` (non-zero elements) per tensor.
pub fn support(tau: &TaskVector) -> Vec<Vec<bool>> {
    tau.delta()
        .iter()
        .map(|(_, t)| (0..t.len()).map(|i| t.get(i) != 0.0).collect())
        .collect()
}

/// Mask of `mask` flattened into per-tensor vectors in canonical order.
pub fn mask_vectors(mask: &negmerge_core::merging::ConsensusMask) -> Vec<Vec<bool>> {
    mask.iter().map(|(_, m)| m.to_vec()).collect()
}
