//! Gaussian-cluster classification data with train/val/test and
//! forget/retain partitions.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

const PLACEMENT_TRIES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Minimum pairwise distance between class centers.
    pub separation: f64,
    /// Standard deviation of the isotropic noise around each center.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Radius of the ball holding the centers. Defaults to
    /// `separation · max(1, n_classes^(1/dim))`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center_radius: Option<f64>,
}

fn default_noise() -> f64 {
    1.0
}

/// Which training samples make up the forget set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgetMode {
    RandomFraction(f64),
    ClassWise(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub n_classes: usize,
    /// Row-major `samples × dim`.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Partition of `train`; empty until [`split_forget`] runs.
    pub forget_idx: Vec<usize>,
    pub retain_idx: Vec<usize>,
}

/// Borrowed view of a subset of samples.
#[derive(Debug, Clone, Copy)]
pub struct Subset<'a> {
    pub ds: &'a Dataset,
    pub indices: &'a [usize],
}

impl Subset<'_> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

impl Dataset {
    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset<'a>(&'a self, indices: &'a [usize]) -> Subset<'a> {
        Subset { ds: self, indices }
    }

    pub fn train_set(&self) -> Subset<'_> {
        self.subset(&self.train)
    }

    pub fn forget_set(&self) -> Subset<'_> {
        self.subset(&self.forget_idx)
    }

    pub fn retain_set(&self) -> Subset<'_> {
        self.subset(&self.retain_idx)
    }

    pub fn val_set(&self) -> Subset<'_> {
        self.subset(&self.val)
    }

    pub fn test_set(&self) -> Subset<'_> {
        self.subset(&self.test)
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Places centers one at a time, uniformly in a ball, rejecting candidates
/// closer than `separation` to an earlier center.
fn place_centers(cfg: &DatasetConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let infeasible = || HarnessError::InfeasibleSeparation {
        n_classes: cfg.n_classes,
        dim: cfg.dim,
        separation: cfg.separation,
    };
    let radius = cfg.center_radius.unwrap_or_else(|| {
        // large enough that n well-separated points fit comfortably
        cfg.separation * (cfg.n_classes as f64).powf(1.0 / cfg.dim as f64).max(1.0)
    });
    let min2 = cfg.separation * cfg.separation;
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_classes);
    for _ in 0..cfg.n_classes {
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let dir: Vec<f64> = (0..cfg.dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let r = radius * rng.random::<f64>().powf(1.0 / cfg.dim as f64);
            let cand: Vec<f64> = dir.iter().map(|v| v / norm * r).collect();
            if centers.iter().all(|c| dist2(c, &cand) >= min2) {
                centers.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(infeasible());
        }
    }
    Ok(centers)
}

/// Gaussian class clusters, deterministic per `(cfg, seed)`, split 80/10/10
/// into train/val/test.
pub fn gen_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Dataset> {
    if cfg.n_classes == 0 || cfg.dim == 0 || cfg.samples_per_class == 0 {
        return Err(HarnessError::InvalidConfig(
            "class count, dimension and samples per class must be positive".into(),
        ));
    }
    if !(cfg.separation.is_finite() && cfg.separation >= 0.0) {
        return Err(HarnessError::InvalidConfig("separation must be finite and non-negative".into()));
    }
    if cfg.center_radius.is_some_and(|r| !(r.is_finite() && r >= 0.0)) {
        return Err(HarnessError::InvalidConfig("center radius must be finite and non-negative".into()));
    }
    if !(cfg.noise.is_finite() && cfg.noise >= 0.0) {
        return Err(HarnessError::InvalidConfig("noise must be finite and non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = place_centers(cfg, &mut rng)?;

    let n = cfg.n_classes * cfg.samples_per_class;
    let mut features = Vec::with_capacity(n * cfg.dim);
    let mut labels = Vec::with_capacity(n);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..cfg.samples_per_class {
            for &c in center {
                let z: f64 = rng.sample(StandardNormal);
                features.push(c + cfg.noise * z);
            }
            labels.push(class);
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();

    Ok(Dataset {
        dim: cfg.dim,
        n_classes: cfg.n_classes,
        features,
        labels,
        retain_idx: train.clone(),
        train,
        val,
        test,
        forget_idx: Vec::new(),
    })
}

/// Splits the training indices into forget and retain sets.
pub fn split_forget(ds: &Dataset, mode: ForgetMode, seed: u64) -> Result<Dataset> {
    let mut forget: Vec<usize> = match mode {
        ForgetMode::RandomFraction(p) => {
            if !(p > 0.0 && p < 1.0) {
                return Err(HarnessError::InvalidConfig(format!(
                    "forget fraction {p} outside (0, 1)"
                )));
            }
            let count = (p * ds.train.len() as f64).round() as usize;
            let mut shuffled = ds.train.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            shuffled.truncate(count);
            shuffled
        }
        ForgetMode::ClassWise(c) => {
            if c >= ds.n_classes {
                return Err(HarnessError::InvalidConfig(format!(
                    "class {c} out of range for {} classes",
                    ds.n_classes
                )));
            }
            ds.train.iter().copied().filter(|&i| ds.labels[i] == c).collect()
        }
    };
    forget.sort_unstable();
    let retain: Vec<usize> = ds
        .train
        .iter()
        .copied()
        .filter(|i| forget.binary_search(i).is_err())
        .collect();
    if forget.is_empty() {
        return Err(HarnessError::EmptyPartition("forget"));
    }
    if retain.is_empty() {
        return Err(HarnessError::EmptyPartition("retain"));
    }
    Ok(Dataset {
        forget_idx: forget,
        retain_idx: retain,
        ..ds.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n_classes: usize, dim: usize, spc: usize, separation: f64) -> DatasetConfig {
        DatasetConfig {
            n_classes,
            dim,
            samples_per_class: spc,
            separation,
            noise: 1.0,
            center_radius: None,
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let c = cfg(4, 3, 20, 2.0);
        let a = gen_dataset(&c, 5).unwrap();
        let b = gen_dataset(&c, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.features.iter().zip(&b.features).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(gen_dataset(&c, 6).unwrap().features, a.features);
    }

    #[test]
    fn split_sizes() {
        let ds = gen_dataset(&cfg(10, 4, 125, 1.0), 1).unwrap();
        assert_eq!(ds.train.len(), 1000);
        assert_eq!(ds.val.len(), 125);
        assert_eq!(ds.test.len(), 125);
        let f = split_forget(&ds, ForgetMode::RandomFraction(0.1), 3).unwrap();
        assert_eq!(f.forget_idx.len(), 100);
        assert_eq!(f.retain_idx.len(), 900);
        let half = split_forget(&ds, ForgetMode::RandomFraction(0.5), 3).unwrap();
        assert_eq!(half.forget_idx.len(), half.retain_idx.len());
    }

    #[test]
    fn partitions_are_disjoint_and_cover_train() {
        let ds = gen_dataset(&cfg(3, 2, 50, 3.0), 2).unwrap();
        let f = split_forget(&ds, ForgetMode::RandomFraction(0.3), 9).unwrap();
        let mut all: Vec<usize> = f.forget_idx.iter().chain(&f.retain_idx).copied().collect();
        all.sort_unstable();
        assert_eq!(all, ds.train);
    }

    #[test]
    fn class_wise_forgets_exactly_one_class() {
        let ds = gen_dataset(&cfg(3, 2, 50, 3.0), 2).unwrap();
        let f = split_forget(&ds, ForgetMode::ClassWise(0), 0).unwrap();
        let expected: Vec<usize> = ds.train.iter().copied().filter(|&i| ds.labels[i] == 0).collect();
        assert_eq!(f.forget_idx, expected);
        assert!(split_forget(&ds, ForgetMode::ClassWise(3), 0).is_err());
    }

    #[test]
    fn zero_separation_is_valid() {
        let ds = gen_dataset(&cfg(3, 2, 10, 0.0), 0).unwrap();
        assert_eq!(ds.n_samples(), 30);
    }

    #[test]
    fn infeasible_separation_detected() {
        // three points 5 apart cannot fit in [-1, 1]
        let tight = DatasetConfig {
            center_radius: Some(1.0),
            ..cfg(3, 1, 10, 5.0)
        };
        assert!(matches!(gen_dataset(&tight, 0), Err(HarnessError::InfeasibleSeparation { .. })));
        assert!(gen_dataset(&DatasetConfig { center_radius: Some(10.0), ..tight }, 0).is_ok());
    }

    #[test]
    fn bad_fractions_and_empty_partitions() {
        let ds = gen_dataset(&cfg(2, 2, 5, 1.0), 0).unwrap();
        assert!(split_forget(&ds, ForgetMode::RandomFraction(0.0), 0).is_err());
        assert!(split_forget(&ds, ForgetMode::RandomFraction(1.0), 0).is_err());
        // 8 training samples, 1% rounds to nothing
        assert!(matches!(
            split_forget(&ds, ForgetMode::RandomFraction(0.01), 0),
            Err(HarnessError::EmptyPartition("forget"))
        ));
    }
}
