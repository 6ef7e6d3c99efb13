//! Hyperparameter grids and forget-set fine-tune pools.

use negmerge_core::TensorMap;
use serde::{Deserialize, Serialize};

use crate::dataset::Subset;
use crate::error::{HarnessError, Result};
use crate::mlp::{train_from, MlpConfig, TrainHyper};

pub const DEFAULT_POOL_SIZE: usize = 10;
pub const MIN_POOL_SIZE: usize = 5;
pub const MAX_POOL_SIZE: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneGrid {
    pub learning_rates: Vec<f64>,
    pub epochs: Vec<usize>,
    #[serde(default = "zero_list")]
    pub weight_decays: Vec<f64>,
    #[serde(default = "zero_list")]
    pub label_smoothings: Vec<f64>,
    #[serde(default = "zero_list")]
    pub jitters: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_pool_size")]
    pub pool_size: usize,
    /// Permits pool sizes outside the usual 5 to 30.
    #[serde(default)]
    pub allow_any_size: bool,
}

fn zero_list() -> Vec<f64> {
    vec![0.0]
}

fn default_batch() -> usize {
    16
}

fn default_pool_size() -> usize {
    DEFAULT_POOL_SIZE
}

impl FinetuneGrid {
    pub fn validate(&self) -> Result<()> {
        if self.pool_size == 0 {
            return Err(HarnessError::InvalidConfig("pool size must be positive".into()));
        }
        if !self.allow_any_size && !(MIN_POOL_SIZE..=MAX_POOL_SIZE).contains(&self.pool_size) {
            return Err(HarnessError::InvalidConfig(format!(
                "pool size {} outside {MIN_POOL_SIZE}..={MAX_POOL_SIZE}",
                self.pool_size
            )));
        }
        let axes = [
            ("learning_rates", self.learning_rates.len()),
            ("epochs", self.epochs.len()),
            ("weight_decays", self.weight_decays.len()),
            ("label_smoothings", self.label_smoothings.len()),
            ("jitters", self.jitters.len()),
            ("seeds", self.seeds.len()),
        ];
        if let Some((name, _)) = axes.iter().find(|(_, len)| *len == 0) {
            return Err(HarnessError::InvalidConfig(format!("grid axis {name} is empty")));
        }
        let total: usize = axes.iter().map(|(_, len)| len).product();
        if total < self.pool_size {
            return Err(HarnessError::InvalidConfig(format!(
                "grid has {total} configurations, fewer than pool size {}",
                self.pool_size
            )));
        }
        Ok(())
    }

    /// The first `pool_size` entries of the cross product. The seed axis
    /// varies fastest, then jitter, label smoothing, weight decay, epochs and
    /// learning rate.
    pub fn configs(&self) -> Result<Vec<TrainHyper>> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.pool_size);
        'outer: for &lr in &self.learning_rates {
            for &epochs in &self.epochs {
                for &weight_decay in &self.weight_decays {
                    for &label_smoothing in &self.label_smoothings {
                        for &jitter in &self.jitters {
                            for &seed in &self.seeds {
                                if out.len() == self.pool_size {
                                    break 'outer;
                                }
                                let h = TrainHyper {
                                    lr,
                                    epochs,
                                    weight_decay,
                                    label_smoothing,
                                    jitter,
                                    batch: self.batch,
                                    seed,
                                };
                                h.validate()?;
                                out.push(h);
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Fine-tunes `base` on `forget` once per grid configuration, in grid order.
pub fn finetune_pool(
    base: &TensorMap,
    forget: Subset<'_>,
    grid: &FinetuneGrid,
    cfg: &MlpConfig,
) -> Result<Vec<TensorMap>> {
    grid.configs()?
        .iter()
        .map(|h| train_from(cfg, base, forget, h))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{gen_dataset, split_forget, DatasetConfig, ForgetMode};
    use crate::mlp::Params;
    use negmerge_core::task_vector::diff;

    fn grid() -> FinetuneGrid {
        FinetuneGrid {
            learning_rates: vec![0.05, 0.1],
            epochs: vec![2, 4],
            weight_decays: vec![0.0, 0.01],
            label_smoothings: vec![0.0, 0.1],
            jitters: vec![0.0],
            seeds: vec![1, 2],
            batch: 8,
            pool_size: 10,
            allow_any_size: false,
        }
    }

    fn setup() -> (crate::dataset::Dataset, MlpConfig, TensorMap) {
        let cfg = DatasetConfig {
            n_classes: 3,
            dim: 4,
            samples_per_class: 30,
            separation: 3.0,
            noise: 1.0,
            center_radius: None,
        };
        let ds = gen_dataset(&cfg, 3).unwrap();
        let ds = split_forget(&ds, ForgetMode::RandomFraction(0.2), 3).unwrap();
        let mlp = MlpConfig::new(4, vec![6], 3);
        let base = Params::init(&mlp, 0).unwrap().to_map();
        (ds, mlp, base)
    }

    #[test]
    fn enumeration_order_and_cap() {
        let c = grid().configs().unwrap();
        assert_eq!(c.len(), 10);
        assert_eq!((c[0].seed, c[1].seed), (1, 2));
        assert_eq!(c[2].label_smoothing, 0.1);
        assert_eq!(c[4].weight_decay, 0.01);
        assert_eq!(c[8].epochs, 4);
        assert!(c.iter().all(|h| h.lr == 0.05));
    }

    #[test]
    fn size_limits() {
        let g = FinetuneGrid { pool_size: 4, ..grid() };
        assert!(g.validate().is_err());
        assert!(FinetuneGrid { allow_any_size: true, ..g }.validate().is_ok());
        assert!(FinetuneGrid { pool_size: 31, ..grid() }.validate().is_err());
        let small = FinetuneGrid { seeds: vec![1], learning_rates: vec![0.1], ..grid() };
        assert!(small.validate().is_err(), "8 configurations cannot fill 10");
    }

    #[test]
    fn pool_members_match_base_schema() {
        let (ds, mlp, base) = setup();
        let pool = finetune_pool(&base, ds.forget_set(), &grid(), &mlp).unwrap();
        assert_eq!(pool.len(), 10);
        for m in &pool {
            assert_eq!(m.schema(), base.schema());
            assert!(!m.bit_eq(&base));
        }
    }

    #[test]
    fn single_config_and_zero_epochs() {
        let (ds, mlp, base) = setup();
        let g = FinetuneGrid {
            epochs: vec![0],
            pool_size: 1,
            allow_any_size: true,
            ..grid()
        };
        let pool = finetune_pool(&base, ds.forget_set(), &g, &mlp).unwrap();
        assert_eq!(pool.len(), 1);
        assert_eq!(diff(&pool[0], &base).unwrap().nnz(), 0);
    }

    #[test]
    fn divergence_names_the_config() {
        let (ds, mlp, base) = setup();
        let g = FinetuneGrid { learning_rates: vec![1e300], ..grid() };
        match finetune_pool(&base, ds.forget_set(), &g, &mlp) {
            Err(HarnessError::TrainingDiverged { config, .. }) => {
                assert_eq!(config, g.configs().unwrap()[0].describe())
            }
            other => panic!("{other:?}"),
        }
    }
}
