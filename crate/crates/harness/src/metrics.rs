//! Split accuracies and a loss-threshold membership attack.

use negmerge_core::TensorMap;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Subset};
use crate::error::{HarnessError, Result};
use crate::mlp::{MlpConfig, Params};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc_dr: f64,
    pub acc_df: f64,
    pub acc_dtest: f64,
    pub mia_efficacy: Option<f64>,
    /// Mean absolute difference to a reference over the four metrics, in
    /// percentage points.
    pub avg_gap: Option<f64>,
}

impl EvalReport {
    /// Fills `avg_gap` against `reference`; both need an MIA value.
    pub fn with_gap(mut self, reference: &EvalReport) -> Self {
        self.avg_gap = match (self.mia_efficacy, reference.mia_efficacy) {
            (Some(a), Some(b)) => {
                let diffs = [
                    self.acc_dr - reference.acc_dr,
                    self.acc_df - reference.acc_df,
                    self.acc_dtest - reference.acc_dtest,
                    a - b,
                ];
                Some(diffs.iter().map(|d| d.abs()).sum::<f64>() / 4.0 * 100.0)
            }
            _ => None,
        };
        self
    }
}

pub fn accuracy(params: &Params, data: Subset<'_>) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let correct = data
        .indices
        .iter()
        .filter(|&&i| params.predict(data.ds.sample(i)) == data.ds.labels[i])
        .count();
    correct as f64 / data.len() as f64
}

pub fn losses(params: &Params, data: Subset<'_>) -> Vec<f64> {
    data.indices
        .iter()
        .map(|&i| params.sample_loss(data.ds.sample(i), data.ds.labels[i]))
        .collect()
}

fn require_splits(ds: &Dataset) -> Result<()> {
    for (name, idx) in [("retain", &ds.retain_idx), ("forget", &ds.forget_idx), ("test", &ds.test)] {
        if idx.is_empty() {
            return Err(HarnessError::EmptySplit(name));
        }
    }
    Ok(())
}

/// Top-1 accuracy on the forget, retain and test partitions.
pub fn evaluate(model: &TensorMap, ds: &Dataset, cfg: &MlpConfig) -> Result<EvalReport> {
    require_splits(ds)?;
    let p = Params::from_map(cfg, model)?;
    Ok(evaluate_params(&p, ds))
}

pub(crate) fn evaluate_params(p: &Params, ds: &Dataset) -> EvalReport {
    EvalReport {
        acc_dr: accuracy(p, ds.retain_set()),
        acc_df: accuracy(p, ds.forget_set()),
        acc_dtest: accuracy(p, ds.test_set()),
        mia_efficacy: None,
        avg_gap: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiaResult {
    /// Fraction of forget samples predicted as non-members.
    pub efficacy: f64,
    /// Losses above this are predicted non-members.
    pub threshold: f64,
    pub balanced_accuracy: f64,
    /// Every loss was identical, so the attack carries no signal.
    pub degenerate: bool,
}

/// Fits the loss threshold that best separates members (`retain`) from
/// non-members (`test`) and applies it to `forget`.
///
/// Candidate thresholds are the observed member and non-member losses; a
/// sample is a member when its loss is at most the threshold. Ties in
/// balanced accuracy go to the smallest threshold.
pub fn mia_from_losses(retain: &[f64], test: &[f64], forget: &[f64]) -> Result<MiaResult> {
    if retain.is_empty() {
        return Err(HarnessError::EmptySplit("retain"));
    }
    if test.is_empty() {
        return Err(HarnessError::EmptySplit("test"));
    }
    let first = retain[0];
    if retain.iter().chain(test).chain(forget).all(|&l| l == first) {
        log::warn!("all membership losses are identical; efficacy reported as 0");
        return Ok(MiaResult {
            efficacy: 0.0,
            threshold: first,
            balanced_accuracy: 0.5,
            degenerate: true,
        });
    }
    let sorted = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        s
    };
    let (r, t) = (sorted(retain), sorted(test));
    let mut candidates: Vec<f64> = r.iter().chain(&t).copied().collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut best = (f64::NEG_INFINITY, candidates[0]);
    for &c in &candidates {
        let members_right = r.partition_point(|&l| l <= c) as f64 / r.len() as f64;
        let outsiders_right = (t.len() - t.partition_point(|&l| l <= c)) as f64 / t.len() as f64;
        let ba = 0.5 * (members_right + outsiders_right);
        if ba > best.0 {
            best = (ba, c);
        }
    }
    let (balanced_accuracy, threshold) = best;
    let efficacy = if forget.is_empty() {
        0.0
    } else {
        forget.iter().filter(|&&l| l > threshold).count() as f64 / forget.len() as f64
    };
    Ok(MiaResult {
        efficacy,
        threshold,
        balanced_accuracy,
        degenerate: false,
    })
}

pub fn mia_efficacy(model: &TensorMap, ds: &Dataset, cfg: &MlpConfig) -> Result<MiaResult> {
    let p = Params::from_map(cfg, model)?;
    mia_params(&p, ds)
}

pub(crate) fn mia_params(p: &Params, ds: &Dataset) -> Result<MiaResult> {
    mia_from_losses(
        &losses(p, ds.retain_set()),
        &losses(p, ds.test_set()),
        &losses(p, ds.forget_set()),
    )
}

/// Accuracies plus MIA efficacy.
pub fn evaluate_full(model: &TensorMap, ds: &Dataset, cfg: &MlpConfig) -> Result<(EvalReport, MiaResult)> {
    require_splits(ds)?;
    let p = Params::from_map(cfg, model)?;
    let mia = mia_params(&p, ds)?;
    Ok((
        EvalReport {
            mia_efficacy: Some(mia.efficacy),
            ..evaluate_params(&p, ds)
        },
        mia,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{gen_dataset, split_forget, DatasetConfig, ForgetMode};

    #[test]
    fn zero_forget_loss_is_all_members() {
        let m = mia_from_losses(&[0.1, 0.2, 0.3], &[1.0, 2.0], &[0.0, 0.0]).unwrap();
        assert_eq!(m.threshold, 0.3);
        assert_eq!(m.balanced_accuracy, 1.0);
        assert_eq!(m.efficacy, 0.0);
    }

    #[test]
    fn high_forget_loss_is_all_outsiders() {
        let m = mia_from_losses(&[0.1, 0.5], &[0.2, 0.9], &[1.5, 3.0, 2.0]).unwrap();
        assert_eq!(m.efficacy, 1.0);
        assert!(!m.degenerate);
    }

    #[test]
    fn identical_losses_are_flagged() {
        let m = mia_from_losses(&[0.7; 3], &[0.7; 2], &[0.7]).unwrap();
        assert!(m.degenerate);
        assert_eq!(m.efficacy, 0.0);
    }

    #[test]
    fn threshold_maximises_balanced_accuracy() {
        // members 0.1, 0.4, 0.6; outsiders 0.5, 0.8
        // t=0.4: (2/3 + 2/2)/2 = 0.833; t=0.6: (1 + 1/2)/2 = 0.75
        let m = mia_from_losses(&[0.6, 0.1, 0.4], &[0.8, 0.5], &[0.45, 0.3]).unwrap();
        assert_eq!(m.threshold, 0.4);
        assert!((m.balanced_accuracy - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(m.efficacy, 0.5);
    }

    #[test]
    fn empty_splits_rejected() {
        assert!(mia_from_losses(&[], &[1.0], &[1.0]).is_err());
        assert!(mia_from_losses(&[1.0], &[], &[1.0]).is_err());
    }

    #[test]
    fn avg_gap_is_mean_abs_difference_in_points() {
        let a = EvalReport {
            acc_dr: 0.9,
            acc_df: 0.8,
            acc_dtest: 0.85,
            mia_efficacy: Some(0.1),
            avg_gap: None,
        };
        let b = EvalReport {
            acc_dr: 1.0,
            acc_df: 0.6,
            acc_dtest: 0.85,
            mia_efficacy: Some(0.3),
            avg_gap: None,
        };
        let g = a.with_gap(&b).avg_gap.unwrap();
        assert!((g - 12.5).abs() < 1e-9);
        assert_eq!(a.with_gap(&a).avg_gap, Some(0.0));
        let no_mia = EvalReport { mia_efficacy: None, ..a };
        assert_eq!(no_mia.with_gap(&b).avg_gap, None);
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let cfg = DatasetConfig {
            n_classes: 10,
            dim: 16,
            samples_per_class: 200,
            separation: 4.0,
            noise: 1.0,
            center_radius: None,
        };
        let mlp = MlpConfig::new(16, vec![32], 10);
        let mut mean = [0.0; 3];
        let seeds = 10;
        for seed in 0..seeds {
            let ds = gen_dataset(&cfg, seed).unwrap();
            let ds = split_forget(&ds, ForgetMode::RandomFraction(0.1), seed).unwrap();
            let model = Params::init(&mlp, seed + 100).unwrap().to_map();
            let r = evaluate(&model, &ds, &mlp).unwrap();
            mean[0] += r.acc_dr / seeds as f64;
            mean[1] += r.acc_df / seeds as f64;
            mean[2] += r.acc_dtest / seeds as f64;
        }
        for m in mean {
            assert!((m - 0.1).abs() <= 0.05, "{mean:?}");
        }
    }

    #[test]
    fn empty_test_split_is_an_error() {
        let cfg = DatasetConfig {
            n_classes: 2,
            dim: 2,
            samples_per_class: 20,
            separation: 3.0,
            noise: 1.0,
            center_radius: None,
        };
        let mut ds = gen_dataset(&cfg, 0).unwrap();
        ds = split_forget(&ds, ForgetMode::RandomFraction(0.2), 0).unwrap();
        ds.test.clear();
        let mlp = MlpConfig::new(2, vec![4], 2);
        let model = Params::init(&mlp, 0).unwrap().to_map();
        assert!(matches!(evaluate(&model, &ds, &mlp), Err(HarnessError::EmptySplit("test"))));
    }
}
