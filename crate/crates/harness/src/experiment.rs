//! End-to-end unlearning comparison on synthetic data.
//!
//! Per seed: generate data, train the original model on the full training
//! split, train a reference on the retain split only, fine-tune a pool on the
//! forget split, turn the pool into task vectors, and for each method merge,
//! sweep λ under the retain floor and evaluate the selected model.

use std::fmt;
use std::str::FromStr;

use negmerge_core::analysis::{default_grid, sweep_lambda, validate_grid, LambdaSweep, DEFAULT_RETAIN_FLOOR};
use negmerge_core::merging::{
    greedy_soup, merge, GreedyOrder, MergeSpec, Method, Reduce, DEFAULT_TIES_TRIM_FRACTION,
};
use negmerge_core::task_vector::{apply, diff, NegationConfig, TaskVector};
use negmerge_core::TensorMap;
use serde::{Deserialize, Serialize};

use crate::dataset::{gen_dataset, split_forget, Dataset, DatasetConfig, ForgetMode};
use crate::error::{HarnessError, Result};
use crate::metrics::{accuracy, evaluate_params, losses, mia_params, EvalReport, MiaResult};
use crate::mlp::{train, MlpConfig, Params, TrainHyper};
use crate::pool::{finetune_pool, FinetuneGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodId {
    NegmergeAvg,
    NegmergeMin,
    NegmergeMax,
    Conflict,
    Uniform,
    Ties,
    Magmax,
    /// The best single pool member.
    TaskArithmetic,
    Greedy,
}

impl MethodId {
    pub const ALL: [MethodId; 9] = [
        MethodId::NegmergeAvg,
        MethodId::NegmergeMin,
        MethodId::NegmergeMax,
        MethodId::Conflict,
        MethodId::Uniform,
        MethodId::Ties,
        MethodId::Magmax,
        MethodId::TaskArithmetic,
        MethodId::Greedy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodId::NegmergeAvg => "negmerge_avg",
            MethodId::NegmergeMin => "negmerge_min",
            MethodId::NegmergeMax => "negmerge_max",
            MethodId::Conflict => "conflict",
            MethodId::Uniform => "uniform",
            MethodId::Ties => "ties",
            MethodId::Magmax => "magmax",
            MethodId::TaskArithmetic => "task_arithmetic",
            MethodId::Greedy => "greedy",
        }
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodId {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        MethodId::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| HarnessError::InvalidConfig(format!("unknown method `{s}`")))
    }
}

/// Training settings shared by the original model and the retrain reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub lr: f64,
    pub epochs: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub label_smoothing: f64,
    #[serde(default)]
    pub jitter: f64,
    pub batch: usize,
}

impl TrainSchedule {
    fn hyper(&self, seed: u64) -> TrainHyper {
        TrainHyper {
            lr: self.lr,
            epochs: self.epochs,
            weight_decay: self.weight_decay,
            label_smoothing: self.label_smoothing,
            jitter: self.jitter,
            batch: self.batch,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default = "default_forget")]
    pub forget: ForgetMode,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    pub train: TrainSchedule,
    pub finetune: FinetuneGrid,
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodId>,
    #[serde(default = "default_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default = "default_floor")]
    pub retain_floor: f64,
    #[serde(default = "default_ties_k")]
    pub ties_trim_fraction: f64,
    #[serde(default)]
    pub greedy_order: GreedyOrder,
    pub seeds: Vec<u64>,
}

fn default_forget() -> ForgetMode {
    ForgetMode::RandomFraction(0.1)
}

fn default_hidden() -> Vec<usize> {
    vec![32]
}

fn default_methods() -> Vec<MethodId> {
    MethodId::ALL.to_vec()
}

fn default_floor() -> f64 {
    DEFAULT_RETAIN_FLOOR
}

fn default_ties_k() -> f64 {
    DEFAULT_TIES_TRIM_FRACTION
}

impl ExperimentConfig {
    pub fn mlp(&self) -> MlpConfig {
        MlpConfig::new(self.dataset.dim, self.hidden.clone(), self.dataset.n_classes)
    }

    pub fn validate(&self) -> Result<()> {
        self.mlp().validate()?;
        self.train.hyper(0).validate()?;
        self.finetune.configs()?;
        if self.methods.is_empty() {
            return Err(HarnessError::InvalidConfig("no methods requested".into()));
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return Err(HarnessError::InvalidConfig("methods listed more than once".into()));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::InvalidConfig("no experiment seeds".into()));
        }
        validate_grid(&self.lambda_grid)?;
        if !(self.retain_floor.is_finite() && self.retain_floor >= 0.0) {
            return Err(HarnessError::InvalidConfig("retain floor must be non-negative".into()));
        }
        MergeSpec::ties(self.ties_trim_fraction).validate()?;
        Ok(())
    }

    /// The reference protocol used by the trend checks: 10 classes in 16
    /// dimensions, 200 samples per class, 10% random forgetting, a pool of 10,
    /// a 0.95 retain floor and seeds 0 to 9. The remaining settings (cluster
    /// separation, width, schedules, λ grid) are tuned so the original model
    /// memorizes its training data and the floor binds.
    pub fn standard() -> Self {
        Self {
            dataset: DatasetConfig {
                n_classes: 10,
                dim: 16,
                samples_per_class: 200,
                separation: 3.0,
                noise: 1.0,
                center_radius: None,
            },
            forget: default_forget(),
            hidden: vec![64],
            train: TrainSchedule {
                lr: 0.05,
                epochs: 100,
                weight_decay: 0.0,
                label_smoothing: 0.0,
                jitter: 0.0,
                batch: 32,
            },
            finetune: FinetuneGrid {
                learning_rates: vec![0.02, 0.05],
                epochs: vec![10, 20],
                weight_decays: vec![0.0, 0.01],
                label_smoothings: vec![0.0, 0.1],
                jitters: vec![0.0, 0.1],
                seeds: vec![0],
                batch: 16,
                pool_size: 10,
                allow_any_size: false,
            },
            methods: default_methods(),
            // wide enough that the retain floor, not the grid, bounds λ
            lambda_grid: (1..=80).map(|i| i as f64 / 4.0).collect(),
            retain_floor: DEFAULT_RETAIN_FLOOR,
            ties_trim_fraction: DEFAULT_TIES_TRIM_FRACTION,
            greedy_order: GreedyOrder::default(),
            seeds: (0..10).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: MethodId,
    pub sweep: LambdaSweep,
    pub report: EvalReport,
    pub mia: MiaResult,
    /// Fraction of exactly-zero elements in the merged task vector.
    pub zero_fraction: f64,
    /// Pool member used by single-vector task arithmetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub member: Option<usize>,
    /// Pool members accepted by the greedy soup.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accepted: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub original: EvalReport,
    pub original_mia: MiaResult,
    pub retrain: EvalReport,
    pub retrain_mia: MiaResult,
    pub methods: Vec<MethodResult>,
}

impl SeedReport {
    pub fn method(&self, id: MethodId) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.method == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedReport>,
}

/// One line of the comparison table: seed-averaged metrics in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub acc_dr: f64,
    pub acc_df: f64,
    pub acc_dtest: f64,
    pub mia: f64,
    pub avg_gap: f64,
}

impl ExperimentReport {
    /// Retrain first, then each method in configuration order.
    pub fn table(&self) -> Vec<TableRow> {
        let n = self.seeds.len() as f64;
        let row = |name: &str, pick: &dyn Fn(&SeedReport) -> EvalReport| {
            let mut r = TableRow {
                method: name.to_string(),
                acc_dr: 0.0,
                acc_df: 0.0,
                acc_dtest: 0.0,
                mia: 0.0,
                avg_gap: 0.0,
            };
            for s in &self.seeds {
                let e = pick(s);
                r.acc_dr += e.acc_dr * 100.0;
                r.acc_df += e.acc_df * 100.0;
                r.acc_dtest += e.acc_dtest * 100.0;
                r.mia += e.mia_efficacy.unwrap_or(0.0) * 100.0;
                r.avg_gap += e.avg_gap.unwrap_or(0.0);
            }
            for v in [&mut r.acc_dr, &mut r.acc_df, &mut r.acc_dtest, &mut r.mia, &mut r.avg_gap] {
                *v /= n;
            }
            r
        };
        let mut rows = vec![row("retrain", &|s| s.retrain)];
        for &m in &self.config.methods {
            rows.push(row(m.as_str(), &|s| s.method(m).expect("every seed runs every method").report));
        }
        rows
    }
}

/// Mixes an experiment seed with a purpose tag into an independent seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_DATA: u64 = 1;
const TAG_SPLIT: u64 = 2;
const TAG_TRAIN: u64 = 3;
const TAG_POOL: u64 = 4;

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_experiment_threads(cfg, 1)
}

/// Runs seeds on up to `threads` worker threads. Results do not depend on the
/// thread count.
pub fn run_experiment_threads(cfg: &ExperimentConfig, threads: usize) -> Result<ExperimentReport> {
    cfg.validate()?;
    let threads = threads.clamp(1, cfg.seeds.len());
    let seeds = if threads == 1 {
        cfg.seeds.iter().map(|&s| run_seed(cfg, s)).collect::<Result<Vec<_>>>()?
    } else {
        let chunk = cfg.seeds.len().div_ceil(threads);
        let results: Vec<Result<Vec<SeedReport>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = cfg
                .seeds
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|&s| run_seed(cfg, s)).collect()))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("experiment worker panicked"))
                .collect()
        });
        let mut all = Vec::with_capacity(cfg.seeds.len());
        for r in results {
            all.extend(r?);
        }
        all
    };
    Ok(ExperimentReport {
        config: cfg.clone(),
        seeds,
    })
}

fn staged<T>(stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(stage))
}

/// Data, original model, retrain reference and fine-tune pool of one seed.
pub struct SeedArtifacts {
    pub data: Dataset,
    pub original: TensorMap,
    pub retrain: TensorMap,
    pub pool: Vec<TensorMap>,
    pub taus: Vec<TaskVector>,
}

pub fn prepare_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedArtifacts> {
    let mlp = cfg.mlp();
    let data = staged("dataset", {
        gen_dataset(&cfg.dataset, derive_seed(seed, TAG_DATA))
            .and_then(|d| split_forget(&d, cfg.forget, derive_seed(seed, TAG_SPLIT)))
    })?;
    let hyper = cfg.train.hyper(derive_seed(seed, TAG_TRAIN));
    let original = staged("train_original", train(&mlp, data.train_set(), &hyper))?;
    // same initialization and schedule, retain samples only
    let retrain = staged("train_retrain", train(&mlp, data.retain_set(), &hyper))?;
    let grid = FinetuneGrid {
        seeds: cfg
            .finetune
            .seeds
            .iter()
            .map(|&s| derive_seed(derive_seed(seed, TAG_POOL), s))
            .collect(),
        ..cfg.finetune.clone()
    };
    let pool = staged("finetune_pool", finetune_pool(&original, data.forget_set(), &grid, &mlp))?;
    let taus = staged(
        "task_vectors",
        pool.iter()
            .enumerate()
            .map(|(i, m)| Ok(diff(m, &original)?.with_origin(format!("member{i}"))))
            .collect(),
    )?;
    Ok(SeedArtifacts {
        data,
        original,
        retrain,
        pool,
        taus,
    })
}

pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedReport> {
    let mlp = cfg.mlp();
    let art = prepare_seed(cfg, seed)?;
    let data = &art.data;
    let eval_model = |model: &TensorMap| -> Result<(EvalReport, MiaResult)> {
        let p = Params::from_map(&mlp, model)?;
        let mia = mia_params(&p, data)?;
        Ok((
            EvalReport {
                mia_efficacy: Some(mia.efficacy),
                ..evaluate_params(&p, data)
            },
            mia,
        ))
    };
    let (retrain, retrain_mia) = staged("evaluate_retrain", eval_model(&art.retrain))?;
    let retrain = retrain.with_gap(&retrain);
    let (original, original_mia) = staged("evaluate_original", eval_model(&art.original))?;
    let original = original.with_gap(&retrain);

    let mut methods = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let stage = format!("method:{method}");
        let result = staged(&stage, run_method(cfg, &mlp, &art, method)).and_then(|(tau, sweep, extra)| {
            let edited = staged(&stage, apply_selected(&art.original, &tau, &sweep))?;
            let (report, mia) = staged(&stage, eval_model(&edited))?;
            Ok(MethodResult {
                method,
                zero_fraction: zero_fraction(&tau),
                sweep,
                report: report.with_gap(&retrain),
                mia,
                member: extra.member,
                accepted: extra.accepted,
            })
        })?;
        methods.push(result);
    }
    Ok(SeedReport {
        seed,
        original,
        original_mia,
        retrain,
        retrain_mia,
        methods,
    })
}

#[derive(Default)]
struct Extra {
    member: Option<usize>,
    accepted: Option<Vec<usize>>,
}

fn zero_fraction(tau: &TaskVector) -> f64 {
    let n = tau.num_elements();
    if n == 0 {
        return 0.0;
    }
    (n - tau.nnz()) as f64 / n as f64
}

fn apply_selected(base: &TensorMap, tau: &TaskVector, sweep: &LambdaSweep) -> Result<TensorMap> {
    Ok(apply(base, tau, &NegationConfig::negate(sweep.selected_lambda))?)
}

/// Sweeps λ with retain accuracy as the retain metric and forget accuracy
/// as the forget metric.
pub fn sweep_for(
    cfg: &ExperimentConfig,
    mlp: &MlpConfig,
    data: &Dataset,
    base: &TensorMap,
    tau: &TaskVector,
) -> Result<LambdaSweep> {
    let eval = |m: &TensorMap| {
        let p = Params::from_map(mlp, m).expect("schema matches the base model");
        (accuracy(&p, data.retain_set()), accuracy(&p, data.forget_set()))
    };
    Ok(sweep_lambda(base, tau, &cfg.lambda_grid, cfg.retain_floor, eval)?)
}

fn run_method(
    cfg: &ExperimentConfig,
    mlp: &MlpConfig,
    art: &SeedArtifacts,
    method: MethodId,
) -> Result<(TaskVector, LambdaSweep, Extra)> {
    let spec = |m: Method, reduce: Reduce| MergeSpec {
        ties_trim_fraction: cfg.ties_trim_fraction,
        reduce,
        ..MergeSpec::new(m)
    };
    let tau = match method {
        MethodId::NegmergeAvg => merge(&art.taus, &spec(Method::NegMerge, Reduce::Avg))?,
        MethodId::NegmergeMin => merge(&art.taus, &spec(Method::NegMerge, Reduce::MinMag))?,
        MethodId::NegmergeMax => merge(&art.taus, &spec(Method::NegMerge, Reduce::MaxMag))?,
        MethodId::Conflict => merge(&art.taus, &spec(Method::Conflict, Reduce::Avg))?,
        MethodId::Uniform => merge(&art.taus, &spec(Method::Uniform, Reduce::Avg))?,
        MethodId::Ties => merge(&art.taus, &spec(Method::Ties, Reduce::Avg))?,
        MethodId::Magmax => merge(&art.taus, &spec(Method::MagMax, Reduce::Avg))?,
        MethodId::TaskArithmetic => {
            let mut best: Option<(usize, LambdaSweep)> = None;
            for (i, tau) in art.taus.iter().enumerate() {
                let sweep = sweep_for(cfg, mlp, &art.data, &art.original, tau)?;
                let better = match &best {
                    None => true,
                    Some((_, b)) => sweep.selected().forget < b.selected().forget,
                };
                if better {
                    best = Some((i, sweep));
                }
            }
            let (i, sweep) = best.expect("pool is non-empty");
            let extra = Extra {
                member: Some(i),
                ..Extra::default()
            };
            return Ok((art.taus[i].clone(), sweep, extra));
        }
        MethodId::Greedy => {
            let retain_loss = |m: &TensorMap| {
                let p = Params::from_map(mlp, m).expect("schema matches the base model");
                let l = losses(&p, art.data.retain_set());
                l.iter().sum::<f64>() / l.len() as f64
            };
            let soup = greedy_soup(&art.pool, &art.original, cfg.greedy_order, retain_loss)?;
            let sweep = sweep_for(cfg, mlp, &art.data, &art.original, &soup.tau)?;
            let extra = Extra {
                accepted: Some(soup.accepted),
                ..Extra::default()
            };
            return Ok((soup.tau, sweep, extra));
        }
    };
    let sweep = sweep_for(cfg, mlp, &art.data, &art.original, &tau)?;
    Ok((tau, sweep, Extra::default()))
}
