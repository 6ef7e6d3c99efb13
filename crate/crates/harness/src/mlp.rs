//! Small ReLU classifier trained with minibatch SGD on cross-entropy.
//!
//! Parameters travel as a [`TensorMap`] of F32 tensors named
//! `layers.<k>.weight` (`[out, in]`) and `layers.<k>.bias` (`[out]`); all
//! arithmetic happens in f64 on an unpacked [`Params`].

use negmerge_core::tensor::TensorSpec;
use negmerge_core::{DType, Schema, Tensor, TensorMap};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::Subset;
use crate::error::{HarnessError, Result};

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    pub n_classes: usize,
}

fn default_hidden() -> Vec<usize> {
    vec![32]
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden: Vec<usize>, n_classes: usize) -> Self {
        Self {
            input_dim,
            hidden,
            n_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(HarnessError::InvalidConfig("at least one hidden layer is required".into()));
        }
        if self.input_dim == 0 || self.n_classes == 0 || self.hidden.contains(&0) {
            return Err(HarnessError::InvalidConfig("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend(&self.hidden);
        w.push(self.n_classes);
        w
    }

    pub fn n_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn schema(&self) -> Schema {
        let widths = self.widths();
        let mut s = Schema::new();
        for k in 0..self.n_layers() {
            let (fan_in, fan_out) = (widths[k], widths[k + 1]);
            s.insert(weight_name(k), TensorSpec { dtype: DType::F32, shape: vec![fan_out, fan_in] });
            s.insert(bias_name(k), TensorSpec { dtype: DType::F32, shape: vec![fan_out] });
        }
        s
    }
}

pub fn weight_name(k: usize) -> String {
    format!("layers.{k}.weight")
}

pub fn bias_name(k: usize) -> String {
    format!("layers.{k}.bias")
}

/// Optimisation settings for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHyper {
    pub lr: f64,
    pub epochs: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub label_smoothing: f64,
    /// Std of Gaussian noise added to each input every time it is visited.
    #[serde(default)]
    pub jitter: f64,
    pub batch: usize,
    pub seed: u64,
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::InvalidConfig(m.into()));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.batch == 0 {
            return bad("batch size must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label smoothing must be in [0, 1)");
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return bad("jitter must be non-negative");
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        format!(
            "lr={} epochs={} wd={} ls={} jitter={} batch={} seed={}",
            self.lr, self.epochs, self.weight_decay, self.label_smoothing, self.jitter, self.batch, self.seed
        )
    }
}

/// One dense layer, weights row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub fan_in: usize,
    pub fan_out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            fan_in,
            fan_out,
            w: vec![0.0; fan_in * fan_out],
            b: vec![0.0; fan_out],
        }
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.fan_out {
            let row = &self.w[o * self.fan_in..(o + 1) * self.fan_in];
            let mut acc = self.b[o];
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            out.push(acc);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub layers: Vec<Dense>,
}

impl Params {
    pub fn zeros_like(cfg: &MlpConfig) -> Self {
        let widths = cfg.widths();
        Self {
            layers: widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        }
    }

    /// He-normal weights, zero biases.
    pub fn init(cfg: &MlpConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let mut p = Self::zeros_like(cfg);
        for layer in &mut p.layers {
            let std = (2.0 / layer.fan_in as f64).sqrt();
            for w in &mut layer.w {
                let z: f64 = rng.sample(StandardNormal);
                *w = std * z;
            }
        }
        Ok(p)
    }

    pub fn from_map(cfg: &MlpConfig, map: &TensorMap) -> Result<Self> {
        cfg.validate()?;
        cfg.schema().check_compatible(&map.schema())?;
        let mut p = Self::zeros_like(cfg);
        for (k, layer) in p.layers.iter_mut().enumerate() {
            layer.w = map.get(&weight_name(k)).expect("schema checked").to_f64_vec();
            layer.b = map.get(&bias_name(k)).expect("schema checked").to_f64_vec();
        }
        Ok(p)
    }

    /// Rounds to F32 tensors.
    pub fn to_map(&self) -> TensorMap {
        let mut map = TensorMap::new();
        for (k, layer) in self.layers.iter().enumerate() {
            let w = layer.w.iter().map(|&v| v as f32).collect();
            let b = layer.b.iter().map(|&v| v as f32).collect();
            map.insert(weight_name(k), Tensor::from_f32(vec![layer.fan_out, layer.fan_in], w).expect("finite weights"))
                .expect("fresh name");
            map.insert(bias_name(k), Tensor::from_f32(vec![layer.fan_out], b).expect("finite biases"))
                .expect("fresh name");
        }
        map
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Every parameter in layer order, weights before biases.
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().chain(&l.b).copied())
            .collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        let mut it = values.iter().copied();
        for l in &mut self.layers {
            for v in l.w.iter_mut().chain(l.b.iter_mut()) {
                *v = it.next().expect("length matches");
            }
        }
    }

    fn axpy(&mut self, a: f64, g: &Params) {
        for (l, gl) in self.layers.iter_mut().zip(&g.layers) {
            for (w, gw) in l.w.iter_mut().zip(&gl.w) {
                *w += a * gw;
            }
            for (b, gb) in l.b.iter_mut().zip(&gl.b) {
                *b += a * gb;
            }
        }
    }

    // finite after rounding to the F32 storage type
    fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(&l.b).all(|&v| (v as f32).is_finite()))
    }

    /// Logits for one input.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let mut z = Vec::new();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            layer.forward(&h, &mut z);
            if k < last {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut h, &mut z);
        }
        h
    }

    /// Pre-activations of every hidden layer for one input.
    pub fn hidden_preactivations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut h = x.to_vec();
        let mut out = Vec::new();
        for layer in &self.layers[..self.layers.len() - 1] {
            let mut z = Vec::new();
            layer.forward(&h, &mut z);
            h = z.iter().map(|v| v.max(0.0)).collect();
            out.push(z);
        }
        out
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    /// Unsmoothed cross-entropy of one sample.
    pub fn sample_loss(&self, x: &[f64], label: usize) -> f64 {
        let logits = self.logits(x);
        log_sum_exp(&logits) - logits[label]
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Mean smoothed cross-entropy over a batch plus `wd/2 · ‖W‖²` on weight
/// matrices, with its gradient.
pub fn loss_and_grad(
    params: &Params,
    inputs: &[&[f64]],
    labels: &[usize],
    label_smoothing: f64,
    weight_decay: f64,
) -> (f64, Params) {
    let n_layers = params.layers.len();
    let mut grad = Params {
        layers: params
            .layers
            .iter()
            .map(|l| Dense::zeros(l.fan_in, l.fan_out))
            .collect(),
    };
    let scale = 1.0 / inputs.len() as f64;
    let mut loss = 0.0;
    // activations[k] is the input to layer k
    let mut activations: Vec<Vec<f64>> = vec![Vec::new(); n_layers + 1];
    let mut pre: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
    for (x, &label) in inputs.iter().zip(labels) {
        activations[0].clear();
        activations[0].extend_from_slice(x);
        for k in 0..n_layers {
            let (head, tail) = activations.split_at_mut(k + 1);
            params.layers[k].forward(&head[k], &mut pre[k]);
            tail[0].clear();
            if k + 1 < n_layers {
                tail[0].extend(pre[k].iter().map(|v| v.max(0.0)));
            } else {
                tail[0].extend_from_slice(&pre[k]);
            }
        }
        let logits = &activations[n_layers];
        let k_classes = logits.len() as f64;
        let lse = log_sum_exp(logits);
        let off = label_smoothing / k_classes;
        let mut delta: Vec<f64> = Vec::with_capacity(logits.len());
        for (c, &z) in logits.iter().enumerate() {
            let target = if c == label { 1.0 - label_smoothing + off } else { off };
            loss += target * (lse - z) * scale;
            delta.push(((z - lse).exp() - target) * scale);
        }
        for k in (0..n_layers).rev() {
            let layer = &params.layers[k];
            let g = &mut grad.layers[k];
            let input = &activations[k];
            for o in 0..layer.fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                g.b[o] += d;
                let row = &mut g.w[o * layer.fan_in..(o + 1) * layer.fan_in];
                for (gw, a) in row.iter_mut().zip(input) {
                    *gw += d * a;
                }
            }
            if k == 0 {
                break;
            }
            let mut back = vec![0.0; layer.fan_in];
            for o in 0..layer.fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &layer.w[o * layer.fan_in..(o + 1) * layer.fan_in];
                for (b, w) in back.iter_mut().zip(row) {
                    *b += d * w;
                }
            }
            for (b, z) in back.iter_mut().zip(&pre[k - 1]) {
                if *z <= 0.0 {
                    *b = 0.0;
                }
            }
            delta = back;
        }
    }
    if weight_decay > 0.0 {
        for (l, g) in params.layers.iter().zip(&mut grad.layers) {
            for (w, gw) in l.w.iter().zip(&mut g.w) {
                loss += 0.5 * weight_decay * w * w;
                *gw += weight_decay * w;
            }
        }
    }
    (loss, grad)
}

/// Trains from the seeded initialization.
pub fn train(cfg: &MlpConfig, data: Subset<'_>, hyper: &TrainHyper) -> Result<TensorMap> {
    let init = Params::init(cfg, hyper.seed)?;
    train_params(cfg, init, data, hyper).map(|p| p.to_map())
}

/// Continues training from existing weights.
pub fn train_from(
    cfg: &MlpConfig,
    init: &TensorMap,
    data: Subset<'_>,
    hyper: &TrainHyper,
) -> Result<TensorMap> {
    if hyper.epochs == 0 {
        hyper.validate()?;
        Params::from_map(cfg, init)?;
        return Ok(init.clone());
    }
    let p = Params::from_map(cfg, init)?;
    train_params(cfg, p, data, hyper).map(|p| p.to_map())
}

fn train_params(cfg: &MlpConfig, mut params: Params, data: Subset<'_>, hyper: &TrainHyper) -> Result<Params> {
    hyper.validate()?;
    if data.ds.dim != cfg.input_dim {
        return Err(HarnessError::InvalidConfig(format!(
            "data dimension {} differs from model input {}",
            data.ds.dim, cfg.input_dim
        )));
    }
    if hyper.epochs > 0 && data.is_empty() {
        return Err(HarnessError::EmptySplit("training"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = data.indices.to_vec();
    let mut jittered: Vec<Vec<f64>> = Vec::new();
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch) {
            let labels: Vec<usize> = chunk.iter().map(|&i| data.ds.labels[i]).collect();
            let (loss, grad) = if hyper.jitter > 0.0 {
                jittered.clear();
                for &i in chunk {
                    jittered.push(
                        data.ds
                            .sample(i)
                            .iter()
                            .map(|v| v + hyper.jitter * rng.sample::<f64, _>(StandardNormal))
                            .collect(),
                    );
                }
                let inputs: Vec<&[f64]> = jittered.iter().map(Vec::as_slice).collect();
                loss_and_grad(&params, &inputs, &labels, hyper.label_smoothing, hyper.weight_decay)
            } else {
                let inputs: Vec<&[f64]> = chunk.iter().map(|&i| data.ds.sample(i)).collect();
                loss_and_grad(&params, &inputs, &labels, hyper.label_smoothing, hyper.weight_decay)
            };
            params.axpy(-hyper.lr, &grad);
            if !loss.is_finite() || !params.is_finite() {
                return Err(HarnessError::TrainingDiverged {
                    epoch,
                    config: hyper.describe(),
                });
            }
        }
    }
    Ok(params)
}

/// Central-difference check of [`loss_and_grad`]; returns the worst relative
/// error over all parameters.
pub fn gradient_check(
    params: &Params,
    inputs: &[&[f64]],
    labels: &[usize],
    label_smoothing: f64,
    weight_decay: f64,
    step: f64,
) -> f64 {
    let (_, grad) = loss_and_grad(params, inputs, labels, label_smoothing, weight_decay);
    let analytic = grad.flat();
    let base = params.flat();
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut shifted = base.clone();
        shifted[i] = base[i] + step;
        probe.set_flat(&shifted);
        let up = loss_and_grad(&probe, inputs, labels, label_smoothing, weight_decay).0;
        shifted[i] = base[i] - step;
        probe.set_flat(&shifted);
        let down = loss_and_grad(&probe, inputs, labels, label_smoothing, weight_decay).0;
        let numeric = (up - down) / (2.0 * step);
        let denom = a.abs().max(numeric.abs());
        if denom > 0.0 {
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{gen_dataset, DatasetConfig};

    fn hyper(epochs: usize) -> TrainHyper {
        TrainHyper {
            lr: 0.1,
            epochs,
            weight_decay: 0.0,
            label_smoothing: 0.0,
            jitter: 0.0,
            batch: 16,
            seed: 4,
        }
    }

    fn two_class() -> crate::dataset::Dataset {
        let cfg = DatasetConfig {
            n_classes: 2,
            dim: 2,
            samples_per_class: 200,
            separation: 6.0,
            noise: 1.0,
            center_radius: None,
        };
        gen_dataset(&cfg, 1).unwrap()
    }

    #[test]
    fn schema_names_and_shapes() {
        let cfg = MlpConfig::new(3, vec![5], 2);
        let s = cfg.schema();
        assert_eq!(s.names().collect::<Vec<_>>(), ["layers.0.bias", "layers.0.weight", "layers.1.bias", "layers.1.weight"]);
        assert_eq!(s.get("layers.0.weight").unwrap().shape, vec![5, 3]);
        assert!(MlpConfig::new(3, vec![], 2).validate().is_err());
        assert!(MlpConfig::new(3, vec![0], 2).validate().is_err());
    }

    #[test]
    fn zero_epochs_returns_init() {
        let ds = two_class();
        let cfg = MlpConfig::new(2, vec![8], 2);
        let m = train(&cfg, ds.train_set(), &hyper(0)).unwrap();
        assert!(m.bit_eq(&Params::init(&cfg, 4).unwrap().to_map()));
        let again = train_from(&cfg, &m, ds.train_set(), &hyper(0)).unwrap();
        assert!(again.bit_eq(&m));
    }

    #[test]
    fn deterministic_training() {
        let ds = two_class();
        let cfg = MlpConfig::new(2, vec![8], 2);
        let a = train(&cfg, ds.train_set(), &hyper(3)).unwrap();
        let b = train(&cfg, ds.train_set(), &hyper(3)).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn separable_data_is_learned() {
        let ds = two_class();
        let cfg = MlpConfig::new(2, vec![8], 2);
        let m = train(&cfg, ds.train_set(), &hyper(20)).unwrap();
        let p = Params::from_map(&cfg, &m).unwrap();
        let acc = |idx: &[usize]| {
            idx.iter().filter(|&&i| p.predict(ds.sample(i)) == ds.labels[i]).count() as f64 / idx.len() as f64
        };
        assert!(acc(&ds.train) >= 0.99);
        assert!(acc(&ds.test) >= 0.99);
    }

    #[test]
    fn divergence_is_reported() {
        let ds = two_class();
        let cfg = MlpConfig::new(2, vec![8], 2);
        let h = TrainHyper { lr: 1e300, ..hyper(5) };
        assert!(matches!(
            train(&cfg, ds.train_set(), &h),
            Err(HarnessError::TrainingDiverged { .. })
        ));
    }

    #[test]
    fn map_round_trip_through_f32() {
        let cfg = MlpConfig::new(4, vec![6, 5], 3);
        let m = Params::init(&cfg, 9).unwrap().to_map();
        let p = Params::from_map(&cfg, &m).unwrap();
        assert!(p.to_map().bit_eq(&m));
        assert_eq!(p.n_params(), 4 * 6 + 6 + 6 * 5 + 5 + 5 * 3 + 3);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let ds = two_class();
        let cfg = MlpConfig::new(2, vec![4], 2);
        let p = Params::init(&cfg, 2).unwrap();
        let inputs: Vec<&[f64]> = ds.train[..3].iter().map(|&i| ds.sample(i)).collect();
        let labels: Vec<usize> = ds.train[..3].iter().map(|&i| ds.labels[i]).collect();
        assert!(gradient_check(&p, &inputs, &labels, 0.1, 0.01, 1e-4) <= 1e-5);
    }
}
