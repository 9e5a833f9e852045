//! Training regimes, hyper-parameter optimization, ablations and evaluation.
//!
//! Regimes:
//! - `ff_supervised`: encoders and head by cross-entropy on a single
//!   feed-forward pass.
//! - `fb_unsupervised`: decoders by the summed reconstruction error of each
//!   PCoder's prediction of the feed-forward state below; forward path frozen.
//! - `fb_supervised`: all weights by cross-entropy averaged over steps
//!   `1..=T` of the unrolled dynamics with pinned coefficients.
//! - `hp_only`: only the auxiliary hyper-parameters, all weights frozen, on
//!   (optionally) corrupted images, with independent restarts.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corruption::{self, CorruptionError, NoiseKind, NoiseSpec};
use crate::data::{DataError, Dataset};
use crate::hyperparams::{
    aux_from_constrained, init_uniform, HpBinding, HpMask, HpMode, HpVars, HyperParamError, HyperParams, TrainableHp,
    SUM_TOLERANCE,
};
use crate::network::{BaselineNet, BoundNet, Classifier, NetworkError, PcNet};
use crate::tensor::{Adam, Gradients, Real, Sgd, Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Corruption(#[from] CorruptionError),
    #[error(transparent)]
    HyperParams(#[from] HyperParamError),
    #[error("non-finite value at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite { epoch: usize, batch: usize, detail: String },
    #[error("configuration for regime {expected:?} passed to {found:?} training")]
    RegimeMismatch { expected: Regime, found: Regime },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("all network weights must be frozen before hyper-parameter training")]
    NotFrozen,
    #[error("frozen parameters changed during {0:?} training")]
    FrozenModified(Regime),
    #[error("constraint violated after step {step} of restart {restart}: {source}")]
    Constraint { restart: usize, step: usize, source: HyperParamError },
    #[error("empty dataset")]
    EmptyData,
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    FfSupervised,
    FbUnsupervised,
    FbSupervised,
    HpOnly,
}

impl Regime {
    pub fn label(self) -> &'static str {
        match self {
            Self::FfSupervised => "ff_supervised",
            Self::FbUnsupervised => "fb_unsupervised",
            Self::FbSupervised => "fb_supervised",
            Self::HpOnly => "hp_only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Learning rate of the alpha group in hyper-parameter training; `lr`
    /// when absent.
    #[serde(default)]
    pub alpha_lr: Option<f64>,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, weight_decay: 0.0, alpha_lr: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Unroll length for `fb_supervised` and `hp_only`.
    #[serde(default)]
    pub timesteps: usize,
    #[serde(default = "NoiseSpec::clean")]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub mask: HpMask,
    #[serde(default)]
    pub hp_mode: HpMode,
    #[serde(default = "one")]
    pub restarts: usize,
    /// Starting point for every restart instead of a random draw.
    #[serde(default)]
    pub hp_init: Option<HyperParams>,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl TrainConfig {
    pub fn ff_supervised(epochs: usize) -> Self {
        Self::base(Regime::FfSupervised, epochs, 128, OptimizerConfig::sgd(0.01, 0.9), 0)
    }

    pub fn fb_unsupervised(epochs: usize) -> Self {
        Self::base(Regime::FbUnsupervised, epochs, 128, OptimizerConfig::sgd(0.01, 0.9), 0)
    }

    pub fn fb_supervised(epochs: usize) -> Self {
        Self::base(Regime::FbSupervised, epochs, 128, OptimizerConfig::sgd(0.005, 0.9), 10)
    }

    /// Adam, learning rate 1e-3, weight decay 5e-4, batch 128, T = 10,
    /// 10 restarts.
    pub fn hp_only(epochs: usize, noise: NoiseSpec, mask: HpMask) -> Self {
        let opt = OptimizerConfig { lr: 1e-3, momentum: 0.0, weight_decay: 5e-4, alpha_lr: None };
        Self { noise, mask, restarts: 10, ..Self::base(Regime::HpOnly, epochs, 128, opt, 10) }
    }

    fn base(regime: Regime, epochs: usize, batch_size: usize, optimizer: OptimizerConfig, timesteps: usize) -> Self {
        Self {
            regime,
            epochs,
            batch_size,
            optimizer,
            timesteps,
            noise: NoiseSpec::clean(),
            mask: HpMask::NONE,
            hp_mode: HpMode::Shared,
            restarts: 1,
            hp_init: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.optimizer.lr > 0.0) || self.optimizer.alpha_lr.is_some_and(|a| !(a > 0.0)) {
            return bad("learning rates must be positive");
        }
        if matches!(self.regime, Regime::FbSupervised | Regime::HpOnly) && self.timesteps == 0 {
            return bad("timesteps must be at least 1 for unrolled regimes");
        }
        if self.regime == Regime::HpOnly && self.restarts == 0 {
            return bad("restarts must be at least 1");
        }
        self.noise.validate()?;
        if let Some(h) = &self.hp_init {
            h.validate()?;
        }
        Ok(())
    }

    fn expect(&self, regime: Regime) -> Result<()> {
        if self.regime != regime {
            return Err(TrainError::RegimeMismatch { expected: self.regime, found: regime });
        }
        self.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches (sample weighted).
    pub train_loss: f64,
    pub first_batch_loss: f64,
    /// Per-PCoder reconstruction losses (`fb_unsupervised` only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reconstruction: Vec<f64>,
    /// Validation accuracy at the final time-step.
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartReport {
    pub restart: usize,
    pub initial: Vec<HyperParams>,
    pub learned: Vec<HyperParams>,
    pub epochs: Vec<EpochRecord>,
    /// Validation accuracy per time-step `0..=T` under the learned values.
    pub val_accuracy: Vec<f64>,
    pub steps: usize,
    /// Largest `|mu + gamma + beta - 1|` observed after any step.
    pub max_sum_error: f64,
    /// Smallest alpha observed after any step.
    pub min_alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub regime: Regime,
    pub noise: NoiseSpec,
    pub mask: HpMask,
    pub epochs: Vec<EpochRecord>,
    /// Validation accuracy per time-step after training (a single entry for
    /// feed-forward models).
    pub final_accuracy: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub restarts: Vec<RestartReport>,
    pub best_restart: Option<usize>,
}

impl TrainReport {
    /// Learned coefficients of the best restart.
    pub fn best_hps(&self) -> Option<&[HyperParams]> {
        self.best_restart.map(|b| self.restarts[b].learned.as_slice())
    }

    /// Loss curves as `epoch,split,metric,value` rows (no header).
    pub fn curve_rows(&self) -> Vec<(usize, &'static str, String, f64)> {
        let mut rows = Vec::new();
        let mut push = |prefix: String, epochs: &[EpochRecord]| {
            for e in epochs {
                rows.push((e.epoch, "train", format!("{prefix}loss"), e.train_loss));
                for (i, r) in e.reconstruction.iter().enumerate() {
                    rows.push((e.epoch, "train", format!("{prefix}reconstruction_pcoder{}", i + 1), *r));
                }
                if let Some(a) = e.val_accuracy {
                    rows.push((e.epoch, "val", format!("{prefix}accuracy"), a));
                }
            }
        };
        push(String::new(), &self.epochs);
        for r in &self.restarts {
            push(format!("restart{}_", r.restart), &r.epochs);
        }
        rows
    }
}

/// SHA-256 over parameter names, shapes and raw bits.
pub fn param_digest<'a>(params: impl IntoIterator<Item = (String, &'a Tensor<f32>)>) -> [u8; 32] {
    let mut h = Sha256::new();
    for (name, t) in params {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().into()
}

fn forward_digest(net: &PcNet) -> [u8; 32] {
    param_digest(net.named_params().into_iter().filter(|(n, _)| !n.contains(".fb.")))
}

fn feedback_digest(net: &PcNet) -> [u8; 32] {
    param_digest(net.named_params().into_iter().filter(|(n, _)| n.contains(".fb.")))
}

/// Index of the largest logit per row; the first wins ties.
pub fn predictions(logits: &Tensor<f32>) -> Vec<usize> {
    let classes = logits.shape().last().copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks(classes)
        .map(|row| row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best }))
        .collect()
}

fn correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    predictions(logits).iter().zip(labels).filter(|(p, l)| p == l).count()
}

fn batch_ranges(n: usize, batch: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(batch)).map(|b| (b * batch, ((b + 1) * batch).min(n))).collect()
}

/// Accuracy and prediction errors at every time-step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeCourse {
    pub accuracy: Vec<f64>,
    /// `errors[t][i]`, sample-weighted over batches.
    pub errors: Vec<Vec<f64>>,
}

pub fn evaluate_unrolled(net: &PcNet, data: &Dataset, hps: &[HyperParams], steps: usize, batch: usize) -> Result<TimeCourse> {
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let parts = batch_ranges(data.len(), batch.max(1))
        .into_par_iter()
        .map(|(a, b)| -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
            let d = data.slice(a, b)?;
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape);
            let x = tape.constant(d.images);
            let hv = hps.iter().map(|h| HpVars::constant(&mut tape, h)).collect::<Result<Vec<_>, _>>()?;
            let u = net.unroll(&mut tape, &bound, x, &hv, steps)?;
            let hits = u.logits.iter().map(|&l| correct(tape.value(l), &d.labels)).collect();
            let n = (b - a) as f64;
            let errs = u.errors.iter().map(|e| e.iter().map(|v| v * n).collect()).collect();
            Ok((hits, errs))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = data.len() as f64;
    let mut accuracy = vec![0.0; steps + 1];
    let mut errors = vec![vec![0.0; net.len()]; steps + 1];
    for (hits, errs) in parts {
        for t in 0..=steps {
            accuracy[t] += hits[t] as f64 / n;
            for (acc, e) in errors[t].iter_mut().zip(&errs[t]) {
                *acc += e / n;
            }
        }
    }
    Ok(TimeCourse { accuracy, errors })
}

/// Top-1 accuracy of any classifier.
pub fn evaluate<C: Classifier<f32> + Sync>(model: &C, data: &Dataset, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let hits = batch_ranges(data.len(), batch.max(1))
        .into_par_iter()
        .map(|(a, b)| -> Result<usize> {
            let d = data.slice(a, b)?;
            let mut tape = Tape::new();
            let x = tape.constant(d.images);
            let l = model.logits(&mut tape, x)?;
            Ok(correct(tape.value(l), &d.labels))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / data.len() as f64)
}

fn accumulate_net_grads(net: &mut PcNet, bound: &BoundNet, grads: &Gradients<f32>) -> Result<()> {
    for (pc, b) in net.pcoders.iter_mut().zip(&bound.pcoders) {
        let [fw, fb, dw, db] = pc.params_mut();
        for (v, p) in [(b.ff_weight, fw), (b.ff_bias, fb), (b.fb_weight, dw), (b.fb_bias, db)] {
            grads.accumulate_into(v, p)?;
        }
    }
    for (p, &v) in net.head.params_mut().into_iter().zip(&bound.head) {
        grads.accumulate_into(v, p)?;
    }
    Ok(())
}

/// Mean cross-entropy over the logits of steps `1..`.
pub fn mean_unrolled_ce<T: Real>(tape: &mut Tape<T>, logits: &[Var], labels: &[usize]) -> crate::tensor::Result<Var> {
    let steps = &logits[1..];
    let mut total = tape.cross_entropy(steps[0], labels)?;
    for &l in &steps[1..] {
        let ce = tape.cross_entropy(l, labels)?;
        total = tape.add(total, ce)?;
    }
    tape.scale(total, T::lit(1.0 / steps.len() as f64))
}

struct BatchLoss {
    loss: f64,
    parts: Vec<f64>,
}

/// One trainable objective: computes a batch loss and leaves gradients in
/// the trainable tensors.
trait Objective {
    fn batch(&mut self, images: Tensor<f32>, labels: &[usize]) -> crate::tensor::Result<BatchLoss>;
    fn params(&mut self) -> Vec<&mut Tensor<f32>>;
    fn val_accuracy(&self, val: &Dataset, batch: usize) -> Result<Option<f64>>;
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

fn run_sgd<O: Objective>(obj: &mut O, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochRecord>> {
    if train.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let o = &cfg.optimizer;
    let mut opt = Sgd::new(o.lr as f32, o.momentum as f32, o.weight_decay as f32)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = shuffled(train.len(), &mut rng);
        let (mut total, mut parts_total, mut first) = (0.0, Vec::new(), f64::NAN);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let d = train.select(chunk)?;
            let non_finite = |e: TensorError| TrainError::NonFinite { epoch, batch: bi, detail: e.to_string() };
            let out = obj.batch(d.images, &d.labels).map_err(non_finite)?;
            opt.step(&mut obj.params())?;
            obj.params().into_iter().for_each(|p| p.zero_grad());
            if !out.loss.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: bi, detail: format!("loss {}", out.loss) });
            }
            if bi == 0 {
                first = out.loss;
            }
            let w = chunk.len() as f64 / train.len() as f64;
            total += out.loss * w;
            parts_total.resize(out.parts.len(), 0.0);
            for (acc, p) in parts_total.iter_mut().zip(&out.parts) {
                *acc += p * w;
            }
        }
        let val_accuracy = if val.is_empty() { None } else { obj.val_accuracy(val, cfg.batch_size)? };
        records.push(EpochRecord { epoch, train_loss: total, first_batch_loss: first, reconstruction: parts_total, val_accuracy });
    }
    Ok(records)
}

struct FeedForwardObjective<'a>(&'a mut PcNet);

impl Objective for FeedForwardObjective<'_> {
    fn batch(&mut self, images: Tensor<f32>, labels: &[usize]) -> crate::tensor::Result<BatchLoss> {
        let mut tape = Tape::new();
        let bound = self.0.bind(&mut tape);
        let x = tape.constant(images);
        let logits = self.0.forward_ff(&mut tape, &bound, x).map_err(into_tensor_err)?;
        let loss = tape.cross_entropy(logits, labels)?;
        let value = f64::from(tape.value(loss).data()[0]);
        let grads = tape.backward(loss)?;
        accumulate_net_grads(self.0, &bound, &grads).map_err(|e| match e {
            TrainError::Tensor(t) => t,
            other => TensorError::InvalidArgument { op: "train", detail: other.to_string() },
        })?;
        Ok(BatchLoss { loss: value, parts: Vec::new() })
    }

    fn params(&mut self) -> Vec<&mut Tensor<f32>> {
        self.0.forward_params_mut()
    }

    fn val_accuracy(&self, val: &Dataset, batch: usize) -> Result<Option<f64>> {
        Ok(Some(evaluate(&crate::network::FeedForward(self.0), val, batch)?))
    }
}

fn into_tensor_err(e: NetworkError) -> TensorError {
    match e {
        NetworkError::Tensor(t) => t,
        NetworkError::Pcoder(crate::pcoder::PcoderError::Tensor(t)) => t,
        other => TensorError::InvalidArgument { op: "network", detail: other.to_string() },
    }
}

/// Supervised training of the encoders and head by single-pass
/// cross-entropy. Decoder weights are left bitwise untouched.
pub fn train_feedforward(net: &mut PcNet, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.expect(Regime::FfSupervised)?;
    let fb_before = feedback_digest(net);
    net.set_trainable(true, false);
    let epochs = run_sgd(&mut FeedForwardObjective(net), train, val, cfg);
    net.set_trainable(false, false);
    let epochs = epochs?;
    if feedback_digest(net) != fb_before {
        return Err(TrainError::FrozenModified(Regime::FfSupervised));
    }
    let final_accuracy = epochs.last().and_then(|e| e.val_accuracy).into_iter().collect();
    Ok(report(cfg, epochs, final_accuracy))
}

fn report(cfg: &TrainConfig, epochs: Vec<EpochRecord>, final_accuracy: Vec<f64>) -> TrainReport {
    TrainReport { regime: cfg.regime, noise: cfg.noise, mask: cfg.mask, epochs, final_accuracy, restarts: Vec::new(), best_restart: None }
}

struct BaselineObjective<'a>(&'a mut BaselineNet);

impl Objective for BaselineObjective<'_> {
    fn batch(&mut self, images: Tensor<f32>, labels: &[usize]) -> crate::tensor::Result<BatchLoss> {
        let mut tape = Tape::new();
        let bound = self.0.bind(&mut tape);
        let x = tape.constant(images);
        let logits = self.0.forward(&mut tape, &bound, x).map_err(into_tensor_err)?;
        let loss = tape.cross_entropy(logits, labels)?;
        let value = f64::from(tape.value(loss).data()[0]);
        let grads = tape.backward(loss)?;
        for (p, &v) in self.0.params_mut().into_iter().zip(&bound) {
            grads.accumulate_into(v, p)?;
        }
        Ok(BatchLoss { loss: value, parts: Vec::new() })
    }

    fn params(&mut self) -> Vec<&mut Tensor<f32>> {
        self.0.params_mut()
    }

    fn val_accuracy(&self, val: &Dataset, batch: usize) -> Result<Option<f64>> {
        Ok(Some(evaluate(&*self.0, val, batch)?))
    }
}

/// The feed-forward regime applied to a baseline network.
pub fn train_baseline(net: &mut BaselineNet, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.expect(Regime::FfSupervised)?;
    net.set_trainable(true);
    let epochs = run_sgd(&mut BaselineObjective(net), train, val, cfg);
    net.set_trainable(false);
    let epochs = epochs?;
    let final_accuracy = epochs.last().and_then(|e| e.val_accuracy).into_iter().collect();
    Ok(report(cfg, epochs, final_accuracy))
}

struct ReconstructionObjective<'a>(&'a mut PcNet);

impl Objective for ReconstructionObjective<'_> {
    fn batch(&mut self, images: Tensor<f32>, _labels: &[usize]) -> crate::tensor::Result<BatchLoss> {
        let net = &*self.0;
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let x = tape.constant(images);
        let states = net.forward_states(&mut tape, &bound, x).map_err(into_tensor_err)?;
        let mut parts = Vec::with_capacity(net.len());
        let mut total = None;
        for (i, (pc, b)) in net.pcoders.iter().zip(&bound.pcoders).enumerate() {
            let target = if i == 0 { x } else { states[i - 1] };
            let p = pc.predict(&mut tape, b, states[i]).map_err(|e| into_tensor_err(e.into()))?;
            let e = tape.mse(p, target)?;
            parts.push(f64::from(tape.value(e).data()[0]));
            total = Some(match total {
                None => e,
                Some(t) => tape.add(t, e)?,
            });
        }
        let total = total.expect("at least one PCoder");
        let grads = tape.backward(total)?;
        for (pc, b) in self.0.pcoders.iter_mut().zip(&bound.pcoders) {
            grads.accumulate_into(b.fb_weight, &mut pc.fb.deconv.weight)?;
            grads.accumulate_into(b.fb_bias, &mut pc.fb.deconv.bias)?;
        }
        Ok(BatchLoss { loss: parts.iter().sum(), parts })
    }

    fn params(&mut self) -> Vec<&mut Tensor<f32>> {
        self.0.feedback_params_mut()
    }

    fn val_accuracy(&self, _val: &Dataset, _batch: usize) -> Result<Option<f64>> {
        Ok(None)
    }
}

/// Trains the decoders to reconstruct the feed-forward activity below them.
/// The forward path is frozen and verified bitwise unchanged.
pub fn train_feedback_unsupervised(net: &mut PcNet, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.expect(Regime::FbUnsupervised)?;
    let ff_before = forward_digest(net);
    net.set_trainable(false, true);
    let epochs = run_sgd(&mut ReconstructionObjective(net), train, val, cfg);
    net.set_trainable(false, false);
    let epochs = epochs?;
    if forward_digest(net) != ff_before {
        return Err(TrainError::FrozenModified(Regime::FbUnsupervised));
    }
    Ok(report(cfg, epochs, Vec::new()))
}

struct SupervisedFeedbackObjective<'a> {
    net: &'a mut PcNet,
    steps: usize,
}

impl Objective for SupervisedFeedbackObjective<'_> {
    fn batch(&mut self, images: Tensor<f32>, labels: &[usize]) -> crate::tensor::Result<BatchLoss> {
        let mut tape = Tape::new();
        let bound = self.net.bind(&mut tape);
        let x = tape.constant(images);
        let hp = HpVars::constant(&mut tape, &HyperParams::supervised_training())
            .map_err(|e| TensorError::InvalidArgument { op: "train", detail: e.to_string() })?;
        let u = self.net.unroll(&mut tape, &bound, x, &[hp], self.steps).map_err(into_tensor_err)?;
        let loss = mean_unrolled_ce(&mut tape, &u.logits, labels)?;
        let value = f64::from(tape.value(loss).data()[0]);
        let grads = tape.backward(loss)?;
        accumulate_net_grads(self.net, &bound, &grads)
            .map_err(|e| TensorError::InvalidArgument { op: "train", detail: e.to_string() })?;
        Ok(BatchLoss { loss: value, parts: Vec::new() })
    }

    fn params(&mut self) -> Vec<&mut Tensor<f32>> {
        self.net.named_params_mut().into_iter().map(|(_, p)| p).collect()
    }

    fn val_accuracy(&self, val: &Dataset, batch: usize) -> Result<Option<f64>> {
        let tc = evaluate_unrolled(self.net, val, &[HyperParams::supervised_training()], self.steps, batch)?;
        Ok(tc.accuracy.last().copied())
    }
}

/// Trains all weights through the unrolled dynamics with the pinned
/// coefficients `(1/3, 1/3, 1/3, alpha = 0.01)`.
pub fn train_feedback_supervised(net: &mut PcNet, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.expect(Regime::FbSupervised)?;
    net.set_trainable(true, true);
    let epochs = run_sgd(&mut SupervisedFeedbackObjective { net, steps: cfg.timesteps }, train, val, cfg);
    net.set_trainable(false, false);
    let epochs = epochs?;
    let final_accuracy = if val.is_empty() {
        Vec::new()
    } else {
        evaluate_unrolled(net, val, &[HyperParams::supervised_training()], cfg.timesteps, cfg.batch_size)?.accuracy
    };
    Ok(report(cfg, epochs, final_accuracy))
}

/// Loss minimized by hyper-parameter training for fixed coefficients:
/// cross-entropy averaged over steps `1..=T`.
pub fn hp_objective(net: &PcNet, images: &Tensor<f32>, labels: &[usize], hps: &[HyperParams], steps: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let x = tape.constant(images.clone());
    let hv = hps.iter().map(|h| HpVars::constant(&mut tape, h)).collect::<Result<Vec<_>, _>>()?;
    let u = net.unroll(&mut tape, &bound, x, &hv, steps)?;
    let loss = mean_unrolled_ce(&mut tape, &u.logits, labels)?;
    Ok(f64::from(tape.value(loss).data()[0]))
}

/// Gaussian/salt-and-pepper corruption of a whole set; `offset` separates
/// the noise streams of different sets under one seed.
pub fn corrupt_dataset(data: &Dataset, noise: &NoiseSpec, offset: u64) -> Result<Dataset> {
    Ok(Dataset { images: corruption::corrupt_from(&data.images, noise, offset)?, labels: data.labels.clone() })
}

fn run_restart(net: &PcNet, train: &Dataset, val: &Dataset, cfg: &TrainConfig, restart: usize) -> Result<RestartReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(restart as u64);
    let count = cfg.hp_mode.count(net.len());
    let mut hps: Vec<TrainableHp<f32>> = (0..count)
        .map(|_| {
            let aux = match &cfg.hp_init {
                Some(h) => aux_from_constrained(h),
                None => init_uniform(&mut rng),
            };
            TrainableHp::from_aux(&aux, cfg.mask)
        })
        .collect();
    let initial: Vec<HyperParams> = hps.iter().map(|h| h.constrained(cfg.mask)).collect();
    let o = &cfg.optimizer;
    let mut opt = Adam::with_defaults(o.lr as f32, o.weight_decay as f32)?;
    let lrs: Vec<f32> = (0..count).flat_map(|_| [o.lr as f32, o.alpha_lr.unwrap_or(o.lr) as f32]).collect();
    let (mut step, mut max_sum_error, mut min_alpha) = (0, 0.0f64, f64::INFINITY);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = shuffled(train.len(), &mut rng);
        let (mut total, mut first) = (0.0, f64::NAN);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let d = train.select(chunk)?;
            let non_finite = |detail: String| TrainError::NonFinite { epoch, batch: bi, detail };
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape);
            let x = tape.constant(d.images);
            let mut bindings: Vec<HpBinding> = Vec::with_capacity(count);
            let mut vars = Vec::with_capacity(count);
            for h in &hps {
                let (v, b) = h.bind(&mut tape, cfg.mask)?;
                vars.push(v);
                bindings.push(b);
            }
            let u = net.unroll(&mut tape, &bound, x, &vars, cfg.timesteps).map_err(|e| non_finite(e.to_string()))?;
            let loss = mean_unrolled_ce(&mut tape, &u.logits, &d.labels).map_err(|e| non_finite(e.to_string()))?;
            let value = f64::from(tape.value(loss).data()[0]);
            let grads = tape.backward(loss)?;
            for (h, b) in hps.iter_mut().zip(&bindings) {
                grads.accumulate_into(b.aux, &mut h.aux)?;
                grads.accumulate_into(b.alpha, &mut h.alpha)?;
            }
            if hps.iter().any(|h| h.aux.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite()))) {
                return Err(non_finite("hyper-parameter gradient".into()));
            }
            let mut params: Vec<&mut Tensor<f32>> = hps.iter_mut().flat_map(|h| [&mut h.aux, &mut h.alpha]).collect();
            opt.step_with_lrs(&mut params, &lrs)?;
            step += 1;
            for h in &mut hps {
                h.clamp_alpha();
                h.zero_grad();
                let c = h.constrained(cfg.mask);
                c.validate().map_err(|source| TrainError::Constraint { restart, step, source })?;
                max_sum_error = max_sum_error.max((c.mu + c.gamma + c.beta - 1.0).abs());
                min_alpha = min_alpha.min(c.alpha);
            }
            if bi == 0 {
                first = value;
            }
            total += value * chunk.len() as f64 / train.len() as f64;
        }
        epochs.push(EpochRecord { epoch, train_loss: total, first_batch_loss: first, reconstruction: Vec::new(), val_accuracy: None });
    }
    debug_assert!(max_sum_error <= SUM_TOLERANCE);
    let learned: Vec<HyperParams> = hps.iter().map(|h| h.constrained(cfg.mask)).collect();
    let val_accuracy = if val.is_empty() {
        Vec::new()
    } else {
        evaluate_unrolled(net, val, &learned, cfg.timesteps, cfg.batch_size)?.accuracy
    };
    if let Some(last) = epochs.last_mut() {
        last.val_accuracy = val_accuracy.last().copied();
    }
    Ok(RestartReport { restart, initial, learned, epochs, val_accuracy, steps: step, max_sum_error, min_alpha })
}

/// Optimizes only the hyper-parameters of a frozen network. Training and
/// validation images are corrupted per `cfg.noise`. Restarts run
/// independently; the best has the highest final-step validation accuracy
/// (earliest on ties).
pub fn train_hyperparams(net: &PcNet, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.expect(Regime::HpOnly)?;
    if !net.is_frozen() {
        return Err(TrainError::NotFrozen);
    }
    if train.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let noisy_train = corrupt_dataset(train, &cfg.noise, 0)?;
    let noisy_val = corrupt_dataset(val, &cfg.noise, train.len() as u64)?;
    let restarts = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| run_restart(net, &noisy_train, &noisy_val, cfg, r))
        .collect::<Result<Vec<_>>>()?;
    let best = (!noisy_val.is_empty()).then(|| {
        let score = |r: &RestartReport| r.val_accuracy.last().copied().unwrap_or(f64::NEG_INFINITY);
        (0..restarts.len()).fold(0, |b, i| if score(&restarts[i]) > score(&restarts[b]) { i } else { b })
    });
    let final_accuracy = best.map(|b| restarts[b].val_accuracy.clone()).unwrap_or_default();
    let epochs = best.map(|b| restarts[b].epochs.clone()).unwrap_or_default();
    Ok(TrainReport { regime: Regime::HpOnly, noise: cfg.noise, mask: cfg.mask, epochs, final_accuracy, restarts, best_restart: best })
}

/// One cell of the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub mask: HpMask,
    pub kind: NoiseKind,
    pub level: u8,
    pub report: TrainReport,
}

/// Hyper-parameter training with the feedback term removed and, separately,
/// the error-correction term removed, for both noise kinds at levels 0..=3.
pub fn ablation_suite(net: &PcNet, train: &Dataset, val: &Dataset, base: &TrainConfig) -> Result<Vec<AblationCell>> {
    let mut cells = Vec::new();
    for mask in [HpMask::ZERO_BETA, HpMask::ZERO_ALPHA] {
        for kind in [NoiseKind::Gaussian, NoiseKind::SaltPepper] {
            for level in 0..=corruption::LEVELS {
                let noise = NoiseSpec { kind, level, seed: base.noise.seed };
                let cfg = TrainConfig { noise, mask, ..base.clone() };
                let report = train_hyperparams(net, train, val, &cfg)?;
                cells.push(AblationCell { mask, kind, level, report });
            }
        }
    }
    Ok(cells)
}
