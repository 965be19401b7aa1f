//! L1 regression training: the loss, Adam, the epoch loop with early
//! stopping and best-snapshot selection, and quantization-aware
//! fine-tuning.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::nnet::{
    calibrate, predict_samples, quantize_with_ranges, Batch, Mode, Model, NnetError, QParams, QuantModel, Regressor,
    Scalar, Tensor,
};
use crate::rng;
use crate::scenegen::{Dataset, Sample};

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} dataset is empty")]
    EmptyData(&'static str),
    #[error("dataset does not fit the model: {0}")]
    Incompatible(String),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] NnetError),
}

/// Mean absolute error over every scalar and its subgradient
/// `sign(pred - target) / N`, with `sign(0) = 0`.
pub fn l1_loss<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> (S, Tensor<S>) {
    assert_eq!(pred.shape(), target.shape(), "prediction and target shapes differ");
    let n = S::lit(pred.len().max(1) as f64);
    let mut sum = 0.0f64;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            sum += (p - t).abs().as_f64();
            if p > t {
                S::one() / n
            } else if p < t {
                -S::one() / n
            } else {
                S::zero()
            }
        })
        .collect();
    (S::lit(sum) / n, Tensor::new(pred.shape().to_vec(), grad).expect("same shape"))
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<S> {
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    pub t: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: &[Tensor<S>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![S::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![S::zero(); p.len()]).collect(),
            t: 0,
        }
    }

    /// One bias-corrected step. Weight decay is decoupled from the gradient
    /// and skipped entirely when zero.
    pub fn step(&mut self, params: &mut [Tensor<S>], grads: &[Tensor<S>], lr: f64, weight_decay: f64) {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (S::lit(ADAM_BETA1), S::lit(ADAM_BETA2));
        let c1 = S::one() - b1.powi(t);
        let c2 = S::one() - b2.powi(t);
        let (lr, wd, eps) = (S::lit(lr), S::lit(weight_decay), S::lit(ADAM_EPS));
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (S::one() - b1) * g;
                *v = b2 * *v + (S::one() - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                if weight_decay > 0.0 {
                    *w = *w - lr * wd * *w;
                }
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QatConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Training samples (taken from the front) used to fix activation ranges.
    pub calibration_samples: usize,
}

impl Default for QatConfig {
    fn default() -> Self {
        Self { epochs: 10, learning_rate: 1e-4, weight_decay: 1e-6, calibration_samples: 256 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    /// Stop once patience runs out; otherwise run every epoch and only
    /// select the best snapshot.
    pub halt_on_plateau: bool,
    pub qat: QatConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 100,
            batch_size: 64,
            patience: 15,
            seed: 1,
            halt_on_plateau: true,
            qat: QatConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return bad("epochs, batch_size and patience must be positive");
        }
        if self.patience > self.epochs {
            return bad("patience must not exceed epochs");
        }
        if !(self.qat.learning_rate > 0.0 && self.qat.weight_decay >= 0.0 && self.qat.calibration_samples > 0) {
            return bad("qat learning_rate and calibration_samples must be positive, weight_decay non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch number (1-based) of the returned snapshot.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best_val_loss(&self) -> f64 {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch).map(|e| e.val_loss).unwrap_or(f64::NAN)
    }

    /// `epoch,train_l1,val_l1` with a header row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_l1,val_l1\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{:.8},{:.8}", e.epoch, e.train_loss, e.val_loss);
        }
        s
    }
}

/// Patience bookkeeping: improvement means strictly lower than the best so
/// far.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: 0, stale: 0 }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        let improved = loss < self.best;
        if improved {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopDecision { improved, stop: self.stale >= self.patience }
    }
}

fn check_compat<R: Regressor + ?Sized>(r: &R, data: &Dataset, what: &'static str) -> Result<(), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyData(what));
    }
    let [c, h, w] = r.arch().input;
    if c != 1 || h != data.height || w != data.width {
        return Err(TrainError::Incompatible(format!(
            "{what} images are {}x{}, model expects {c}x{h}x{w}",
            data.height, data.width
        )));
    }
    if r.arch().outputs() != data.label_dim {
        return Err(TrainError::Incompatible(format!(
            "{what} labels have {} values, model predicts {}",
            data.label_dim,
            r.arch().outputs()
        )));
    }
    let v = r.variant();
    if v.uses_state() && v.state_dim != data.state_dim {
        return Err(TrainError::Incompatible(format!(
            "{what} state has {} values, {} model expects {}",
            data.state_dim, v.kind, v.state_dim
        )));
    }
    Ok(())
}

/// Mean absolute error of `r` over `data`.
pub fn l1_on<R: Regressor + ?Sized>(r: &R, data: &Dataset) -> Result<f64, TrainError> {
    check_compat(r, data, "evaluation")?;
    let pred = predict_samples(r, &data.samples, EVAL_CHUNK)?;
    let labels = data.samples.iter().flat_map(|s| s.label.iter());
    let sum: f64 = pred.iter().zip(labels).map(|(p, y)| (p - y).abs() as f64).sum();
    Ok(sum / pred.len() as f64)
}

fn epoch_order(n: usize, seed: u64, tag: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[rng::TAG_SHUFFLE, tag, epoch as u64]));
    idx
}

/// One pass over `data` in shuffled mini-batches.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    model: &mut Model<f32>,
    opt: &mut Adam<f32>,
    data: &Dataset,
    order: &[usize],
    batch_size: usize,
    mode: Mode<'_>,
    lr: f64,
    weight_decay: f64,
    epoch: usize,
) -> Result<f64, TrainError> {
    let mut total = 0.0f64;
    for (bi, chunk) in order.chunks(batch_size).enumerate() {
        let samples: Vec<&Sample> = chunk.iter().map(|&i| &data.samples[i]).collect();
        let batch = Batch::<f32>::from_samples(&samples);
        let target = crate::nnet::label_tensor::<f32>(&samples);
        let (pred, cache) = model.forward(&batch, mode)?;
        let (loss, d_out) = l1_loss(&pred, &target);
        if !loss.is_finite() || !pred.is_finite() {
            return Err(TrainError::NonFinite { epoch, batch: bi });
        }
        let grads = model.backward(&cache, &d_out);
        if matches!(mode, Mode::Train) {
            model.update_running_stats(&cache);
        }
        opt.step(&mut model.params, &grads.params, lr, weight_decay);
        total += loss as f64 * chunk.len() as f64;
    }
    Ok(total / order.len() as f64)
}

/// Trains `model` with Adam on `train`, validating after every epoch in
/// inference mode, and returns the best-validation snapshot.
pub fn train(
    mut model: Model<f32>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Model<f32>, TrainHistory), TrainError> {
    cfg.validate()?;
    check_compat(&model, train, "training")?;
    check_compat(&model, val, "validation")?;
    let mut opt = Adam::new(&model.params);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best = model.clone();
    let mut history = TrainHistory::default();
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, 0, epoch);
        let train_loss =
            run_epoch(&mut model, &mut opt, train, &order, cfg.batch_size, Mode::Train, cfg.learning_rate, 0.0, epoch)?;
        let val_loss = l1_on(&model, val)?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFinite { epoch, batch: usize::MAX });
        }
        history.epochs.push(EpochRecord { epoch, train_loss, val_loss });
        let d = stopper.observe(epoch, val_loss);
        if d.improved {
            best = model.clone();
            history.best_epoch = epoch;
        }
        if d.stop && cfg.halt_on_plateau {
            break;
        }
    }
    Ok((best, history))
}

/// Outcome of quantization-aware fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct QatReport {
    /// Validation L1 of the post-training-quantized starting model.
    pub ptq_val_loss: f64,
    pub history: TrainHistory,
    pub activation_params: Vec<QParams>,
}

impl QatReport {
    /// Validation L1 of the returned quantized model.
    pub fn final_val_loss(&self) -> f64 {
        if self.history.epochs.is_empty() {
            self.ptq_val_loss
        } else {
            self.history.best_val_loss()
        }
    }
}

/// Calibrates on the first training samples, then fine-tunes with
/// fake-quantized forward passes at the QAT settings and returns the
/// quantized model from the fine-tuning epoch with the lowest quantized
/// validation loss. Zero epochs yields plain post-training quantization.
pub fn qat_finetune(
    model: &Model<f32>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<(QuantModel, QatReport), TrainError> {
    cfg.validate()?;
    check_compat(model, train, "training")?;
    check_compat(model, val, "validation")?;
    let n_cal = cfg.qat.calibration_samples.min(train.len());
    let cal: Vec<&Sample> = train.samples[..n_cal].iter().collect();
    let ranges = calibrate(model, &Batch::from_samples(&cal))?;
    let ptq = quantize_with_ranges(model, &ranges)?;
    let acts = ptq.acts.clone();
    let ptq_val_loss = l1_on(&ptq, val)?;

    let mut m = model.clone();
    let mut opt = Adam::new(&m.params);
    let mut best: Option<(f64, QuantModel)> = None;
    let mut history = TrainHistory::default();
    for epoch in 1..=cfg.qat.epochs {
        let order = epoch_order(train.len(), cfg.seed, 1, epoch);
        let train_loss = run_epoch(
            &mut m,
            &mut opt,
            train,
            &order,
            cfg.batch_size,
            Mode::FakeQuant(&acts),
            cfg.qat.learning_rate,
            cfg.qat.weight_decay,
            epoch,
        )?;
        let q = quantize_with_ranges(&m, &ranges)?;
        let val_loss = l1_on(&q, val)?;
        history.epochs.push(EpochRecord { epoch, train_loss, val_loss });
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            history.best_epoch = epoch;
            best = Some((val_loss, q));
        }
    }
    let qm = best.map(|(_, q)| q).unwrap_or(ptq);
    Ok((qm, QatReport { ptq_val_loss, history, activation_params: acts }))
}
