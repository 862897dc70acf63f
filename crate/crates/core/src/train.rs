//! Adam, the epoch loop, plateau/early-stopping callbacks and the fit driver.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AugmentConfig, Batch, BatchConfig, Batches, DataError, DatasetIndex};
use crate::kernels::sparse_ce_forward;
use crate::model::{ModelError, ModelGraph};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tape::GradTape;
use crate::tensor::{Mode, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub es_patience: usize,
    pub es_min_delta: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            epochs: 30,
            batch_size: 32,
            es_patience: 5,
            es_min_delta: 0.0,
            plateau_factor: 0.1,
            plateau_patience: 3,
            min_lr: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be >= 1");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return fail("plateau_factor must lie in (0, 1)");
        }
        if self.es_patience == 0 || self.plateau_patience == 0 {
            return fail("patience values must be >= 1");
        }
        if !(self.min_lr >= 0.0 && self.es_min_delta >= 0.0) {
            return fail("min_lr and es_min_delta must be >= 0");
        }
        Ok(())
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Adam moments for every trainable parameter of one store.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    m: Vec<Option<Vec<T>>>,
    v: Vec<Option<Vec<T>>>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let moments = || -> Vec<Option<Vec<T>>> {
            store
                .iter()
                .map(|(_, p)| p.trainable.then(|| vec![T::zero(); p.value.numel()]))
                .collect()
        };
        Adam {
            m: moments(),
            v: moments(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, index: usize) -> Option<&[T]> {
        self.m[index].as_deref()
    }

    pub fn second_moment(&self, index: usize) -> Option<&[T]> {
        self.v[index].as_deref()
    }

    /// One update from the gradients stored on `store`. Nothing is modified
    /// if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if let Some((_, p)) = store
            .iter()
            .find(|(_, p)| p.trainable && !p.grad.all_finite())
        {
            return Err(TrainError::NonFiniteGradient(p.name.clone()));
        }
        self.t += 1;
        let t = self.t as i32;
        let b1 = T::from_f64_lossy(ADAM_BETA1);
        let b2 = T::from_f64_lossy(ADAM_BETA2);
        let one = T::one();
        let c1 = T::from_f64_lossy(1.0 - ADAM_BETA1.powi(t));
        let c2 = T::from_f64_lossy(1.0 - ADAM_BETA2.powi(t));
        let eps = T::from_f64_lossy(ADAM_EPSILON);
        let lr = T::from_f64_lossy(lr);
        for (i, p) in store.iter_mut().enumerate() {
            let (Some(m), Some(v)) = (self.m[i].as_mut(), self.v[i].as_mut()) else {
                continue;
            };
            let grad = p.grad.data().to_vec();
            let value = p.value.data_mut();
            for j in 0..value.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                value[j] = value[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
    pub examples: usize,
}

/// Index of the largest value per row; ties resolve to the lower index.
pub fn argmax_rows<T: Scalar>(k: usize, values: &[T]) -> Vec<usize> {
    values
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Default)]
struct Tally {
    loss: f64,
    correct: usize,
    examples: usize,
}

impl Tally {
    fn add<T: Scalar>(&mut self, loss: T, logits: &Tensor<T>, labels: &[usize]) {
        let k = logits.shape()[1];
        let preds = argmax_rows(k, logits.data());
        self.correct += preds.iter().zip(labels).filter(|(p, l)| p == l).count();
        self.loss += loss.as_f64() * labels.len() as f64;
        self.examples += labels.len();
    }

    fn finish(self) -> EpochStats {
        let n = self.examples.max(1) as f64;
        EpochStats {
            loss: self.loss / n,
            accuracy: self.correct as f64 / n,
            examples: self.examples,
        }
    }
}

/// Mean loss and predictions of an infer-mode forward pass; the model is untouched.
pub fn evaluate_batch<T: Scalar>(model: &ModelGraph<T>, batch: &Batch) -> Result<(T, Tensor<T>)> {
    let logits = model.infer_logits(&batch.images.cast::<T>())?;
    let (loss, _) = sparse_ce_forward(logits.shape()[1], logits.data(), &batch.labels)?;
    Ok((loss, logits))
}

/// One forward/backward/Adam step on a batch. Returns the batch loss and logits
/// as measured during the forward pass.
pub fn train_step<T: Scalar>(
    model: &mut ModelGraph<T>,
    adam: &mut Adam<T>,
    batch: &Batch,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(T, Tensor<T>)> {
    let mut tape = GradTape::new();
    let x = tape.constant(batch.images.cast::<T>());
    let logits = model.logits_on_tape(&mut tape, x, Mode::Train, rng)?;
    let logits_value = tape.value(logits).clone();
    let loss = tape.sparse_ce_loss(logits, &batch.labels)?;
    let loss_value = tape.value(loss).data()[0];
    tape.backward_into(loss, model.params_mut())?;
    adam.step(model.params_mut(), lr)?;
    Ok((loss_value, logits_value))
}

/// Training epoch over `batches`. Returns example-weighted mean loss and accuracy.
pub fn run_train_epoch<T: Scalar, I>(
    model: &mut ModelGraph<T>,
    batches: I,
    adam: &mut Adam<T>,
    lr: f64,
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<EpochStats>
where
    I: IntoIterator<Item = Result<Batch, DataError>>,
{
    let mut tally = Tally::default();
    for (i, batch) in batches.into_iter().enumerate() {
        let batch = batch?;
        let (loss, logits) = train_step(model, adam, &batch, lr, rng)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, batch: i });
        }
        tally.add(loss, &logits, &batch.labels);
    }
    Ok(tally.finish())
}

/// Forward-only epoch in infer mode. Neither weights nor running statistics change.
pub fn run_eval_epoch<T: Scalar, I>(model: &ModelGraph<T>, batches: I) -> Result<EpochStats>
where
    I: IntoIterator<Item = Result<Batch, DataError>>,
{
    let mut tally = Tally::default();
    for (i, batch) in batches.into_iter().enumerate() {
        let batch = batch?;
        let (loss, logits) = evaluate_batch(model, &batch)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch: 0, batch: i });
        }
        tally.add(loss, &logits, &batch.labels);
    }
    Ok(tally.finish())
}

/// State shared by the plateau and early-stopping callbacks.
#[derive(Debug, Clone)]
pub struct CallbackState<T> {
    pub best_monitor: f64,
    pub best_epoch: usize,
    pub best_weights: Option<Vec<Tensor<T>>>,
    pub epochs_since_improve_es: usize,
    pub epochs_since_improve_lr: usize,
    plateau_best: f64,
    pub current_lr: f64,
    pub stopped: bool,
    epoch: usize,
}

impl<T: Scalar> CallbackState<T> {
    pub fn new(lr: f64) -> Self {
        CallbackState {
            best_monitor: f64::INFINITY,
            best_epoch: 0,
            best_weights: None,
            epochs_since_improve_es: 0,
            epochs_since_improve_lr: 0,
            plateau_best: f64::INFINITY,
            current_lr: lr,
            stopped: false,
            epoch: 0,
        }
    }
}

/// Reduce-on-plateau: after `plateau_patience` epochs without improvement the
/// learning rate is multiplied by `plateau_factor`, floored at `min_lr`.
pub fn plateau_update<T: Scalar>(cb: &mut CallbackState<T>, val_loss: f64, cfg: &TrainConfig) {
    if val_loss < cb.plateau_best - cfg.es_min_delta {
        cb.plateau_best = val_loss;
        cb.epochs_since_improve_lr = 0;
        return;
    }
    cb.epochs_since_improve_lr += 1;
    if cb.epochs_since_improve_lr >= cfg.plateau_patience {
        cb.current_lr = (cb.current_lr * cfg.plateau_factor).max(cfg.min_lr);
        cb.epochs_since_improve_lr = 0;
    }
}

/// Early stopping on the monitored loss. Improvements snapshot the weights; on
/// stop the best snapshot is written back into `params`.
pub fn early_stop_update<T: Scalar>(
    cb: &mut CallbackState<T>,
    val_loss: f64,
    cfg: &TrainConfig,
    params: &mut ParamStore<T>,
) {
    cb.epoch += 1;
    if val_loss < cb.best_monitor - cfg.es_min_delta {
        cb.best_monitor = val_loss;
        cb.best_epoch = cb.epoch;
        cb.best_weights = Some(params.values());
        cb.epochs_since_improve_es = 0;
        return;
    }
    cb.epochs_since_improve_es += 1;
    if cb.epochs_since_improve_es >= cfg.es_patience {
        cb.stopped = true;
        if let Some(best) = &cb.best_weights {
            params.restore_values(best);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub rows: Vec<EpochRecord>,
}

/// Shortest decimal that round-trips `x` rounded to `digits` significant digits.
pub fn format_significant(x: f64, digits: usize) -> String {
    if !x.is_finite() || x == 0.0 {
        return format!("{x}");
    }
    let rounded: f64 = format!("{:.*e}", digits.saturating_sub(1), x)
        .parse()
        .expect("formatted float parses");
    format!("{rounded}")
}

impl History {
    pub const HEADER: &'static str = "epoch,train_loss,train_acc,val_loss,val_acc,lr";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.rows {
            let f = |x| format_significant(x, 6);
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch,
                f(r.train_loss),
                f(r.train_acc),
                f(r.val_loss),
                f(r.val_acc),
                f(r.lr)
            )
            .expect("writing to a String cannot fail");
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Training finished (possibly early) with the best weights loaded.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub history: History,
    pub stopped_early: bool,
    pub best_epoch: usize,
}

/// Training aborted; `history` holds every completed epoch.
#[derive(Debug, Error)]
#[error("training aborted after {} epoch(s): {source}", history.rows.len())]
pub struct FitAbort {
    pub history: History,
    #[source]
    pub source: TrainError,
}

/// Run up to `cfg.epochs` epochs of training and validation. After each epoch
/// the plateau callback runs, then early stopping. The returned model holds the
/// weights of the best validation epoch.
pub fn fit<T: Scalar>(
    model: &mut ModelGraph<T>,
    train: &DatasetIndex,
    val: &DatasetIndex,
    cfg: &TrainConfig,
    augment: Option<AugmentConfig>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitOutcome, FitAbort> {
    let mut history = History::default();
    let abort = |history: History, source: TrainError| FitAbort { history, source };
    if let Err(e) = cfg.validate() {
        return Err(abort(history, e));
    }
    if train.is_empty() || val.is_empty() {
        let e = TrainError::Config("train and validation splits must be non-empty".into());
        return Err(abort(history, e));
    }
    let mut adam = Adam::new(model.params());
    let mut cb = CallbackState::new(cfg.lr);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(u64::MAX);
    let train_cfg = BatchConfig {
        batch_size: cfg.batch_size,
        shuffle: true,
        seed: cfg.seed,
        augment,
    };
    let val_cfg = BatchConfig {
        batch_size: cfg.batch_size,
        shuffle: false,
        seed: cfg.seed,
        augment: None,
    };

    for epoch in 1..=cfg.epochs {
        let lr = cb.current_lr;
        let stats = (|| -> Result<(EpochStats, EpochStats)> {
            let batches = Batches::new(train, &train_cfg, epoch as u64 - 1)?;
            let t = run_train_epoch(model, batches, &mut adam, lr, &mut dropout_rng, epoch)?;
            let v = run_eval_epoch(model, Batches::new(val, &val_cfg, 0)?)?;
            Ok((t, v))
        })();
        let (t, v) = match stats {
            Ok(s) => s,
            Err(e) => return Err(abort(history, e)),
        };
        let record = EpochRecord {
            epoch,
            train_loss: t.loss,
            train_acc: t.accuracy,
            val_loss: v.loss,
            val_acc: v.accuracy,
            lr,
        };
        history.rows.push(record);
        on_epoch(&record);
        plateau_update(&mut cb, v.loss, cfg);
        early_stop_update(&mut cb, v.loss, cfg, model.params_mut());
        if cb.stopped {
            break;
        }
    }
    if !cb.stopped {
        if let Some(best) = &cb.best_weights {
            model.params_mut().restore_values(best);
        }
    }
    Ok(FitOutcome {
        history,
        stopped_early: cb.stopped,
        best_epoch: cb.best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digits() {
        assert_eq!(format_significant(0.61803398, 6), "0.618034");
        assert_eq!(format_significant(1e-6, 6), "0.000001");
        assert_eq!(format_significant(1.0, 6), "1");
        assert_eq!(format_significant(123456789.0, 6), "123457000");
        assert_eq!(format_significant(0.0, 6), "0");
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(
            argmax_rows(2, &[0.5f32, 0.5, 0.2, 0.8, 0.9, 0.1]),
            vec![0, 1, 0]
        );
    }
}
