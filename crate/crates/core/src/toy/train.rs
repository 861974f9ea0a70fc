//! Adam training loop, evaluation and metric records.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::{batch_tensor, ToyDataset, ToySample, FRAMES, SIZE};
use super::model::ToyNet;
use crate::error::{Error, Result};
use crate::knn::{Dims, KnnBackend};
use crate::ops::BnMode;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub batch_size: usize,
    pub epochs: usize,
    /// CP proposals per point; ignored by networks without a CP module.
    pub k: usize,
    pub seed: u64,
    /// Stop once a full epoch is classified without error.
    pub early_stop: bool,
    pub backend: KnnBackend,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            epochs: 60,
            k: super::model::DEFAULT_K,
            seed: 0,
            early_stop: true,
            backend: KnnBackend::Tree,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.learning_rate, self.beta1, self.beta2, self.adam_eps]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.learning_rate < 0.0 {
            return Err(Error::invalid(
                "learning rate and Adam constants must be finite, lr >= 0",
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if self.adam_eps <= 0.0 {
            return Err(Error::invalid("Adam epsilon must be positive"));
        }
        if self.batch_size < 1 || self.epochs < 1 {
            return Err(Error::invalid("batch size and epoch count must be at least 1"));
        }
        Dims::new(FRAMES, SIZE, SIZE).check_k(self.k)
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: &TrainConfig) -> Self {
        Adam {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies and clears the accumulated gradient of every parameter.
    pub fn step(&mut self, params: Vec<&mut Tensor>) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::invalid("parameter list changed between Adam steps"));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.grad().map(<[f32]>::to_vec) else {
                continue;
            };
            for (((x, g), m), v) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *x -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

/// Loss and number of correct predictions on one mini-batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchOutcome {
    pub loss: f32,
    pub correct: usize,
}

fn argmax_rows(logits: &[f32], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// One forward/backward pass in train mode followed by an Adam update.
pub fn train_step(
    model: &mut ToyNet,
    adam: &mut Adam,
    videos: &Tensor,
    labels: &[usize],
    backend: KnnBackend,
) -> Result<BatchOutcome> {
    let mut tape = Tape::new();
    let f = model.forward(&mut tape, videos, BnMode::Train, backend)?;
    let loss = tape.softmax_cross_entropy(f.logits, labels)?;
    let loss_value = tape.value(loss).item().expect("scalar loss");
    let logits = tape.value(f.logits);
    let correct = argmax_rows(logits.data(), logits.shape()[1])
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    if !loss_value.is_finite() {
        return Ok(BatchOutcome {
            loss: loss_value,
            correct,
        });
    }
    let grads = tape.backward(loss)?;
    let vars = f.param_vars.clone();
    let mut params = model.params_mut();
    for (var, p) in vars.iter().zip(params.iter_mut()) {
        grads.accumulate_into(*var, p)?;
    }
    adam.step(params)?;
    Ok(BatchOutcome {
        loss: loss_value,
        correct,
    })
}

/// Anything that maps a `[N, T, H, W]` batch to `[N, classes]` logits.
pub trait Classifier {
    fn logits(&mut self, videos: &Tensor) -> Result<Tensor>;
}

impl Classifier for ToyNet {
    fn logits(&mut self, videos: &Tensor) -> Result<Tensor> {
        ToyNet::logits(self, videos, KnnBackend::Tree)
    }
}

/// Mean loss and accuracy of one split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitMetrics {
    pub loss: f32,
    pub accuracy: f32,
}

const EVAL_BATCH: usize = 50;

/// Eval-mode loss and top-1 accuracy over `samples`.
pub fn evaluate_split(model: &mut impl Classifier, samples: &[ToySample]) -> Result<SplitMetrics> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&ToySample> = chunk.iter().collect();
        let (videos, labels) = batch_tensor(&refs)?;
        let logits = model.logits(&videos)?;
        let (loss, _) = crate::ops::softmax_cross_entropy(&logits, &labels)?;
        loss_sum += loss as f64 * chunk.len() as f64;
        correct += argmax_rows(logits.data(), logits.shape()[1])
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(SplitMetrics {
        loss: (loss_sum / samples.len() as f64) as f32,
        accuracy: correct as f32 / samples.len() as f32,
    })
}

/// Top-1 accuracy in `[0, 1]`.
pub fn evaluate(model: &mut impl Classifier, samples: &[ToySample]) -> Result<f32> {
    Ok(evaluate_split(model, samples)?.accuracy)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

/// One row of the metrics history. Train rows average the mini-batches
/// of the epoch; val rows are eval-mode passes after the epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f32,
    pub accuracy: f32,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub epochs_run: usize,
    pub stopped_early: bool,
    /// Epoch (1-based) of the retained checkpoint.
    pub best_epoch: usize,
    /// Eval-mode accuracies of the retained checkpoint.
    pub train_accuracy: f32,
    pub val_accuracy: f32,
}

/// `epoch,split,loss,accuracy` with a header line.
pub fn metrics_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,split,loss,accuracy\n");
    for r in history {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.split, r.loss, r.accuracy));
    }
    out
}

/// [`train_with`] without a progress callback.
pub fn train(model: &mut ToyNet, dataset: &ToyDataset, config: &TrainConfig) -> Result<TrainReport> {
    train_with(model, dataset, config, |_| {})
}

/// Trains `model` in place and leaves it holding the best-validation
/// checkpoint. `on_record` sees every history row as it is produced.
pub fn train_with(
    model: &mut ToyNet,
    dataset: &ToyDataset,
    config: &TrainConfig,
    mut on_record: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    config.validate()?;
    if dataset.train.is_empty() || dataset.val.is_empty() {
        return Err(Error::invalid("training needs non-empty train and val splits"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config);
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(usize, f32, ToyNet)> = None;
    let mut stopped_early = false;
    let mut epochs_run = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let refs: Vec<&ToySample> = idx.iter().map(|&i| &dataset.train[i]).collect();
            let (videos, labels) = batch_tensor(&refs)?;
            let out = train_step(model, &mut adam, &videos, &labels, config.backend)?;
            if !out.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    loss: out.loss,
                });
            }
            loss_sum += out.loss as f64 * idx.len() as f64;
            correct += out.correct;
        }
        epochs_run = epoch;
        let n = dataset.train.len();
        let train_rec = EpochRecord {
            epoch,
            split: Split::Train,
            loss: (loss_sum / n as f64) as f32,
            accuracy: correct as f32 / n as f32,
        };
        on_record(&train_rec);
        history.push(train_rec);

        let val = evaluate_split(model, &dataset.val)?;
        let val_rec = EpochRecord {
            epoch,
            split: Split::Val,
            loss: val.loss,
            accuracy: val.accuracy,
        };
        on_record(&val_rec);
        history.push(val_rec);

        if best.as_ref().is_none_or(|b| val.accuracy > b.1) {
            best = Some((epoch, val.accuracy, model.clone()));
        }
        if config.early_stop && correct == n {
            stopped_early = true;
            break;
        }
    }

    let (best_epoch, val_accuracy, best_model) = best.expect("at least one epoch");
    *model = best_model;
    let train_accuracy = evaluate(model, &dataset.train)?;
    Ok(TrainReport {
        history,
        epochs_run,
        stopped_early,
        best_epoch,
        train_accuracy,
        val_accuracy,
    })
}
