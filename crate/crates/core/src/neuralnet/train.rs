use std::io::Write;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::rng;

use super::adam::{AdamConfig, AdamState};
use super::loss::{aam_loss_and_grad, cosine_loss_and_grad, AamHead};
use super::mlp::Mlp;

/// Optimization schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Passes over the training split; `0` evaluates the initial model only.
    pub epochs: usize,
    pub batch_size: usize,
    pub validate_every: usize,
    pub validation_fraction: f64,
    pub shuffle_seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 8,
            validate_every: 200,
            validation_fraction: 0.03,
            shuffle_seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.validate_every == 0 {
            return Err(Error::config("validate_every", "must be positive"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 0.5) {
            return Err(Error::config("validation_fraction", "must lie in (0, 0.5)"));
        }
        self.adam.validate()
    }

    /// Size of the validation split for `n` samples (at least one).
    pub fn validation_size(&self, n: usize) -> usize {
        ((self.validation_fraction * n as f64).round() as usize).max(1)
    }
}

/// One validation record. `train_loss` is the mean batch loss since the
/// previous record and is absent when no batch ran in between.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub iteration: usize,
    pub train_loss: Option<f64>,
    pub val_loss: f64,
}

/// Writes `iteration,train_loss,val_loss` rows; a missing train loss is an empty field.
pub fn write_history_csv<W: Write>(history: &[HistoryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "train_loss", "val_loss"])?;
    for row in history {
        w.write_record([
            row.iteration.to_string(),
            row.train_loss.map(|v| v.to_string()).unwrap_or_default(),
            row.val_loss.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// A model together with the loss it is trained on.
pub trait Task: Clone {
    type Sample;

    fn loss(&self, sample: &Self::Sample) -> Result<f64>;

    /// Loss and gradients, one vector per tensor in [`Task::params_mut`] order.
    fn loss_and_grad(&self, sample: &Self::Sample) -> Result<(f64, Vec<Vec<f64>>)>;

    fn param_shapes(&self) -> Vec<usize>;

    fn params_mut(&mut self) -> Vec<&mut [f64]>;

    /// Hook run after every optimizer step.
    fn after_step(&mut self) -> Result<()> {
        Ok(())
    }
}

/// Regression `x -> y` under the cosine loss `1 - cos(model(x), y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineRegression {
    pub model: Mlp,
}

impl Task for CosineRegression {
    type Sample = (Vec<f64>, Vec<f64>);

    fn loss(&self, (x, y): &Self::Sample) -> Result<f64> {
        let out = self.model.forward(x)?;
        Ok(cosine_loss_and_grad(out.as_slice(), y)?.0)
    }

    fn loss_and_grad(&self, (x, y): &Self::Sample) -> Result<(f64, Vec<Vec<f64>>)> {
        let trace = self.model.forward_trace(x)?;
        let (loss, dy) = cosine_loss_and_grad(trace.output.as_slice(), y)?;
        let (grads, _) = self.model.backward(&trace, &dy)?;
        Ok((
            loss,
            grads.tensors().into_iter().map(<[f64]>::to_vec).collect(),
        ))
    }

    fn param_shapes(&self) -> Vec<usize> {
        self.model.tensors().iter().map(|t| t.len()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.model.tensors_mut()
    }
}

/// Speaker classification: `model` transforms an embedding and `head`
/// scores it with AAM-softmax. Head columns are renormalized after each step.
#[derive(Clone, Debug, PartialEq)]
pub struct AamClassifier {
    pub model: Mlp,
    pub head: AamHead,
}

impl Task for AamClassifier {
    type Sample = (Vec<f64>, usize);

    fn loss(&self, (x, label): &Self::Sample) -> Result<f64> {
        let out = self.model.forward(x)?;
        Ok(aam_loss_and_grad(out.as_slice(), &self.head, *label)?.loss)
    }

    fn loss_and_grad(&self, (x, label): &Self::Sample) -> Result<(f64, Vec<Vec<f64>>)> {
        let trace = self.model.forward_trace(x)?;
        let out = aam_loss_and_grad(trace.output.as_slice(), &self.head, *label)?;
        let (grads, _) = self.model.backward(&trace, &out.d_embedding)?;
        let mut tensors: Vec<Vec<f64>> = grads.tensors().into_iter().map(<[f64]>::to_vec).collect();
        tensors.push(out.d_weights.as_slice().to_vec());
        Ok((out.loss, tensors))
    }

    fn param_shapes(&self) -> Vec<usize> {
        let mut shapes: Vec<usize> = self.model.tensors().iter().map(|t| t.len()).collect();
        shapes.push(self.head.weights.len());
        shapes
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut params = self.model.tensors_mut();
        params.push(self.head.weights.as_mut_slice());
        params
    }

    fn after_step(&mut self) -> Result<()> {
        self.head.renormalize()
    }
}

impl AamClassifier {
    /// Head initialized from class means: column `c` is the normalized mean of
    /// `model(x)` over the samples labelled `c`.
    pub fn imprinted(
        model: Mlp,
        samples: &[(Vec<f64>, usize)],
        n_classes: usize,
        margin: f64,
        scale: f64,
    ) -> Result<Self> {
        let dim = model.output_dim();
        let mut sums = DMatrix::zeros(dim, n_classes);
        for (x, label) in samples {
            if *label >= n_classes {
                return Err(Error::domain(format!(
                    "label {label} out of range for {n_classes} classes"
                )));
            }
            let y = model.forward(x)?;
            let mut col = sums.column_mut(*label);
            col += y;
        }
        let head = AamHead::new(sums, margin, scale)?;
        Ok(Self { model, head })
    }
}

/// Outcome of [`train`]: the lowest-validation-loss snapshot and the full history.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub best: T,
    pub best_iteration: usize,
    pub best_val_loss: f64,
    pub iterations: usize,
    pub history: Vec<HistoryRow>,
}

fn mean_loss<T: Task>(task: &T, data: &[T::Sample], idx: &[usize]) -> Result<f64> {
    let mut sum = 0.0;
    for &i in idx {
        sum += task.loss(&data[i])?;
    }
    Ok(sum / idx.len() as f64)
}

/// Mini-batch Adam training.
///
/// A seeded shuffle of the sample indices puts the first
/// `validation_size(n)` samples in the validation split. Each epoch visits
/// the remaining samples in a freshly seeded order, in batches of
/// `batch_size` (the last batch may be smaller); the batch gradient is the
/// mean of per-sample gradients summed in batch order. The mean validation
/// loss is recorded every `validate_every` iterations and after the last
/// one, and the parameters at the lowest recorded validation loss are
/// returned (the earliest on ties).
pub fn train<T: Task>(task: T, data: &[T::Sample], cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let n = data.len();
    let n_val = cfg.validation_size(n);
    if n <= n_val || n - n_val < cfg.batch_size {
        return Err(Error::config(
            "batch_size",
            format!("{n} samples leave fewer than one batch after a validation split of {n_val}"),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng::shuffle(&mut order, &mut rng::stream(cfg.shuffle_seed, "split"));
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut val_idx = val_idx.to_vec();
    val_idx.sort_unstable();

    let mut task = task;
    let mut adam = AdamState::new(cfg.adam, &task.param_shapes());
    let mut history = Vec::new();
    let mut iteration = 0usize;
    let mut pending = (0.0, 0usize);

    let fail = |iteration: usize, message: String, history: &Vec<HistoryRow>| Error::Training {
        iterations: iteration,
        message,
        history: history.clone(),
    };

    let mut best: Option<(T, usize, f64)> = None;
    let mut record = |task: &T,
                      iteration: usize,
                      pending: &mut (f64, usize),
                      history: &mut Vec<HistoryRow>|
     -> Result<()> {
        let val = mean_loss(task, data, &val_idx)?;
        if !val.is_finite() {
            return Err(fail(
                iteration,
                "validation loss is not finite".into(),
                history,
            ));
        }
        let train_loss = (pending.1 > 0).then(|| pending.0 / pending.1 as f64);
        *pending = (0.0, 0);
        history.push(HistoryRow {
            iteration,
            train_loss,
            val_loss: val,
        });
        if best.as_ref().is_none_or(|b| val < b.2) {
            best = Some((task.clone(), iteration, val));
        }
        Ok(())
    };

    for epoch in 0..cfg.epochs {
        let mut epoch_order = train_idx.to_vec();
        rng::shuffle(
            &mut epoch_order,
            &mut rng::stream(cfg.shuffle_seed, &format!("epoch:{epoch}")),
        );
        for batch in epoch_order.chunks(cfg.batch_size) {
            let mut grad_sum: Vec<Vec<f64>> = task
                .param_shapes()
                .into_iter()
                .map(|n| vec![0.0; n])
                .collect();
            let mut loss_sum = 0.0;
            for &i in batch {
                let (loss, grads) = task.loss_and_grad(&data[i])?;
                loss_sum += loss;
                for (acc, g) in grad_sum.iter_mut().zip(&grads) {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grad_sum.iter_mut().flatten() {
                *g *= scale;
            }
            let batch_loss = loss_sum * scale;
            if !batch_loss.is_finite() || grad_sum.iter().flatten().any(|g| !g.is_finite()) {
                return Err(fail(
                    iteration,
                    "training loss or gradient is not finite".into(),
                    &history,
                ));
            }
            adam.step(&mut task.params_mut(), &grad_sum)?;
            task.after_step()?;
            iteration += 1;
            pending.0 += batch_loss;
            pending.1 += 1;
            if iteration.is_multiple_of(cfg.validate_every) {
                record(&task, iteration, &mut pending, &mut history)?;
            }
        }
    }
    if history.last().is_none_or(|r| r.iteration != iteration) {
        record(&task, iteration, &mut pending, &mut history)?;
    }
    let (best, best_iteration, best_val_loss) = best.expect("at least one validation recorded");
    Ok(TrainOutcome {
        best,
        best_iteration,
        best_val_loss,
        iterations: iteration,
        history,
    })
}
