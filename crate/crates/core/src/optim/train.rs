use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{adam_step, decayed_lr, AdamState, TrainConfig};
use crate::blocks::Session;
use crate::data::{one_hot, rotate_image, Label, LabeledImage, Split};
use crate::engine::{ops, Mode, Tensor};
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::rng::derive_seed;

/// Keeps the shuffle stream apart from the per-sample rotation streams.
const SHUFFLE_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,split,loss,accuracy";
}

impl fmt::Display for EpochMetrics {
    /// One `epoch,split,loss,accuracy` CSV row.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{}",
            self.epoch, self.split, self.loss, self.accuracy
        )
    }
}

/// Rotation applied to sample `index` in `epoch`; depends only on the key,
/// not on batch composition or thread scheduling.
pub fn augmentation_angle(config: &TrainConfig, epoch: usize, index: usize) -> f64 {
    if config.rotation_degrees == 0.0 {
        return 0.0;
    }
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, epoch as u64, index as u64]));
    rng.gen_range(-config.rotation_degrees..=config.rotation_degrees)
}

/// Sample visiting order for `epoch`.
pub fn epoch_order(config: &TrainConfig, epoch: usize, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, epoch as u64, SHUFFLE_STREAM]));
    order.shuffle(&mut rng);
    order
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}

/// One pass over `samples`: seeded shuffle, per-sample rotation, mini-batch
/// Adam updates with the decayed learning rate. Returns the sample-weighted
/// mean loss and the accuracy of the training-mode predictions.
pub fn train_epoch(
    model: &mut ModelGraph,
    samples: &[LabeledImage],
    config: &TrainConfig,
    state: &mut AdamState,
    epoch: usize,
) -> Result<EpochMetrics> {
    if samples.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    config.validate()?;
    let order = epoch_order(config, epoch, samples.len());
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    for chunk in order.chunks(config.batch_size) {
        let images = chunk
            .par_iter()
            .map(|&i| rotate_image(&samples[i].image, augmentation_angle(config, epoch, i)))
            .collect::<Result<Vec<_>>>()?;
        let batch = Tensor::stack(&images)?;
        let targets = Tensor::stack(
            &chunk
                .iter()
                .map(|&i| one_hot(samples[i].label))
                .collect::<Vec<_>>(),
        )?;
        model.check_input(&batch)?;

        let mut s = Session::new(model.params(), Mode::Train);
        let x = s.input(batch);
        let probs = model.forward_in(&mut s, x, None)?;
        let loss = s.tape_mut().bce_loss(probs, &targets)?;
        let loss_value = s.value(loss).data()[0];
        let predicted = s.value(probs).clone();
        let out = s.finish();
        let mut grads = out.tape.backward(loss)?;

        let params = model.params_mut();
        params.write_grads(&out.bindings, &mut grads);
        params.apply_stat_updates(out.stat_updates);
        let lr = decayed_lr(config, state.t);
        adam_step(params, state, lr)?;

        loss_sum += loss_value as f64 * chunk.len() as f64;
        correct += predicted
            .data()
            .chunks(Label::ALL.len())
            .zip(chunk)
            .filter(|(row, &i)| argmax(row) == samples[i].label.index())
            .count();
    }
    Ok(EpochMetrics {
        epoch,
        split: Split::Train,
        loss: loss_sum / samples.len() as f64,
        accuracy: correct as f64 / samples.len() as f64,
    })
}

/// Anything that maps an `N x 3 x S x S` batch to `N x 2` probabilities.
pub trait Classifier {
    fn classify(&self, batch: &Tensor) -> Result<Tensor>;
}

impl Classifier for ModelGraph {
    fn classify(&self, batch: &Tensor) -> Result<Tensor> {
        self.predict(batch)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    /// Class indices, one per sample, in input order.
    pub predicted: Vec<usize>,
    pub labels: Vec<usize>,
    /// Probability assigned to COVID.
    pub positive_scores: Vec<f32>,
}

impl Evaluation {
    pub fn metrics(&self, epoch: usize, split: Split) -> EpochMetrics {
        EpochMetrics {
            epoch,
            split,
            loss: self.loss,
            accuracy: self.accuracy,
        }
    }
}

/// Scores `samples` in order without augmentation.
pub fn evaluate(
    classifier: &impl Classifier,
    samples: &[LabeledImage],
    batch_size: usize,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation split".into()));
    }
    let mut eval = Evaluation {
        loss: 0.0,
        accuracy: 0.0,
        predicted: Vec::with_capacity(samples.len()),
        labels: Vec::with_capacity(samples.len()),
        positive_scores: Vec::with_capacity(samples.len()),
    };
    let mut loss_sum = 0.0f64;
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = Tensor::stack(&chunk.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
        let targets = Tensor::stack(&chunk.iter().map(|s| one_hot(s.label)).collect::<Vec<_>>())?;
        let probs = classifier.classify(&batch)?;
        loss_sum += ops::bce_loss(&probs, &targets)? as f64 * chunk.len() as f64;
        for (row, s) in probs.data().chunks(Label::ALL.len()).zip(chunk) {
            eval.predicted.push(argmax(row));
            eval.labels.push(s.label.index());
            eval.positive_scores.push(row[Label::Covid.index()]);
        }
    }
    let correct = eval
        .predicted
        .iter()
        .zip(&eval.labels)
        .filter(|(p, l)| p == l)
        .count();
    eval.loss = loss_sum / samples.len() as f64;
    eval.accuracy = correct as f64 / samples.len() as f64;
    Ok(eval)
}

/// Trains for `config.epochs` epochs, scoring `test` after each one. The
/// callback sees the train and test rows as they are produced.
pub fn fit(
    model: &mut ModelGraph,
    train: &[LabeledImage],
    test: &[LabeledImage],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    let mut state = AdamState::from_config(model.params(), config);
    let mut history = Vec::with_capacity(2 * config.epochs);
    for epoch in 0..config.epochs {
        let row = train_epoch(model, train, config, &mut state, epoch)?;
        on_epoch(&row);
        history.push(row);
        if !test.is_empty() {
            let row = evaluate(model, test, config.batch_size)?.metrics(epoch, Split::Test);
            on_epoch(&row);
            history.push(row);
        }
    }
    Ok(history)
}
