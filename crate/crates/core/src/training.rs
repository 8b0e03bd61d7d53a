//! Minibatch classifier training with (optionally weighted) cross-entropy.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inversion::gradient_tensors;
use crate::losses;
use crate::model::{argmax, Classifier};
use crate::optim::{OptimConfig, OptimState};
use crate::seed::Stream;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            optim: OptimConfig::adam(1e-3),
        }
    }
}

/// One pass over `images` in shuffled minibatches. Returns the mean batch
/// loss; a non-finite batch loss is a divergence error.
pub fn train_epoch(
    clf: &mut Classifier,
    state: &mut OptimState,
    images: &Tensor,
    labels: &[usize],
    class_weights: &[f64],
    batch_size: usize,
    rng: &mut Stream,
) -> Result<f64> {
    if clf.is_frozen() {
        return Err(Error::Contract("cannot train a frozen classifier".into()));
    }
    let n = labels.len();
    if images.shape().first() != Some(&n) || n == 0 {
        return Err(Error::dim(
            "train_epoch",
            format!("{n} labels for images {:?}", images.shape()),
        ));
    }
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in order.chunks(batch_size) {
        let x = images.select_rows(chunk)?;
        let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let tape = Tape::new();
        let params = clf.bind(&tape, true);
        let xv = tape.constant(x);
        let out = clf.forward(&tape, &params, xv)?;
        let loss = losses::weighted_ce_loss(&tape, out.logits, &y, class_weights)?;
        let value = tape.item(loss)?;
        if !value.is_finite() {
            return Err(Error::Divergence(format!("non-finite classifier loss in batch {batches}")));
        }
        let grads = gradient_tensors(&tape, loss, &params, clf.params())?;
        state.step(clf.params_mut(), &grads)?;
        total += value;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Predicted class (argmax, lowest index on ties) per image.
pub fn predict(clf: &Classifier, images: &Tensor) -> Result<Vec<usize>> {
    let probs = clf.predict_probs(images)?;
    Ok(probs.data().chunks(clf.classes()).map(argmax).collect())
}

/// Fraction of images whose prediction equals the label.
pub fn accuracy(clf: &Classifier, images: &Tensor, labels: &[usize]) -> Result<f64> {
    let pred = predict(clf, images)?;
    if pred.len() != labels.len() {
        return Err(Error::dim("accuracy", format!("{} predictions for {} labels", pred.len(), labels.len())));
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Fraction of images predicted as `class`.
pub fn routed_fraction(clf: &Classifier, images: &Tensor, class: usize) -> Result<f64> {
    let pred = predict(clf, images)?;
    Ok(pred.iter().filter(|&&p| p == class).count() as f64 / pred.len() as f64)
}

/// Train for `cfg.epochs` epochs with unit class weights, reporting each epoch's mean loss.
pub fn fit(
    clf: &mut Classifier,
    images: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    rng: &mut Stream,
    mut on_epoch: impl FnMut(usize, f64, &Classifier) -> Result<()>,
) -> Result<OptimState> {
    let mut state = OptimState::new(cfg.optim);
    let weights = vec![1.0; clf.classes()];
    for epoch in 0..cfg.epochs {
        let loss = train_epoch(clf, &mut state, images, labels, &weights, cfg.batch_size, rng)?;
        on_epoch(epoch, loss, clf)?;
    }
    Ok(state)
}
