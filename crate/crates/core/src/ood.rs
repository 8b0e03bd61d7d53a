//! Out-of-distribution rejection through an extra garbage class.
//!
//! A classifier with `n + 1` outputs is trained on the `n` in-distribution
//! classes plus a garbage class that starts out as Gaussian noise. Each cycle
//! inverts the current classifier, relabels the inverted samples as garbage,
//! and retrains, so the garbage class gradually absorbs inputs that merely
//! look in-distribution to the network.

use std::collections::{BTreeMap, VecDeque};

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inversion::{train_generator, InversionConfig};
use crate::model::{argmax, Classifier, Generator, Mode};
use crate::optim::OptimState;
use crate::seed::{self, Stream};
use crate::tensor::Tensor;
use crate::training::{accuracy, train_epoch, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Noise,
    Inverted { cycle: usize },
}

/// Images of the garbage class. The initial noise block is never evicted;
/// inverted samples form a ring buffer that drops the oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct GarbageSet {
    label: usize,
    image_shape: [usize; 3],
    capacity: usize,
    noise: Vec<Vec<f64>>,
    inverted: VecDeque<(Vec<f64>, usize)>,
}

/// `count` images with pixels drawn from N(0.5, 0.25²), clamped to `[0, 1]`.
pub fn noise_images(count: usize, image_shape: [usize; 3], rng: &mut Stream) -> Tensor {
    let dist = Normal::new(0.5f64, 0.25).expect("valid normal");
    let [c, h, w] = image_shape;
    Tensor::from_fn(&[count, c, h, w], |_| dist.sample(rng).clamp(0.0, 1.0))
}

/// A garbage set seeded with [`noise_images`].
pub fn init_garbage(
    count: usize,
    image_shape: [usize; 3],
    label: usize,
    capacity: usize,
    rng: &mut Stream,
) -> Result<GarbageSet> {
    if count == 0 {
        return Err(Error::Contract("garbage set needs at least one noise image".into()));
    }
    if capacity < count {
        return Err(Error::Contract(format!(
            "capacity {capacity} cannot hold {count} noise images"
        )));
    }
    let per: usize = image_shape.iter().product();
    let noise = noise_images(count, image_shape, rng)
        .into_data()
        .chunks(per)
        .map(<[f64]>::to_vec)
        .collect();
    Ok(GarbageSet {
        label,
        image_shape,
        capacity,
        noise,
        inverted: VecDeque::new(),
    })
}

impl GarbageSet {
    pub fn label(&self) -> usize {
        self.label
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.noise.len() + self.inverted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn noise_count(&self) -> usize {
        self.noise.len()
    }

    /// Append inverted samples from `cycle`, evicting the oldest inverted
    /// samples when over capacity.
    pub fn push_inverted(&mut self, images: &Tensor, cycle: usize) -> Result<()> {
        let s = images.shape();
        if s.len() != 4 || s[1..] != self.image_shape {
            return Err(Error::dim(
                "garbage_push",
                format!("images {s:?} do not match {:?}", self.image_shape),
            ));
        }
        for row in images.data().chunks(images.len() / s[0]) {
            self.inverted.push_back((row.to_vec(), cycle));
        }
        while self.len() > self.capacity {
            self.inverted.pop_front();
        }
        Ok(())
    }

    pub fn provenance(&self) -> Vec<Provenance> {
        std::iter::repeat_n(Provenance::Noise, self.noise.len())
            .chain(self.inverted.iter().map(|&(_, cycle)| Provenance::Inverted { cycle }))
            .collect()
    }

    /// All images, noise block first, as `[len × C × H × W]`.
    pub fn images(&self) -> Tensor {
        let [c, h, w] = self.image_shape;
        let data: Vec<f64> = self
            .noise
            .iter()
            .chain(self.inverted.iter().map(|(img, _)| img))
            .flatten()
            .copied()
            .collect();
        Tensor::new(vec![self.len(), c, h, w], data).expect("garbage images are consistent")
    }

    pub fn labels(&self) -> Vec<usize> {
        vec![self.label; self.len()]
    }
}

/// Inverse-frequency weights normalized to mean 1.
pub fn class_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::Contract("no classes to weight".into()));
    }
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Domain(format!("class {i} has no samples")));
    }
    let min = *counts.iter().min().expect("nonempty") as f64;
    let inv: Vec<f64> = counts.iter().map(|&c| min / c as f64).collect();
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    Ok(inv.iter().map(|w| w / mean).collect())
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.len() < 2 {
        return Err(Error::Contract(format!("need at least 2 classes, got {}", p.len())));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Contract(format!("not a probability distribution (sum {sum})")));
    }
    Ok(())
}

/// Numerator and denominator of the uncertainty score: the squared distance
/// of `p` from uniform and that of the one-hot vector at `argmax p`.
pub fn ue_terms(p: &[f64]) -> Result<(f64, f64)> {
    check_distribution(p)?;
    let m = p.len() as f64;
    let u = 1.0 / m;
    let k = argmax(p);
    let num = p.iter().map(|&v| (v - u) * (v - u)).sum();
    let den = (0..p.len())
        .map(|i| {
            let d = if i == k { 1.0 } else { 0.0 } - u;
            d * d
        })
        .sum();
    Ok((num, den))
}

/// Uncertainty in `[0, 1]`: 0 for a one-hot prediction, 1 for uniform.
pub fn uncertainty(p: &[f64]) -> Result<f64> {
    let (num, den) = ue_terms(p)?;
    Ok((1.0 - num / den).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub index: usize,
    pub is_ood: bool,
    pub confidence: f64,
    pub ue: f64,
}

fn prediction(probs: Vec<f64>) -> Result<Prediction> {
    let index = argmax(&probs);
    let ue = uncertainty(&probs)?;
    Ok(Prediction {
        is_ood: index == probs.len() - 1,
        confidence: probs[index],
        index,
        ue,
        probs,
    })
}

/// Predictions for a batch `[B × C × H × W]`; the last class is garbage.
pub fn ood_predict_batch(clf: &Classifier, images: &Tensor) -> Result<Vec<Prediction>> {
    let probs = clf.predict_probs(images)?;
    probs
        .data()
        .chunks(clf.classes())
        .map(|p| prediction(p.to_vec()))
        .collect()
}

/// Prediction for one image given as `[C, H, W]` or `[1, C, H, W]`.
pub fn ood_predict(clf: &Classifier, image: &Tensor) -> Result<Prediction> {
    let [c, h, w] = clf.spec().input;
    let single = match image.shape() {
        [a, b, d] if [*a, *b, *d] == [c, h, w] => image.clone().reshape(&[1, c, h, w])?,
        [1, a, b, d] if [*a, *b, *d] == [c, h, w] => image.clone(),
        s => {
            return Err(Error::dim(
                "ood_predict",
                format!("image {s:?} does not match classifier input {:?}", [c, h, w]),
            ))
        }
    };
    let mut preds = ood_predict_batch(clf, &single)?;
    Ok(preds.remove(0))
}

/// Separation between in-distribution confidence and misrouted OOD confidence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    /// Lowest confidence among correctly classified ID samples.
    pub min_id_confidence: Option<f64>,
    /// Highest confidence among OOD samples assigned to a non-garbage class.
    pub max_ood_confidence: Option<f64>,
    /// `min_id_confidence − max_ood_confidence`; `+∞` when no OOD sample is misrouted.
    pub gap: f64,
    /// Set when no OOD sample was misrouted and `gap` is the `+∞` sentinel.
    pub no_misrouted_ood: bool,
    pub id_correct: usize,
    pub id_total: usize,
    pub ood_misrouted: usize,
    pub ood_total: usize,
    /// Misrouted OOD samples at least as confident as the least confident correct ID sample.
    pub violations: usize,
}

pub fn threshold_from_predictions(id: &[Prediction], id_labels: &[usize], ood: &[Prediction]) -> Result<ThresholdReport> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::Contract("threshold report needs nonempty ID and OOD sets".into()));
    }
    if id.len() != id_labels.len() {
        return Err(Error::dim("threshold_report", format!("{} predictions for {} labels", id.len(), id_labels.len())));
    }
    let correct: Vec<f64> = id
        .iter()
        .zip(id_labels)
        .filter(|(p, &l)| p.index == l)
        .map(|(p, _)| p.confidence)
        .collect();
    let misrouted: Vec<f64> = ood.iter().filter(|p| !p.is_ood).map(|p| p.confidence).collect();
    let min_id = correct.iter().copied().reduce(f64::min);
    let max_ood = misrouted.iter().copied().reduce(f64::max);
    let gap = match (min_id, max_ood) {
        (_, None) => f64::INFINITY,
        (Some(a), Some(b)) => a - b,
        (None, Some(_)) => f64::NEG_INFINITY,
    };
    let violations = match min_id {
        Some(t) => misrouted.iter().filter(|&&c| c >= t).count(),
        None => misrouted.len(),
    };
    Ok(ThresholdReport {
        min_id_confidence: min_id,
        max_ood_confidence: max_ood,
        gap,
        no_misrouted_ood: max_ood.is_none(),
        id_correct: correct.len(),
        id_total: id.len(),
        ood_misrouted: misrouted.len(),
        ood_total: ood.len(),
        violations,
    })
}

pub fn threshold_report(clf: &Classifier, id_set: &Dataset, ood_images: &Tensor) -> Result<ThresholdReport> {
    let id = ood_predict_batch(clf, id_set.images())?;
    let ood = ood_predict_batch(clf, ood_images)?;
    threshold_from_predictions(&id, id_set.labels(), &ood)
}

/// Fraction of `images` assigned to the garbage class.
pub fn garbage_rate(clf: &Classifier, images: &Tensor) -> Result<f64> {
    let preds = ood_predict_batch(clf, images)?;
    Ok(preds.iter().filter(|p| p.is_ood).count() as f64 / preds.len() as f64)
}

/// A model together with the name of the dataset it was trained on.
pub struct GridModel<'a> {
    pub trained_on: &'a str,
    pub model: &'a Classifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    /// Row-major; row `i` is model `i`, column `j` is dataset `j`.
    pub values: Vec<f64>,
}

impl AccuracyMatrix {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.columns.len() + col]
    }
}

/// Diagonal cells: ID test accuracy. Off-diagonal cells: fraction of the
/// foreign dataset routed to the garbage class.
pub fn evaluate_grid(models: &[GridModel<'_>], datasets: &[&Dataset]) -> Result<AccuracyMatrix> {
    let mut missing = Vec::new();
    for m in models {
        if !datasets.iter().any(|d| d.name() == m.trained_on) {
            missing.push(format!("no dataset named '{}' for its model", m.trained_on));
        }
    }
    if !missing.is_empty() {
        return Err(Error::Config(missing));
    }
    let cols = datasets.len();
    let values = (0..models.len() * cols)
        .into_par_iter()
        .map(|cell| {
            let (m, d) = (&models[cell / cols], datasets[cell % cols]);
            if d.name() == m.trained_on {
                let preds = ood_predict_batch(m.model, d.images())?;
                let hits = preds.iter().zip(d.labels()).filter(|(p, &l)| p.index == l).count();
                Ok(hits as f64 / d.len() as f64)
            } else {
                garbage_rate(m.model, d.images())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AccuracyMatrix {
        rows: models.iter().map(|m| m.trained_on.to_owned()).collect(),
        columns: datasets.iter().map(|d| d.name().to_owned()).collect(),
        values,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodConfig {
    /// Train → invert → exclude cycles after the initial noise-only training.
    pub cycles: usize,
    /// Noise images in the initial garbage set; defaults to one ID class's count.
    pub init_garbage: Option<usize>,
    /// Inverted samples added per cycle; defaults to one ID class's count.
    pub budget: Option<usize>,
    /// Garbage capacity as a multiple of the ID training-set size.
    pub capacity_factor: usize,
    pub initial_epochs: usize,
    pub cycle_epochs: usize,
    pub train: TrainConfig,
    pub inversion: InversionConfig,
    /// Cycles exempt from the divergence check.
    pub warmup_cycles: usize,
    pub seed: u64,
}

impl Default for OodConfig {
    fn default() -> Self {
        OodConfig {
            cycles: 5,
            init_garbage: None,
            budget: None,
            capacity_factor: 4,
            initial_epochs: 10,
            cycle_epochs: 5,
            train: TrainConfig::default(),
            inversion: InversionConfig {
                steps: 300,
                eval_every: 0,
                ..Default::default()
            },
            warmup_cycles: 1,
            seed: 0,
        }
    }
}

/// Held-out data watched during the cycle.
#[derive(Default)]
pub struct OodMonitor<'a> {
    pub id_test: Option<&'a Dataset>,
    /// Named OOD probe sets whose garbage-routing rate is logged every cycle.
    pub probes: Vec<(&'a str, &'a Tensor)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycle: usize,
    pub id_train_accuracy: f64,
    pub id_test_accuracy: Option<f64>,
    /// Inversion accuracy of this cycle's generator (absent for the initial training).
    pub inversion_accuracy: Option<f64>,
    pub garbage_size: usize,
    /// Mean uncertainty of this cycle's inverted samples under the classifier they inverted.
    pub mean_inverted_ue: Option<f64>,
    pub class_weights: Vec<f64>,
    pub routing: BTreeMap<String, f64>,
    /// Test (or train) ID set against all probes combined.
    pub threshold: Option<ThresholdReport>,
}

pub struct OodOutcome {
    pub classifier: Classifier,
    pub reports: Vec<CycleReport>,
    pub garbage: GarbageSet,
    /// Inverted samples of each cycle, in cycle order.
    pub inverted: Vec<Tensor>,
}

fn monitor_report(
    clf: &Classifier,
    cycle: usize,
    train: &Dataset,
    monitor: &OodMonitor<'_>,
    garbage: &GarbageSet,
    weights: Vec<f64>,
) -> Result<CycleReport> {
    let id_train_accuracy = accuracy(clf, train.images(), train.labels())?;
    let id_test_accuracy = monitor
        .id_test
        .map(|t| accuracy(clf, t.images(), t.labels()))
        .transpose()?;
    let mut routing = BTreeMap::new();
    for (name, probes) in &monitor.probes {
        routing.insert((*name).to_owned(), garbage_rate(clf, probes)?);
    }
    let threshold = if monitor.probes.is_empty() {
        None
    } else {
        let all: Vec<&Tensor> = monitor.probes.iter().map(|(_, t)| *t).collect();
        let probes = Tensor::concat_rows(&all)?;
        Some(threshold_report(clf, monitor.id_test.unwrap_or(train), &probes)?)
    };
    Ok(CycleReport {
        cycle,
        id_train_accuracy,
        id_test_accuracy,
        inversion_accuracy: None,
        garbage_size: garbage.len(),
        mean_inverted_ue: None,
        class_weights: weights,
        routing,
        threshold,
    })
}

fn train_block(
    clf: &mut Classifier,
    state: &mut OptimState,
    train: &Dataset,
    garbage: &GarbageSet,
    epochs: usize,
    batch_size: usize,
    rng: &mut Stream,
) -> Result<Vec<f64>> {
    let gi = garbage.images();
    let images = Tensor::concat_rows(&[train.images(), &gi])?;
    let mut labels = train.labels().to_vec();
    labels.extend(garbage.labels());
    let mut counts = train.class_counts();
    counts.push(garbage.len());
    let weights = class_weights(&counts)?;
    for _ in 0..epochs {
        train_epoch(clf, state, &images, &labels, &weights, batch_size, rng)?;
    }
    Ok(weights)
}

/// Run the train → invert → exclude cycle.
///
/// The classifier is first trained on `train` plus a noise-only garbage set
/// (reported as cycle 0). Each later cycle trains a fresh generator from
/// `gen_factory` against the current classifier over all `n + 1` labels,
/// samples `budget` images from it with dropout active, adds them to the
/// garbage set, and continues training the classifier.
pub fn ood_training_cycle(
    mut clf: Classifier,
    mut gen_factory: impl FnMut(usize, &mut Stream) -> Result<Generator>,
    train: &Dataset,
    monitor: &OodMonitor<'_>,
    cfg: &OodConfig,
    mut on_cycle: impl FnMut(&CycleReport, Option<&Tensor>),
) -> Result<OodOutcome> {
    let n = train.classes();
    if clf.classes() != n + 1 {
        return Err(Error::Contract(format!(
            "classifier has {} outputs; {n} ID classes need {}",
            clf.classes(),
            n + 1
        )));
    }
    if clf.spec().input != train.image_shape() {
        return Err(Error::dim(
            "ood_training_cycle",
            format!("classifier input {:?} vs data {:?}", clf.spec().input, train.image_shape()),
        ));
    }
    clf.unfreeze();
    let per_class = (train.len() / n).max(1);
    let init = cfg.init_garbage.unwrap_or(per_class);
    let budget = cfg.budget.unwrap_or(per_class);
    let capacity = (cfg.capacity_factor * train.len()).max(init);
    let mut garbage = init_garbage(init, train.image_shape(), n, capacity, &mut seed::stream(cfg.seed, "ood/garbage"))?;
    let mut train_rng = seed::stream(cfg.seed, "ood/train");
    let mut state = OptimState::new(cfg.train.optim);
    let divergence_floor = 1.0 / (n + 1) as f64 + 0.05;

    let weights = train_block(&mut clf, &mut state, train, &garbage, cfg.initial_epochs, cfg.train.batch_size, &mut train_rng)?;
    let report = monitor_report(&clf, 0, train, monitor, &garbage, weights)?;
    on_cycle(&report, None);
    let mut reports = vec![report];
    let mut inverted = Vec::new();

    for cycle in 1..=cfg.cycles {
        let mut inv_rng = seed::stream(cfg.seed, &format!("ood/invert/{cycle}"));
        let mut gen = gen_factory(cycle, &mut inv_rng)?;
        if gen.spec().classes != n + 1 {
            return Err(Error::Contract(format!(
                "generator conditions on {} labels, expected {}",
                gen.spec().classes,
                n + 1
            )));
        }
        clf.freeze();
        let run = train_generator(&mut gen, &clf, &cfg.inversion, &mut inv_rng, |_| {})?;
        let labels: Vec<usize> = (0..budget).map(|i| i % (n + 1)).collect();
        let samples = gen.generate(&labels, Mode::Train, &mut seed::stream(cfg.seed, &format!("ood/sample/{cycle}")))?;
        let preds = ood_predict_batch(&clf, &samples)?;
        let mean_ue = preds.iter().map(|p| p.ue).sum::<f64>() / preds.len() as f64;
        clf.unfreeze();

        garbage.push_inverted(&samples, cycle)?;
        let weights = train_block(&mut clf, &mut state, train, &garbage, cfg.cycle_epochs, cfg.train.batch_size, &mut train_rng)?;
        let mut report = monitor_report(&clf, cycle, train, monitor, &garbage, weights)?;
        report.inversion_accuracy = Some(run.final_accuracy);
        report.mean_inverted_ue = Some(mean_ue);
        on_cycle(&report, Some(&samples));
        let diverged = cycle >= cfg.warmup_cycles && report.id_train_accuracy < divergence_floor;
        reports.push(report);
        inverted.push(samples);
        if diverged {
            let last = reports.last().expect("just pushed");
            return Err(Error::Divergence(format!(
                "ID train accuracy {:.4} fell below {divergence_floor:.4} at cycle {cycle}; last report: {}",
                last.id_train_accuracy,
                serde_json::to_string(last).unwrap_or_default()
            )));
        }
    }
    Ok(OodOutcome {
        classifier: clf,
        reports,
        garbage,
        inverted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_hand_cases() {
        assert_eq!(class_weights(&[5, 5, 5]).unwrap(), vec![1.0; 3]);
        let w = class_weights(&[900, 100]).unwrap();
        assert!((w[0] - 0.2).abs() < 1e-12 && (w[1] - 1.8).abs() < 1e-12);
        for (a, b) in class_weights(&[9000, 1000]).unwrap().iter().zip(&w) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(class_weights(&[3, 0]), Err(Error::Domain(_))));
    }

    #[test]
    fn ue_hand_cases() {
        assert_eq!(uncertainty(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(uncertainty(&[0.25; 4]).unwrap(), 1.0);
        assert!((uncertainty(&[0.75, 0.25]).unwrap() - 0.75).abs() < 1e-12);
        assert!(matches!(uncertainty(&[0.5, 0.6]), Err(Error::Contract(_))));
    }

    #[test]
    fn garbage_capacity_keeps_noise() {
        let mut g = init_garbage(3, [1, 2, 2], 4, 5, &mut seed::from_seed(0)).unwrap();
        assert!(g.images().data().iter().all(|p| (0.0..=1.0).contains(p)));
        let first = Tensor::full(&[2, 1, 2, 2], 0.1);
        let second = Tensor::full(&[2, 1, 2, 2], 0.9);
        g.push_inverted(&first, 1).unwrap();
        g.push_inverted(&second, 2).unwrap();
        assert_eq!(g.len(), 5);
        assert_eq!(g.noise_count(), 3);
        assert_eq!(
            g.provenance()[3..],
            [Provenance::Inverted { cycle: 2 }, Provenance::Inverted { cycle: 2 }]
        );
        assert!(g.labels().iter().all(|&l| l == 4));
        assert!(init_garbage(0, [1, 2, 2], 1, 4, &mut seed::from_seed(0)).is_err());
    }

    #[test]
    fn threshold_toy_fixture() {
        let p = |probs: Vec<f64>| prediction(probs).unwrap();
        let id = vec![p(vec![0.6, 0.3, 0.1]), p(vec![0.1, 0.8, 0.1])];
        let ood = vec![p(vec![0.9, 0.05, 0.05]), p(vec![0.1, 0.1, 0.8])];
        let r = threshold_from_predictions(&id, &[0, 1], &ood).unwrap();
        assert!((r.gap + 0.3).abs() < 1e-12);
        assert_eq!(r.violations, 1);
        let routed = vec![p(vec![0.1, 0.1, 0.8])];
        let r = threshold_from_predictions(&id, &[0, 1], &routed).unwrap();
        assert!(r.no_misrouted_ood && r.gap == f64::INFINITY && r.max_ood_confidence.is_none());
    }
}
