//! Training a conditioned generator to invert a frozen classifier.
//!
//! The objective is `α·KL + β·CE + γ·cosine + δ·ortho`: KL against softened
//! conditioning targets, cross-entropy against the conditioning labels, and
//! two diversity terms on the classifier's penultimate features of the
//! generated batch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses;
use crate::model::{argmax, Classifier, Generator, Mode};
use crate::optim::{OptimConfig, OptimState};
use crate::seed::Stream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for InversionWeights {
    fn default() -> Self {
        InversionWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.5,
            delta: 0.1,
        }
    }
}

impl InversionWeights {
    pub fn zero() -> Self {
        InversionWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            delta: 0.0,
        }
    }

    fn as_list(&self) -> [(&'static str, f64); 4] {
        [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub weights: InversionWeights,
    /// Mass `s` spread uniformly in the KL target `(1−s)·onehot + s/m`.
    pub kl_smoothing: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub optim: OptimConfig,
    /// Stop early once a periodic evaluation reaches this inversion accuracy.
    pub target_accuracy: Option<f64>,
    pub eval_every: usize,
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            weights: InversionWeights::default(),
            kl_smoothing: 0.1,
            batch_size: 32,
            steps: 1500,
            optim: OptimConfig::adam(2e-3),
            target_accuracy: None,
            eval_every: 100,
            eval_samples: 300,
            seed: 0,
        }
    }
}

pub(crate) fn check_weight(name: &str, w: f64, errors: &mut Vec<String>) {
    if !w.is_finite() || w < 0.0 {
        errors.push(format!("weight {name} = {w} must be finite and non-negative"));
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        self.collect_errors(&mut errors);
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Contract(errors.join("; ")))
        }
    }

    pub(crate) fn collect_errors(&self, errors: &mut Vec<String>) {
        for (name, w) in self.weights.as_list() {
            check_weight(name, w, errors);
        }
        if !(0.0..=1.0).contains(&self.kl_smoothing) {
            errors.push(format!("kl_smoothing {} outside [0, 1]", self.kl_smoothing));
        }
        if self.batch_size < 2 {
            errors.push(format!("batch size {} < 2; pairwise terms need pairs", self.batch_size));
        }
        if self.eval_samples == 0 {
            errors.push("eval_samples must be positive".into());
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub name: String,
    pub weight: f64,
    pub value: f64,
}

/// Raw per-term values, their weights, and the weighted total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub terms: Vec<LossTerm>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }

    /// `Σ weight·value`, recomputed from the stored terms.
    pub fn weighted_sum(&self) -> f64 {
        self.terms.iter().map(|t| t.weight * t.value).sum()
    }
}

/// Graph handles of an objective together with its breakdown.
pub(crate) struct Objective {
    total: Option<Var>,
    pub terms: Vec<(String, f64, Var)>,
}

impl Objective {
    pub fn new() -> Self {
        Objective {
            total: None,
            terms: Vec::new(),
        }
    }

    pub fn total(&self) -> Result<Var> {
        self.total
            .ok_or_else(|| Error::Contract("objective has no terms".into()))
    }

    /// Append `weight·term`. Zero-weighted terms are logged but left out of the total.
    pub fn push(&mut self, tape: &Tape, name: &str, weight: f64, term: Var) -> Result<()> {
        match self.total {
            None => self.total = Some(tape.scale(term, weight)),
            Some(t) if weight != 0.0 => {
                let w = tape.scale(term, weight);
                self.total = Some(tape.add(t, w)?);
            }
            Some(_) => {}
        }
        self.terms.push((name.to_owned(), weight, term));
        Ok(())
    }

    pub fn breakdown(&self, tape: &Tape) -> Result<LossBreakdown> {
        let terms = self
            .terms
            .iter()
            .map(|(name, weight, v)| {
                Ok(LossTerm {
                    name: name.clone(),
                    weight: *weight,
                    value: tape.item(*v)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LossBreakdown {
            terms,
            total: tape.item(self.total()?)?,
        })
    }
}

/// Build the inversion objective for a batch of generated images.
pub(crate) fn inversion_objective(
    tape: &Tape,
    images: Var,
    clf: &Classifier,
    clf_params: &[Var],
    labels: &[usize],
    weights: &InversionWeights,
    kl_smoothing: f64,
) -> Result<Objective> {
    let out = clf.forward(tape, clf_params, images)?;
    let probs = tape.softmax(out.logits)?;
    let target = losses::smoothed_targets(labels, clf.classes(), kl_smoothing)?;
    let kl = losses::kl_loss(tape, probs, &target)?;
    let ce = losses::ce_loss(tape, out.logits, labels)?;
    let cosine = losses::cosine_diversity_loss(tape, out.features)?;
    let ortho = losses::ortho_loss(tape, out.features)?;
    let mut obj = Objective::new();
    obj.push(tape, "kl", weights.alpha, kl)?;
    obj.push(tape, "ce", weights.beta, ce)?;
    obj.push(tape, "cosine", weights.gamma, cosine)?;
    obj.push(tape, "ortho", weights.delta, ortho)?;
    Ok(obj)
}

/// Evaluate the inversion objective on a fixed image batch.
pub fn inversion_loss(
    images: &Tensor,
    clf: &Classifier,
    labels: &[usize],
    cfg: &InversionConfig,
) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let params = clf.bind(&tape, false);
    let x = tape.constant(images.clone());
    let obj = inversion_objective(&tape, x, clf, &params, labels, &cfg.weights, cfg.kl_smoothing)?;
    obj.breakdown(&tape)
}

pub(crate) fn sample_labels(n: usize, classes: usize, rng: &mut Stream) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

pub(crate) fn check_pairing(gen: &Generator, clf: &Classifier) -> Result<()> {
    let g = gen.spec();
    if g.output != clf.spec().input {
        return Err(Error::dim(
            "inversion",
            format!("generator emits {:?} but classifier expects {:?}", g.output, clf.spec().input),
        ));
    }
    if g.classes > clf.classes() {
        return Err(Error::Contract(format!(
            "generator conditions on {} labels but classifier has {} outputs",
            g.classes,
            clf.classes()
        )));
    }
    Ok(())
}

pub(crate) fn gradient_tensors(tape: &Tape, loss: Var, params: &[Var], shapes: &[crate::model::Param]) -> Result<Vec<Tensor>> {
    let grads = tape.gradients(loss, params, false)?;
    Ok(grads
        .into_iter()
        .zip(shapes)
        .map(|(g, p)| match g {
            Some(g) => (*tape.value(g)).clone(),
            None => Tensor::zeros(p.shape()),
        })
        .collect())
}

/// One generator update against a frozen classifier.
pub fn inversion_step(
    gen: &mut Generator,
    state: &mut OptimState,
    clf: &Classifier,
    cfg: &InversionConfig,
    rng: &mut Stream,
) -> Result<LossBreakdown> {
    if !clf.is_frozen() {
        return Err(Error::Contract("classifier must be frozen during inversion".into()));
    }
    check_pairing(gen, clf)?;
    let labels = sample_labels(cfg.batch_size, gen.spec().classes, rng);
    let z = gen.sample_latent(labels.len(), rng);
    let conds = labels
        .iter()
        .map(|&l| gen.condition(l))
        .collect::<Result<Vec<_>>>()?;

    let tape = Tape::new();
    let gp = gen.bind(&tape, true);
    let cp = clf.bind(&tape, false);
    let images = gen.forward(&tape, &gp, &z, &conds, Mode::Train, Some(rng))?;
    let obj = inversion_objective(&tape, images, clf, &cp, &labels, &cfg.weights, cfg.kl_smoothing)?;
    let grads = gradient_tensors(&tape, obj.total()?, &gp, gen.params())?;
    state.step(gen.params_mut(), &grads)?;
    obj.breakdown(&tape)
}

/// Fraction of generated samples whose classifier argmax equals the
/// conditioning label. Labels cycle through the generator's classes;
/// samples are drawn with dropout active, as during training.
pub fn inversion_accuracy(gen: &Generator, clf: &Classifier, n_samples: usize, rng: &mut Stream) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::Contract("n_samples must be at least 1".into()));
    }
    check_pairing(gen, clf)?;
    const CHUNK: usize = 256;
    let classes = gen.spec().classes;
    let mut hits = 0usize;
    let mut done = 0usize;
    while done < n_samples {
        let labels: Vec<usize> = (done..(done + CHUNK).min(n_samples)).map(|i| i % classes).collect();
        let images = gen.generate(&labels, Mode::Train, rng)?;
        let probs = clf.predict_probs(&images)?;
        hits += probs
            .data()
            .chunks(clf.classes())
            .zip(&labels)
            .filter(|(p, &l)| argmax(p) == l)
            .count();
        done += labels.len();
    }
    Ok(hits as f64 / n_samples as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub breakdown: LossBreakdown,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct InversionRun {
    pub history: Vec<StepLog>,
    pub final_accuracy: f64,
    pub steps_taken: usize,
}

/// Train `gen` against `clf` for up to `cfg.steps` updates, evaluating
/// inversion accuracy every `cfg.eval_every` steps and at the end.
pub fn train_generator(
    gen: &mut Generator,
    clf: &Classifier,
    cfg: &InversionConfig,
    rng: &mut Stream,
    on_step: impl FnMut(&StepLog),
) -> Result<InversionRun> {
    cfg.validate()?;
    let mut state = OptimState::new(cfg.optim);
    run_loop(gen, clf, cfg, rng, on_step, |gen, rng| {
        inversion_step(gen, &mut state, clf, cfg, rng)
    })
}

pub(crate) fn run_loop(
    gen: &mut Generator,
    clf: &Classifier,
    cfg: &InversionConfig,
    rng: &mut Stream,
    mut on_step: impl FnMut(&StepLog),
    mut step_fn: impl FnMut(&mut Generator, &mut Stream) -> Result<LossBreakdown>,
) -> Result<InversionRun> {
    let mut history = Vec::with_capacity(cfg.steps);
    let mut final_accuracy = None;
    let mut steps_taken = 0;
    for step in 0..cfg.steps {
        let breakdown = step_fn(gen, rng)?;
        if !breakdown.total.is_finite() {
            return Err(Error::Divergence(format!("non-finite generator loss at step {step}")));
        }
        steps_taken = step + 1;
        let evaluate = cfg.eval_every > 0 && steps_taken % cfg.eval_every == 0 || steps_taken == cfg.steps;
        let accuracy = if evaluate {
            Some(inversion_accuracy(gen, clf, cfg.eval_samples, rng)?)
        } else {
            None
        };
        let log = StepLog {
            step,
            breakdown,
            accuracy,
        };
        on_step(&log);
        history.push(log);
        if let Some(acc) = accuracy {
            final_accuracy = Some(acc);
            if cfg.target_accuracy.is_some_and(|t| acc >= t) {
                break;
            }
        }
    }
    let final_accuracy = match final_accuracy {
        Some(a) => a,
        None => inversion_accuracy(gen, clf, cfg.eval_samples, rng)?,
    };
    Ok(InversionRun {
        history,
        final_accuracy,
        steps_taken,
    })
}
