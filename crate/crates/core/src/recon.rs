//! Training-like data reconstruction: the inversion objective extended with
//! perturbation-robustness, image-prior, and gradient-norm terms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inversion::{
    check_pairing, check_weight, gradient_tensors, run_loop, sample_labels, InversionConfig, InversionRun,
    LossBreakdown, Objective, StepLog,
};
use crate::losses;
use crate::model::{Classifier, Generator, Mode};
use crate::optim::OptimState;
use crate::seed::Stream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconConfig {
    /// Shared inversion settings; its weights are α, β, γ, δ.
    pub inversion: InversionConfig,
    /// α′: KL on perturbed images.
    pub alpha_pert: f64,
    /// β′: cross-entropy on perturbed images.
    pub beta_pert: f64,
    /// η₁: total variation.
    pub eta_var: f64,
    /// η₂: out-of-range pixel penalty.
    pub eta_pix: f64,
    /// η₃: squared gradient norm of the true-label logits w.r.t. classifier weights.
    pub eta_grad: f64,
    /// L∞ radius of the perturbation.
    pub eps_pert: f64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        let mut inversion = InversionConfig {
            batch_size: 8,
            ..Default::default()
        };
        inversion.weights.gamma = 0.25;
        ReconConfig {
            inversion,
            alpha_pert: 1.0,
            beta_pert: 1.0,
            eta_var: 0.1,
            eta_pix: 1.0,
            eta_grad: 0.01,
            eps_pert: 0.05,
        }
    }
}

impl ReconConfig {
    /// Settings under which the objective reduces to the inversion loss.
    pub fn inversion_only(inversion: InversionConfig) -> Self {
        ReconConfig {
            inversion,
            alpha_pert: 0.0,
            beta_pert: 0.0,
            eta_var: 0.0,
            eta_pix: 0.0,
            eta_grad: 0.0,
            eps_pert: 0.0,
        }
    }

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
        self.inversion.collect_errors(errors);
        for (name, w) in [
            ("alpha_pert", self.alpha_pert),
            ("beta_pert", self.beta_pert),
            ("eta_var", self.eta_var),
            ("eta_pix", self.eta_pix),
            ("eta_grad", self.eta_grad),
        ] {
            check_weight(name, w, errors);
        }
        if !(0.0..=1.0).contains(&self.eps_pert) {
            errors.push(format!("eps_pert {} outside [0, 1]", self.eps_pert));
        }
    }
}

fn uniform_noise(shape: &[usize], eps: f64, rng: &mut Stream) -> Result<Tensor> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::Contract(format!("perturbation radius {eps} must be finite and ≥ 0")));
    }
    Ok(Tensor::from_fn(shape, |_| if eps > 0.0 { rng.random_range(-eps..=eps) } else { 0.0 }))
}

/// Add per-pixel uniform noise in `[−ε, ε]`, then clamp to `[0, 1]`.
pub fn linf_perturb(images: &Tensor, eps: f64, rng: &mut Stream) -> Result<Tensor> {
    let noise = uniform_noise(images.shape(), eps, rng)?;
    images.zip_map(&noise, "linf_perturb", |x, n| (x + n).clamp(0.0, 1.0))
}

/// Build the full reconstruction objective for a batch of images on `tape`.
///
/// `clf_params` must be trainable leaves when `eta_grad > 0` so that the
/// gradient-norm term can be formed; the caller never applies their gradients.
pub(crate) fn reconstruction_objective(
    tape: &Tape,
    images: Var,
    clf: &Classifier,
    clf_params: &[Var],
    labels: &[usize],
    cfg: &ReconConfig,
    rng: &mut Stream,
) -> Result<Objective> {
    let inv = &cfg.inversion;
    let w = &inv.weights;
    let m = clf.classes();
    let out = clf.forward(tape, clf_params, images)?;
    let target = losses::smoothed_targets(labels, m, inv.kl_smoothing)?;

    let noise = uniform_noise(&tape.shape(images), cfg.eps_pert, rng)?;
    let perturbed = tape.clamp(tape.add(images, tape.constant(noise))?, 0.0, 1.0);
    let pout = clf.forward(tape, clf_params, perturbed)?;

    let kl = losses::kl_loss(tape, tape.softmax(out.logits)?, &target)?;
    let kl_pert = losses::kl_loss(tape, tape.softmax(pout.logits)?, &target)?;
    let ce = losses::ce_loss(tape, out.logits, labels)?;
    let ce_pert = losses::ce_loss(tape, pout.logits, labels)?;
    let cosine = losses::cosine_diversity_loss(tape, out.features)?;
    let ortho = losses::ortho_loss(tape, out.features)?;
    let var = losses::tv_loss(tape, images)?;
    let pix = losses::pixel_loss(tape, images)?;

    let mut obj = Objective::new();
    obj.push(tape, "kl", w.alpha, kl)?;
    obj.push(tape, "kl_pert", cfg.alpha_pert, kl_pert)?;
    obj.push(tape, "ce", w.beta, ce)?;
    obj.push(tape, "ce_pert", cfg.beta_pert, ce_pert)?;
    obj.push(tape, "cosine", w.gamma, cosine)?;
    obj.push(tape, "ortho", w.delta, ortho)?;
    obj.push(tape, "var", cfg.eta_var, var)?;
    obj.push(tape, "pix", cfg.eta_pix, pix)?;
    if cfg.eta_grad > 0.0 {
        let b = labels.len();
        let mut pick = Tensor::zeros(&[b, m]);
        for (i, &y) in labels.iter().enumerate() {
            pick.data_mut()[i * m + y] = 1.0;
        }
        let true_logits = tape.sum(tape.mul(out.logits, tape.constant(pick))?);
        let grad = tape.grad_norm_sq(true_logits, clf_params)?;
        obj.push(tape, "grad", cfg.eta_grad, grad)?;
    }
    Ok(obj)
}

/// Evaluate the reconstruction objective on a fixed batch.
///
/// With every reconstruction-only weight at zero the total is bit-identical
/// to [`crate::inversion::inversion_loss`]. The gradient-norm term is only
/// reported when `eta_grad > 0`.
pub fn reconstruction_loss(
    images: &Tensor,
    clf: &Classifier,
    labels: &[usize],
    cfg: &ReconConfig,
    rng: &mut Stream,
) -> Result<LossBreakdown> {
    if !clf.is_frozen() {
        return Err(Error::Contract("classifier must be frozen during reconstruction".into()));
    }
    let tape = Tape::new();
    let params = clf.bind(&tape, cfg.eta_grad > 0.0);
    let x = tape.constant(images.clone());
    let obj = reconstruction_objective(&tape, x, clf, &params, labels, cfg, rng)?;
    obj.breakdown(&tape)
}

/// One generator update under the reconstruction objective.
pub fn reconstruction_step(
    gen: &mut Generator,
    state: &mut OptimState,
    clf: &Classifier,
    cfg: &ReconConfig,
    rng: &mut Stream,
) -> Result<LossBreakdown> {
    if !clf.is_frozen() {
        return Err(Error::Contract("classifier must be frozen during reconstruction".into()));
    }
    check_pairing(gen, clf)?;
    let labels = sample_labels(cfg.inversion.batch_size, gen.spec().classes, rng);
    let z = gen.sample_latent(labels.len(), rng);
    let conds = labels
        .iter()
        .map(|&l| gen.condition(l))
        .collect::<Result<Vec<_>>>()?;

    let tape = Tape::new();
    let gp = gen.bind(&tape, true);
    let cp = clf.bind(&tape, cfg.eta_grad > 0.0);
    let images = gen.forward(&tape, &gp, &z, &conds, Mode::Train, Some(rng))?;
    let obj = reconstruction_objective(&tape, images, clf, &cp, &labels, cfg, rng)?;
    let grads = gradient_tensors(&tape, obj.total()?, &gp, gen.params())?;
    state.step(gen.params_mut(), &grads)?;
    obj.breakdown(&tape)
}

/// Train `gen` under the reconstruction objective; same schedule and
/// evaluation as inversion training.
pub fn train_reconstructor(
    gen: &mut Generator,
    clf: &Classifier,
    cfg: &ReconConfig,
    rng: &mut Stream,
    on_step: impl FnMut(&StepLog),
) -> Result<InversionRun> {
    cfg.validate()?;
    let mut state = OptimState::new(cfg.inversion.optim);
    run_loop(gen, clf, &cfg.inversion, rng, on_step, |gen, rng| {
        reconstruction_step(gen, &mut state, clf, cfg, rng)
    })
}
