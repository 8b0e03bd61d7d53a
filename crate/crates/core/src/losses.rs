//! Loss terms of the inversion and reconstruction objectives, built on the tape.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Floor applied inside logarithms and to row norms.
pub const EPS: f64 = 1e-8;

fn rows_cols(tape: &Tape, v: Var, op: &'static str) -> Result<(usize, usize)> {
    let s = tape.shape(v);
    if s.len() != 2 {
        return Err(Error::dim(op, format!("expected [B × d], got {s:?}")));
    }
    Ok((s[0], s[1]))
}

fn check_distributions(t: &Tensor, what: &str) -> Result<()> {
    let m = t.shape()[1];
    for (i, row) in t.data().chunks(m).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-3 || row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::Contract(format!(
                "{what} row {i} is not a distribution (sum {s})"
            )));
        }
    }
    Ok(())
}

/// Mean over the batch of `KL(target ‖ probs)`, with `EPS` flooring inside the logs.
pub fn kl_loss(tape: &Tape, probs: Var, target: &Tensor) -> Result<Var> {
    let (b, m) = rows_cols(tape, probs, "kl_loss")?;
    if target.shape() != [b, m] {
        return Err(Error::dim(
            "kl_loss",
            format!("target {:?} does not match probabilities [{b}, {m}]", target.shape()),
        ));
    }
    check_distributions(&tape.value(probs), "probability")?;
    check_distributions(target, "target")?;
    let entropy_term: f64 = target.data().iter().map(|&t| t * t.max(EPS).ln()).sum();
    let logp = tape.ln(tape.clamp(probs, EPS, f64::INFINITY));
    let t = tape.constant(target.clone());
    let cross = tape.sum(tape.mul(t, logp)?);
    let kl = tape.shift(tape.neg(cross), entropy_term);
    Ok(tape.scale(kl, 1.0 / b as f64))
}

/// Mean over the batch of `weight[label] · (−log softmax(logits)[label])`.
pub fn weighted_ce_loss(tape: &Tape, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
    let (b, m) = rows_cols(tape, logits, "weighted_ce_loss")?;
    if labels.len() != b {
        return Err(Error::dim(
            "weighted_ce_loss",
            format!("{} labels for a batch of {b}", labels.len()),
        ));
    }
    if weights.len() != m {
        return Err(Error::dim(
            "weighted_ce_loss",
            format!("{} class weights for {m} classes", weights.len()),
        ));
    }
    let mut sel = Tensor::zeros(&[b, m]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= m {
            return Err(Error::Domain(format!("label {y} out of range for {m} classes")));
        }
        sel.data_mut()[i * m + y] = weights[y];
    }
    let logp = tape.log_softmax(logits)?;
    let sel = tape.constant(sel);
    let picked = tape.sum(tape.mul(sel, logp)?);
    Ok(tape.scale(picked, -1.0 / b as f64))
}

/// Plain cross-entropy: `weighted_ce_loss` with unit weights.
pub fn ce_loss(tape: &Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (_, m) = rows_cols(tape, logits, "ce_loss")?;
    weighted_ce_loss(tape, logits, labels, &vec![1.0; m])
}

/// Rows scaled to unit length, with norms floored at `EPS`.
fn normalize_rows(tape: &Tape, x: Var) -> Result<Var> {
    let (_, d) = rows_cols(tape, x, "normalize_rows")?;
    let sq = tape.sum_axis(tape.square(x), 1)?;
    let norm = tape.sqrt(tape.clamp(sq, EPS * EPS, f64::INFINITY));
    let norm = tape.broadcast_axis(norm, 1, d)?;
    tape.div(x, norm)
}

/// Gram matrix of row-normalized features.
fn cosine_gram(tape: &Tape, features: Var) -> Result<Var> {
    let unit = normalize_rows(tape, features)?;
    tape.matmul(unit, tape.transpose(unit)?)
}

/// Mean cosine similarity over all unordered pairs of rows.
pub fn cosine_diversity_loss(tape: &Tape, features: Var) -> Result<Var> {
    let (b, _) = rows_cols(tape, features, "cosine_diversity_loss")?;
    if b < 2 {
        return Err(Error::Contract(format!(
            "cosine diversity needs at least 2 rows, got {b}"
        )));
    }
    let gram = cosine_gram(tape, features)?;
    let upper = Tensor::from_fn(&[b, b], |k| if k % b > k / b { 1.0 } else { 0.0 });
    let upper = tape.constant(upper);
    let pairs = (b * (b - 1) / 2) as f64;
    Ok(tape.scale(tape.sum(tape.mul(gram, upper)?), 1.0 / pairs))
}

/// `‖G − I‖²_F` for the Gram matrix `G` of row-normalized features.
pub fn ortho_loss(tape: &Tape, features: Var) -> Result<Var> {
    let (b, _) = rows_cols(tape, features, "ortho_loss")?;
    let gram = cosine_gram(tape, features)?;
    let eye = Tensor::from_fn(&[b, b], |k| if k % b == k / b { 1.0 } else { 0.0 });
    let diff = tape.sub(gram, tape.constant(eye))?;
    Ok(tape.sum(tape.square(diff)))
}

/// Squared adjacent-pixel differences (both directions), summed and
/// divided by the total pixel count `B·C·H·W`.
pub fn tv_loss(tape: &Tape, images: Var) -> Result<Var> {
    let s = tape.shape(images);
    if s.len() != 4 || s[2] < 2 || s[3] < 2 {
        return Err(Error::dim("tv_loss", format!("need [B, C, H≥2, W≥2], got {s:?}")));
    }
    let mut total = None;
    for axis in [3, 2] {
        let n = s[axis];
        let ahead = tape.slice(images, axis, 1, n - 1)?;
        let behind = tape.slice(images, axis, 0, n - 1)?;
        let sq = tape.sum(tape.square(tape.sub(ahead, behind)?));
        total = Some(match total {
            None => sq,
            Some(t) => tape.add(t, sq)?,
        });
    }
    let numel: usize = s.iter().product();
    Ok(tape.scale(total.expect("two axes visited"), 1.0 / numel as f64))
}

/// Mean squared hinge on pixels outside `[0, 1]`.
pub fn pixel_loss(tape: &Tape, images: Var) -> Result<Var> {
    let n = tape.value(images).len() as f64;
    let over = tape.relu(tape.shift(images, -1.0));
    let under = tape.relu(tape.neg(images));
    let total = tape.add(tape.sum(tape.square(over)), tape.sum(tape.square(under)))?;
    Ok(tape.scale(total, 1.0 / n))
}

/// Softened one-hot targets `(1−s)·onehot + s/m`.
pub fn smoothed_targets(labels: &[usize], classes: usize, smoothing: f64) -> Result<Tensor> {
    let mut t = Tensor::full(&[labels.len(), classes], smoothing / classes as f64);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Domain(format!("label {y} out of range for {classes} classes")));
        }
        t.data_mut()[i * classes + y] += 1.0 - smoothing;
    }
    Ok(t)
}
