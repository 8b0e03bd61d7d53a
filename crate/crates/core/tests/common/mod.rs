#![allow(dead_code)]

//! Random small graphs and finite-difference oracles shared by the test files.

use netinv::losses;
use netinv::seed;
use netinv::{Tape, Tensor, Var};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Mlp,
    Cnn,
}

/// A randomly wired graph: trainable tensors, constants, and op choices.
#[derive(Clone, Debug)]
pub struct GraphCase {
    pub family: Family,
    pub params: Vec<Tensor>,
    pub consts: Vec<Tensor>,
    pub activations: Vec<u8>,
    pub head: u8,
    pub labels: Vec<usize>,
}

fn normal(rng: &mut seed::Stream, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0) * scale)
}

pub fn random_case(case_seed: u64, family: Family) -> GraphCase {
    let mut rng = seed::from_seed(case_seed);
    let depth = rng.random_range(1..=3);
    let activations = (0..depth).map(|_| rng.random_range(0..8u8)).collect();
    let head = rng.random_range(0..6u8);
    match family {
        Family::Mlp => {
            let (b, d, h, m) = (3, 4, 5, 3);
            GraphCase {
                family,
                params: vec![
                    normal(&mut rng, &[d, h], 0.8),
                    normal(&mut rng, &[h], 0.3),
                    normal(&mut rng, &[h, m], 0.8),
                ],
                consts: vec![normal(&mut rng, &[b, d], 1.0), normal(&mut rng, &[b, m], 1.0)],
                activations,
                head,
                labels: (0..b).map(|_| rng.random_range(0..m)).collect(),
            }
        }
        Family::Cnn => {
            let (b, c, s, f, m) = (2, 1, 6, 2, 3);
            let pooled = f * (s / 2) * (s / 2);
            GraphCase {
                family,
                params: vec![
                    Tensor::from_fn(&[b, c, s, s], |_| rng.random_range(0.0..1.0)),
                    normal(&mut rng, &[f, c, 3, 3], 0.6),
                    normal(&mut rng, &[f], 0.2),
                    normal(&mut rng, &[pooled, m], 0.5),
                ],
                consts: vec![normal(&mut rng, &[b, m], 1.0)],
                activations,
                head,
                labels: (0..b).map(|_| rng.random_range(0..m)).collect(),
            }
        }
    }
}

fn activate(tape: &Tape, x: Var, which: u8) -> Var {
    match which {
        0 => tape.sigmoid(x),
        1 => tape.relu(x),
        2 => tape.leaky_relu(x, 0.1),
        3 => tape.exp(tape.scale(x, 0.3)),
        4 => tape.ln(tape.shift(tape.square(x), 1.0)),
        5 => tape.sqrt(tape.shift(tape.square(x), 0.5)),
        6 => {
            let den = tape.shift(tape.square(x), 1.0);
            tape.div(x, den).expect("same shape")
        }
        _ => tape.mul(x, tape.sigmoid(x)).expect("same shape"),
    }
}

/// Build the graph at `params`; returns the scalar output and the parameter handles.
pub fn build(case: &GraphCase, params: &[Tensor], tape: &Tape) -> (Var, Vec<Var>) {
    let ps: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let (features, logits, images) = match case.family {
        Family::Mlp => {
            let x = tape.constant(case.consts[0].clone());
            let mut h = tape.add_along(tape.matmul(x, ps[0]).unwrap(), ps[1], 1).unwrap();
            for &a in &case.activations {
                h = activate(tape, h, a);
            }
            (h, tape.matmul(h, ps[2]).unwrap(), None)
        }
        Family::Cnn => {
            let conv = tape.conv2d(ps[0], ps[1], 1, 1).unwrap();
            let mut h = tape.add_along(conv, ps[2], 1).unwrap();
            for &a in &case.activations {
                h = activate(tape, h, a);
            }
            let pooled = tape.max_pool(h, 2).unwrap();
            let b = tape.shape(pooled)[0];
            let flat = tape.reshape(pooled, &[b, tape.value(pooled).len() / b]).unwrap();
            (flat, tape.matmul(flat, ps[3]).unwrap(), Some(ps[0]))
        }
    };
    let mask = tape.constant(case.consts[case.consts.len() - 1].clone());
    let out = match case.head {
        0 => losses::ce_loss(tape, logits, &case.labels).unwrap(),
        1 => {
            let probs = tape.softmax(logits).unwrap();
            let m = tape.shape(logits)[1];
            let target = losses::smoothed_targets(&case.labels, m, 0.2).unwrap();
            losses::kl_loss(tape, probs, &target).unwrap()
        }
        2 => losses::cosine_diversity_loss(tape, features).unwrap(),
        3 => losses::ortho_loss(tape, features).unwrap(),
        4 => tape.sum(tape.mul(tape.log_softmax(logits).unwrap(), mask).unwrap()),
        _ => {
            let base = losses::ce_loss(tape, logits, &case.labels).unwrap();
            match images {
                Some(x) => {
                    let tv = losses::tv_loss(tape, x).unwrap();
                    let pix = losses::pixel_loss(tape, tape.scale(x, 1.5)).unwrap();
                    tape.add(base, tape.add(tv, pix).unwrap()).unwrap()
                }
                None => tape.add(base, tape.mean(tape.square(logits))).unwrap(),
            }
        }
    };
    (out, ps)
}

fn value_at(case: &GraphCase, params: &[Tensor], second_order: bool) -> f64 {
    let tape = Tape::new();
    let (out, ps) = build(case, params, &tape);
    let v = if second_order { tape.grad_norm_sq(out, &ps).unwrap() } else { out };
    tape.item(v).unwrap()
}

/// Analytic and central-difference gradients over all parameter entries,
/// skipping coordinates where the one-sided slopes disagree (a kink lies
/// within one step).
pub fn compare(case: &GraphCase, second_order: bool) -> (Vec<f64>, Vec<f64>, usize) {
    let tape = Tape::new();
    let (out, ps) = build(case, &case.params, &tape);
    let target = if second_order { tape.grad_norm_sq(out, &ps).unwrap() } else { out };
    let grads = tape.gradients(target, &ps, false).unwrap();
    let f0 = tape.item(target).unwrap();
    let (mut analytic, mut numeric, mut skipped) = (Vec::new(), Vec::new(), 0);
    for (pi, p) in case.params.iter().enumerate() {
        let g = grads[pi].map(|g| tape.value(g).data().to_vec()).unwrap_or_else(|| vec![0.0; p.len()]);
        for (i, &gi) in g.iter().enumerate() {
            let at = |delta: f64| {
                let mut shifted = case.params.clone();
                shifted[pi].data_mut()[i] += delta;
                value_at(case, &shifted, second_order)
            };
            let (fp, fm) = (at(FD_STEP), at(-FD_STEP));
            let (fwd, bwd) = ((fp - f0) / FD_STEP, (f0 - fm) / FD_STEP);
            let central = (fp - fm) / (2.0 * FD_STEP);
            if (fwd - bwd).abs() > 1e-3 * (1.0 + central.abs()) {
                skipped += 1;
                continue;
            }
            analytic.push(gi);
            numeric.push(central);
        }
    }
    (analytic, numeric, skipped)
}

/// `‖a − b‖ / max(‖a‖ + ‖b‖, floor)`.
pub fn rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(floor)
}

/// Worst relative error over `cases` random graphs of both families.
pub fn autodiff_sweep(cases: u64, second_order: bool) -> f64 {
    let mut worst: f64 = 0.0;
    for s in 0..cases {
        let family = if s % 2 == 0 { Family::Mlp } else { Family::Cnn };
        let case = random_case(s, family);
        let (a, n, _) = compare(&case, second_order);
        worst = worst.max(rel_error(&a, &n, 1e-6));
    }
    worst
}

pub fn random_simplex(rng: &mut seed::Stream, m: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..m).map(|_| -rng.random_range(f64::EPSILON..1.0f64).ln()).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

pub mod oracles {
    //! Direct-sum reference implementations written from the definitions.

    const EPS: f64 = 1e-8;

    pub fn kl(probs: &[Vec<f64>], target: &[Vec<f64>]) -> f64 {
        let mut total = 0.0;
        for (p, t) in probs.iter().zip(target) {
            for (pj, tj) in p.iter().zip(t) {
                total += tj * (tj.max(EPS).ln() - pj.max(EPS).ln());
            }
        }
        total / probs.len() as f64
    }

    pub fn log_softmax(z: &[f64]) -> Vec<f64> {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        z.iter().map(|v| v - lse).collect()
    }

    pub fn weighted_ce(logits: &[Vec<f64>], labels: &[usize], weights: &[f64]) -> f64 {
        let mut total = 0.0;
        for (z, &y) in logits.iter().zip(labels) {
            total += weights[y] * -log_softmax(z)[y];
        }
        total / logits.len() as f64
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt().max(EPS)
    }

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b))
    }

    pub fn cosine_diversity(f: &[Vec<f64>]) -> f64 {
        let (mut total, mut pairs) = (0.0, 0);
        for i in 0..f.len() {
            for j in i + 1..f.len() {
                total += cos(&f[i], &f[j]);
                pairs += 1;
            }
        }
        total / pairs as f64
    }

    pub fn ortho(f: &[Vec<f64>]) -> f64 {
        let mut total = 0.0;
        for i in 0..f.len() {
            for j in 0..f.len() {
                let delta = if i == j { 1.0 } else { 0.0 };
                total += (cos(&f[i], &f[j]) - delta).powi(2);
            }
        }
        total
    }

    /// `x[b][c][y][x]`.
    pub fn tv(x: &[Vec<Vec<Vec<f64>>>]) -> f64 {
        let mut total = 0.0;
        let mut count = 0;
        for img in x {
            for ch in img {
                let (h, w) = (ch.len(), ch[0].len());
                count += h * w;
                for r in 0..h {
                    for c in 0..w {
                        if c + 1 < w {
                            total += (ch[r][c + 1] - ch[r][c]).powi(2);
                        }
                        if r + 1 < h {
                            total += (ch[r + 1][c] - ch[r][c]).powi(2);
                        }
                    }
                }
            }
        }
        total / count as f64
    }

    pub fn pixel(x: &[f64]) -> f64 {
        x.iter()
            .map(|&v| (v - 1.0).max(0.0).powi(2) + (-v).max(0.0).powi(2))
            .sum::<f64>()
            / x.len() as f64
    }

    /// Eq. 1 term by term, with the one-hot distance summed explicitly.
    pub fn ue(p: &[f64]) -> f64 {
        let m = p.len() as f64;
        let mut k = 0;
        for i in 1..p.len() {
            if p[i] > p[k] {
                k = i;
            }
        }
        let num: f64 = p.iter().map(|v| (v - 1.0 / m).powi(2)).sum();
        let den: f64 = (0..p.len()).map(|i| ((i == k) as u8 as f64 - 1.0 / m).powi(2)).sum();
        1.0 - num / den
    }
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let w = t.shape()[1..].iter().product();
    t.data().chunks(w).map(<[f64]>::to_vec).collect()
}

pub fn nested4(t: &Tensor) -> Vec<Vec<Vec<Vec<f64>>>> {
    let s = t.shape();
    (0..s[0])
        .map(|b| {
            (0..s[1])
                .map(|c| {
                    (0..s[2])
                        .map(|y| (0..s[3]).map(|x| t.data()[((b * s[1] + c) * s[2] + y) * s[3] + x]).collect())
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn random_probs(rng: &mut seed::Stream, b: usize, m: usize) -> Tensor {
    let data: Vec<f64> = (0..b).flat_map(|_| random_simplex(rng, m)).collect();
    Tensor::new(vec![b, m], data).unwrap()
}

/// Largest deviation between each loss and its oracle on one random batch.
pub fn loss_oracle_errors(case_seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = seed::from_seed(case_seed);
    let b = rng.random_range(2..6);
    let m = rng.random_range(2..6);
    let d = rng.random_range(2..7);
    let tape = Tape::new();
    let mut out = Vec::new();

    let probs = random_probs(&mut rng, b, m);
    let target = random_probs(&mut rng, b, m);
    let v = losses::kl_loss(&tape, tape.constant(probs.clone()), &target).unwrap();
    out.push(("kl", (tape.item(v).unwrap() - oracles::kl(&rows(&probs), &rows(&target))).abs()));

    let logits = normal(&mut rng, &[b, m], 3.0);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..m)).collect();
    let weights: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..2.0)).collect();
    let v = losses::weighted_ce_loss(&tape, tape.constant(logits.clone()), &labels, &weights).unwrap();
    out.push((
        "weighted_ce",
        (tape.item(v).unwrap() - oracles::weighted_ce(&rows(&logits), &labels, &weights)).abs(),
    ));
    let plain = losses::ce_loss(&tape, tape.constant(logits.clone()), &labels).unwrap();
    let unit = losses::weighted_ce_loss(&tape, tape.constant(logits.clone()), &labels, &vec![1.0; m]).unwrap();
    out.push(("ce_unit_weights", (tape.item(plain).unwrap() - tape.item(unit).unwrap()).abs()));

    let feats = normal(&mut rng, &[b, d], 2.0);
    let v = losses::cosine_diversity_loss(&tape, tape.constant(feats.clone())).unwrap();
    out.push(("cosine", (tape.item(v).unwrap() - oracles::cosine_diversity(&rows(&feats))).abs()));
    let v = losses::ortho_loss(&tape, tape.constant(feats.clone())).unwrap();
    out.push(("ortho", (tape.item(v).unwrap() - oracles::ortho(&rows(&feats))).abs()));

    let (c, h, w) = (rng.random_range(1..=3), rng.random_range(2..7), rng.random_range(2..7));
    let img = Tensor::from_fn(&[b, c, h, w], |_| rng.random_range(-0.5..1.5));
    let v = losses::tv_loss(&tape, tape.constant(img.clone())).unwrap();
    out.push(("tv", (tape.item(v).unwrap() - oracles::tv(&nested4(&img))).abs()));
    let v = losses::pixel_loss(&tape, tape.constant(img.clone())).unwrap();
    out.push(("pixel", (tape.item(v).unwrap() - oracles::pixel(img.data())).abs()));
    out
}

pub mod runs {
    use std::collections::BTreeMap;
    use std::path::Path;

    use netinv::run::{run_command, Command, RunConfig, MANIFEST};

    pub fn config(lines: &[(&str, String)]) -> RunConfig {
        let mut cfg = RunConfig::defaults();
        for (k, v) in lines {
            cfg.set(k, v).unwrap();
        }
        cfg
    }

    /// Small settings under which every command finishes in seconds.
    pub fn quick(command: Command, dir: &Path) -> RunConfig {
        let mut lines = vec![("train.epochs", "8".to_owned()), ("dataset.train", "90".to_owned()), ("dataset.test", "45".to_owned())];
        match command {
            Command::TrainClassifier => {}
            Command::Invert => lines.extend([
                ("inversion.steps", "120".to_owned()),
                ("inversion.eval_every", "40".to_owned()),
                ("inversion.eval_samples", "60".to_owned()),
                ("inversion.grid_per_class", "4".to_owned()),
            ]),
            Command::Reconstruct => lines.extend([
                ("dataset.train", "30".to_owned()),
                ("recon.steps", "60".to_owned()),
                ("recon.samples", "6".to_owned()),
            ]),
            Command::Ood => lines.extend([
                ("ood.cycles", "2".to_owned()),
                ("ood.inversion_steps", "30".to_owned()),
                ("ood.initial_epochs", "4".to_owned()),
                ("ood.cycle_epochs", "2".to_owned()),
                ("ood.probe_count", "30".to_owned()),
                ("inversion.eval_samples", "60".to_owned()),
            ]),
            Command::Evaluate => {
                let ckpt = dir.join("source");
                let source = quick(Command::TrainClassifier, dir);
                run_command(Command::TrainClassifier, &source, &ckpt).unwrap();
                lines.extend([
                    ("evaluate.models", ckpt.join("classifier.ninv").display().to_string()),
                    ("evaluate.datasets", "bars,crosses,noise".to_owned()),
                    ("ood.probe_count", "30".to_owned()),
                ]);
            }
        }
        config(&lines)
    }

    /// Every file in `dir` except the manifest, by name.
    pub fn outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
        std::fs::read_dir(dir)
            .unwrap()
            .map(Result::unwrap)
            .filter(|e| e.file_type().unwrap().is_file() && e.file_name() != MANIFEST)
            .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
            .collect()
    }

    /// Run `command` twice into fresh directories; names of files that differ.
    pub fn determinism_diff(command: Command, root: &Path) -> Vec<String> {
        let cfg = quick(command, root);
        let (a, b) = (root.join("a"), root.join("b"));
        run_command(command, &cfg, &a).unwrap();
        run_command(command, &cfg, &b).unwrap();
        let (oa, ob) = (outputs(&a), outputs(&b));
        let mut diff: Vec<String> = oa.iter().filter(|(k, v)| ob.get(*k) != Some(v)).map(|(k, _)| k.clone()).collect();
        diff.extend(ob.keys().filter(|k| !oa.contains_key(*k)).cloned());
        diff
    }
}
