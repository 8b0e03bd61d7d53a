use std::path::Path;

use super::config::{DataSource, Settings};
use super::Run;
use crate::data::{
    load_checkpoint, load_idx, save_checkpoint, synth_dataset, write_csv, write_pgm_grid, Cell, Checkpoint,
    ColumnKind, Dataset, Family, Schema, Split, SynthSpec,
};
use crate::error::{Error, Result};
use crate::inversion::{train_generator, StepLog};
use crate::model::{Classifier, Generator, Mode};
use crate::ood::{
    evaluate_grid, noise_images, ood_predict_batch, ood_training_cycle, threshold_from_predictions, CycleReport,
    GridModel, OodMonitor, ThresholdReport,
};
use crate::recon::train_reconstructor;
use crate::seed::{self, derive_seed};
use crate::ssim::privacy_score;
use crate::tensor::Tensor;
use crate::training::{accuracy, fit};

const CLASSIFIER_FILE: &str = "classifier.ninv";

fn require_files(paths: &[(&str, &str)]) -> Result<()> {
    let missing: Vec<String> = paths
        .iter()
        .filter(|(_, p)| !Path::new(p).is_file())
        .map(|(k, p)| format!("{k}: no such file '{p}'"))
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(missing))
    }
}

fn cap(ds: Dataset, n: usize) -> Result<Dataset> {
    if n > 0 && n < ds.len() {
        ds.take(n)
    } else {
        Ok(ds)
    }
}

fn load_idx_pair(images: &str, labels: &str, split: Split, key: &str) -> Result<Dataset> {
    require_files(&[(&format!("{key} images"), images), (&format!("{key} labels"), labels)])?;
    load_idx(images, labels, split)
}

/// Training and test splits named `settings.dataset_name`.
pub(crate) fn load_data(s: &Settings) -> Result<(Dataset, Dataset)> {
    let (train, test) = match &s.source {
        DataSource::Synth(spec) => synth_dataset(spec, s.n_train, s.n_test)?,
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            require_files(&[
                ("dataset.train_images", train_images),
                ("dataset.train_labels", train_labels),
                ("dataset.test_images", test_images),
                ("dataset.test_labels", test_labels),
            ])?;
            let train = cap(load_idx(train_images, train_labels, Split::Train)?, s.n_train)?;
            let test = cap(load_idx(test_images, test_labels, Split::Test)?, s.n_test)?;
            let classes = train.classes().max(test.classes());
            let relabel = |d: Dataset| Dataset::new("", d.split(), d.images().clone(), d.labels().to_vec(), classes);
            (relabel(train)?, relabel(test)?)
        }
    };
    Ok((train.with_name(&s.dataset_name), test.with_name(&s.dataset_name)))
}

/// A synthetic test set of another family drawn at the training data's geometry.
fn synth_probe(s: &Settings, family: Family, shape: [usize; 3], classes: usize, count: usize) -> Result<Tensor> {
    let (noise, jitter) = match &s.source {
        DataSource::Synth(spec) => (spec.noise, spec.jitter),
        DataSource::Idx { .. } => (0.1, 0.0),
    };
    let spec = SynthSpec {
        family,
        classes,
        size: shape[1],
        channels: shape[0],
        noise,
        jitter,
        seed: derive_seed(s.seed, &format!("probe/{}", family.name())),
    };
    Ok(synth_dataset(&spec, classes, count.max(classes))?.1.images().clone())
}

fn train_new_classifier(
    s: &Settings,
    run: &mut Run,
    train: &Dataset,
    test: &Dataset,
) -> Result<(Classifier, Vec<Vec<Cell>>)> {
    let spec = s.classifier_spec(train.image_shape(), train.classes());
    let mut clf = Classifier::new(spec, &mut seed::stream(s.seed, "init/classifier"))?;
    let mut rows = Vec::new();
    fit(&mut clf, train.images(), train.labels(), &s.train, &mut seed::stream(s.seed, "train"), |epoch, loss, clf| {
        rows.push(vec![
            Cell::from(epoch + 1),
            loss.into(),
            accuracy(clf, train.images(), train.labels())?.into(),
            accuracy(clf, test.images(), test.labels())?.into(),
        ]);
        Ok(())
    })?;
    run.phase("train-classifier");
    let ckpt = Checkpoint::from_classifier(&clf, s.seed).with_meta("dataset", train.name());
    save_checkpoint(&ckpt, run.path(CLASSIFIER_FILE))?;
    run.artifact(CLASSIFIER_FILE)?;
    let acc = accuracy(&clf, test.images(), test.labels())?;
    run.metric("classifier_test_accuracy", acc);
    Ok((clf, rows))
}

fn metrics_schema() -> Schema {
    Schema::new([
        ("epoch", ColumnKind::Int),
        ("loss", ColumnKind::Float),
        ("train_accuracy", ColumnKind::Float),
        ("test_accuracy", ColumnKind::Float),
    ])
}

/// The configured checkpoint, or a classifier trained here when none is given.
fn obtain_classifier(s: &Settings, run: &mut Run, train: &Dataset, test: &Dataset) -> Result<Classifier> {
    if s.classifier_checkpoint.is_empty() {
        return Ok(train_new_classifier(s, run, train, test)?.0);
    }
    require_files(&[("classifier.checkpoint", &s.classifier_checkpoint)])?;
    let clf = load_checkpoint(&s.classifier_checkpoint)?.into_classifier()?;
    if clf.spec().input != train.image_shape() {
        return Err(Error::Config(vec![format!(
            "classifier.checkpoint expects {:?} inputs but the dataset has {:?}",
            clf.spec().input,
            train.image_shape()
        )]));
    }
    run.phase("load-classifier");
    run.metric("classifier_test_accuracy", accuracy(&clf, test.images(), test.labels())?);
    Ok(clf)
}

fn new_generator(s: &Settings, classes: usize, shape: [usize; 3], rng: &mut seed::Stream) -> Result<Generator> {
    let spec = s.generator.spec(classes, shape, derive_seed(s.seed, "generator/cond"));
    spec.validate().map_err(|e| Error::Config(vec![format!("generator: {e}")]))?;
    Generator::new(spec, rng)
}

fn loss_rows(history: &[StepLog]) -> (Schema, Vec<Vec<Cell>>) {
    let names: Vec<String> = history
        .first()
        .map(|l| l.breakdown.terms.iter().map(|t| t.name.clone()).collect())
        .unwrap_or_default();
    let mut columns = vec![("step".to_owned(), ColumnKind::Int), ("total".to_owned(), ColumnKind::Float)];
    columns.extend(names.iter().map(|n| (n.clone(), ColumnKind::Float)));
    columns.push(("accuracy".to_owned(), ColumnKind::Float));
    let rows = history
        .iter()
        .map(|l| {
            let mut row = vec![Cell::from(l.step + 1), l.breakdown.total.into()];
            row.extend(l.breakdown.terms.iter().map(|t| Cell::from(t.value)));
            row.push(l.accuracy.into());
            row
        })
        .collect();
    (Schema::new(columns), rows)
}

/// `per_class` labels of each class in turn, so a grid with `per_class`
/// columns shows one class per row.
fn grid_labels(classes: usize, per_class: usize) -> Vec<usize> {
    (0..classes).flat_map(|k| std::iter::repeat_n(k, per_class)).collect()
}

pub(crate) fn train_classifier(s: &Settings, run: &mut Run) -> Result<()> {
    let (train, test) = load_data(s)?;
    run.phase("data");
    let (_, rows) = train_new_classifier(s, run, &train, &test)?;
    write_csv(&rows, &metrics_schema(), run.path("metrics.csv"))?;
    run.artifact("metrics.csv")?;
    run.phase("write");
    Ok(())
}

pub(crate) fn invert(s: &Settings, run: &mut Run) -> Result<()> {
    let (train, test) = load_data(s)?;
    run.phase("data");
    let mut clf = obtain_classifier(s, run, &train, &test)?;
    clf.freeze();
    let mut rng = seed::stream(s.seed, "invert");
    let mut gen = new_generator(s, clf.classes(), clf.spec().input, &mut rng)?;
    let result = train_generator(&mut gen, &clf, &s.inversion, &mut rng, |_| {})?;
    run.phase("invert");
    run.metric("inversion_accuracy", result.final_accuracy);
    run.metric("inversion_steps", result.steps_taken as f64);

    let (schema, rows) = loss_rows(&result.history);
    write_csv(&rows, &schema, run.path("inversion_loss.csv"))?;
    run.artifact("inversion_loss.csv")?;
    let labels = grid_labels(clf.classes(), s.grid_per_class);
    let samples = gen.generate(&labels, Mode::Train, &mut seed::stream(s.seed, "invert/samples"))?;
    write_pgm_grid(&samples, s.grid_per_class, run.path("samples.pgm"))?;
    run.artifact("samples.pgm")?;
    let ckpt = Checkpoint::from_generator(&gen, s.seed)
        .with_meta("inversion_accuracy", result.final_accuracy)
        .with_meta("steps", result.steps_taken);
    save_checkpoint(&ckpt, run.path("generator.ninv"))?;
    run.artifact("generator.ninv")?;
    run.phase("write");
    Ok(())
}

pub(crate) fn reconstruct(s: &Settings, run: &mut Run) -> Result<()> {
    let (train, test) = load_data(s)?;
    let holdout = cap(test.clone(), train.len())?;
    run.phase("data");
    let mut clf = obtain_classifier(s, run, &train, &test)?;
    clf.freeze();
    let mut rng = seed::stream(s.seed, "reconstruct");
    let mut gen = new_generator(s, clf.classes(), clf.spec().input, &mut rng)?;
    let result = train_reconstructor(&mut gen, &clf, &s.recon, &mut rng, |_| {})?;
    run.phase("reconstruct");
    run.metric("inversion_accuracy", result.final_accuracy);

    let labels: Vec<usize> = (0..s.recon_samples).map(|i| i % clf.classes()).collect();
    let recons = gen.generate(&labels, Mode::Train, &mut seed::stream(s.seed, "reconstruct/samples"))?;
    let on_train = privacy_score(&recons, train.images(), "train")?;
    let on_holdout = privacy_score(&recons, holdout.images(), "holdout")?;
    run.phase("privacy");
    run.metric("mean_ssim_train", on_train.mean);
    run.metric("mean_ssim_holdout", on_holdout.mean);
    run.metric("max_ssim_train", on_train.max);
    run.metric("max_ssim_holdout", on_holdout.max);

    let schema = Schema::new([
        ("recon", ColumnKind::Int),
        ("label", ColumnKind::Int),
        ("train_match", ColumnKind::Int),
        ("train_ssim", ColumnKind::Float),
        ("holdout_match", ColumnKind::Int),
        ("holdout_ssim", ColumnKind::Float),
    ]);
    let rows: Vec<Vec<Cell>> = on_train
        .matches
        .iter()
        .zip(&on_holdout.matches)
        .map(|(a, b)| {
            vec![
                a.recon.into(),
                labels[a.recon].into(),
                a.reference.into(),
                a.ssim.into(),
                b.reference.into(),
                b.ssim.into(),
            ]
        })
        .collect();
    write_csv(&rows, &schema, run.path("privacy.csv"))?;
    run.artifact("privacy.csv")?;
    let (schema, rows) = loss_rows(&result.history);
    write_csv(&rows, &schema, run.path("recon_loss.csv"))?;
    run.artifact("recon_loss.csv")?;
    write_pgm_grid(&recons, clf.classes(), run.path("reconstructions.pgm"))?;
    run.artifact("reconstructions.pgm")?;
    let matched = train.images().select_rows(&on_train.matches.iter().map(|m| m.reference).collect::<Vec<_>>())?;
    write_pgm_grid(&matched, clf.classes(), run.path("train_matches.pgm"))?;
    run.artifact("train_matches.pgm")?;
    run.phase("write");
    Ok(())
}

fn probe_sets(s: &Settings, shape: [usize; 3], classes: usize) -> Result<Vec<(String, Tensor)>> {
    s.ood_probes
        .iter()
        .map(|name| {
            let images = match name.as_str() {
                "noise" => noise_images(s.probe_count, shape, &mut seed::stream(s.seed, "probe/noise")),
                "idx" => {
                    let (images, labels) = &s.probe_idx;
                    cap(load_idx_pair(images, labels, Split::Test, "ood.probe")?, s.probe_count)?
                        .images()
                        .clone()
                }
                family => {
                    let family = Family::parse(family).expect("validated probe name");
                    synth_probe(s, family, shape, classes, s.probe_count)?
                }
            };
            if images.shape()[1..] != shape {
                return Err(Error::Config(vec![format!(
                    "probe '{name}' has images {:?}, the dataset {shape:?}",
                    &images.shape()[1..]
                )]));
            }
            Ok((name.clone(), images))
        })
        .collect()
}

fn cycle_schema(probes: &[String]) -> Schema {
    let mut columns = vec![
        ("cycle".to_owned(), ColumnKind::Int),
        ("id_train_accuracy".to_owned(), ColumnKind::Float),
        ("id_test_accuracy".to_owned(), ColumnKind::Float),
        ("inversion_accuracy".to_owned(), ColumnKind::Float),
        ("garbage_size".to_owned(), ColumnKind::Int),
        ("mean_inverted_ue".to_owned(), ColumnKind::Float),
    ];
    columns.extend(probes.iter().map(|p| (format!("routed_{p}"), ColumnKind::Float)));
    columns.extend(threshold_columns());
    Schema::new(columns)
}

fn threshold_columns() -> Vec<(String, ColumnKind)> {
    [
        ("min_id_confidence", ColumnKind::Float),
        ("max_ood_confidence", ColumnKind::Float),
        ("gap", ColumnKind::Float),
        ("violations", ColumnKind::Int),
        ("ood_misrouted", ColumnKind::Int),
        ("ood_total", ColumnKind::Int),
    ]
    .into_iter()
    .map(|(n, k)| (n.to_owned(), k))
    .collect()
}

fn threshold_cells(t: Option<&ThresholdReport>) -> Vec<Cell> {
    match t {
        Some(t) => vec![
            t.min_id_confidence.into(),
            t.max_ood_confidence.into(),
            t.gap.into(),
            t.violations.into(),
            t.ood_misrouted.into(),
            t.ood_total.into(),
        ],
        None => vec![Cell::Empty; 6],
    }
}

fn cycle_row(r: &CycleReport, probes: &[String]) -> Vec<Cell> {
    let mut row = vec![
        Cell::from(r.cycle),
        r.id_train_accuracy.into(),
        r.id_test_accuracy.into(),
        r.inversion_accuracy.into(),
        r.garbage_size.into(),
        r.mean_inverted_ue.into(),
    ];
    row.extend(probes.iter().map(|p| Cell::from(r.routing.get(p).copied())));
    row.extend(threshold_cells(r.threshold.as_ref()));
    row
}

pub(crate) fn ood(s: &Settings, run: &mut Run) -> Result<()> {
    let (train, test) = load_data(s)?;
    let shape = train.image_shape();
    let n = train.classes();
    let probes = probe_sets(s, shape, n)?;
    run.phase("data");

    let spec = s.classifier_spec(shape, n + 1);
    let clf = Classifier::new(spec, &mut seed::stream(s.seed, "init/classifier"))?;
    let monitor = OodMonitor {
        id_test: Some(&test),
        probes: probes.iter().map(|(n, t)| (n.as_str(), t)).collect(),
    };
    let names: Vec<String> = probes.iter().map(|(n, _)| n.clone()).collect();
    let mut rows = Vec::new();
    let mut grids = Vec::new();
    let factory = |_cycle: usize, rng: &mut seed::Stream| new_generator(s, n + 1, shape, rng);
    let outcome = ood_training_cycle(clf, factory, &train, &monitor, &s.ood, |report, samples| {
        rows.push(cycle_row(report, &names));
        if let Some(x) = samples {
            grids.push((report.cycle, x.clone()));
        }
    });
    run.phase("cycles");

    let schema = cycle_schema(&names);
    write_csv(&rows, &schema, run.path("cycles.csv"))?;
    run.artifact("cycles.csv")?;
    for (cycle, samples) in &grids {
        let name = format!("cycle_{cycle}.pgm");
        write_pgm_grid(samples, n + 1, run.path(&name))?;
        run.artifact(&name)?;
    }
    let outcome = outcome?;
    if let Some(last) = outcome.reports.last() {
        run.metric("id_test_accuracy", last.id_test_accuracy.unwrap_or(f64::NAN));
        for (name, rate) in &last.routing {
            run.metric(&format!("routed_{name}"), *rate);
        }
        if let Some(t) = &last.threshold {
            run.metric("threshold_gap", t.gap);
            run.metric("threshold_violations", t.violations as f64);
        }
    }
    let ckpt = Checkpoint::from_classifier(&outcome.classifier, s.seed)
        .with_meta("dataset", train.name())
        .with_meta("garbage_class", n)
        .with_meta("cycles", s.ood.cycles);
    save_checkpoint(&ckpt, run.path(CLASSIFIER_FILE))?;
    run.artifact(CLASSIFIER_FILE)?;
    run.phase("write");
    Ok(())
}

fn eval_dataset(s: &Settings, name: &str, shape: [usize; 3], classes: usize) -> Result<Dataset> {
    let synth_family = match &s.source {
        DataSource::Synth(spec) => Some(spec.family.name()),
        DataSource::Idx { .. } => None,
    };
    if name == s.dataset_name || Some(name) == synth_family || name == "idx" {
        let (_, test) = load_data(s)?;
        return Ok(test.with_name(name));
    }
    if name == "noise" {
        let images = noise_images(s.probe_count, shape, &mut seed::stream(s.seed, "probe/noise"));
        let labels = vec![0; images.shape()[0]];
        return Dataset::new(name, Split::Test, images, labels, classes);
    }
    let family = Family::parse(name).expect("validated dataset name");
    let spec = match &s.source {
        DataSource::Synth(spec) => SynthSpec { family, ..spec.clone() },
        DataSource::Idx { .. } => SynthSpec {
            family,
            classes: classes.saturating_sub(1).max(2),
            size: shape[1],
            channels: shape[0],
            noise: 0.1,
            jitter: 0.0,
            seed: derive_seed(s.seed, "data"),
        },
    };
    if spec.size != shape[1] || spec.channels != shape[0] || spec.classes > classes {
        return Err(Error::Config(vec![format!(
            "evaluate.datasets: '{name}' at {} classes and geometry [{}, {}, {}] does not fit models with input {shape:?} and {classes} outputs",
            spec.classes, spec.channels, spec.size, spec.size
        )]));
    }
    let (_, test) = synth_dataset(&spec, s.n_train, s.n_test)?;
    Dataset::new(name, Split::Test, test.images().clone(), test.labels().to_vec(), classes)
}

pub(crate) fn evaluate(s: &Settings, run: &mut Run) -> Result<()> {
    let mut errors = Vec::new();
    if s.eval_models.is_empty() {
        errors.push("evaluate.models lists no checkpoints".to_owned());
    }
    if s.eval_datasets.is_empty() {
        errors.push("evaluate.datasets lists no datasets".to_owned());
    }
    for m in &s.eval_models {
        if !Path::new(m).is_file() {
            errors.push(format!("evaluate.models: no such file '{m}'"));
        }
    }
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    let mut models = Vec::new();
    for path in &s.eval_models {
        let ckpt = load_checkpoint(path)?;
        let trained_on = ckpt.metadata.get("dataset").cloned().unwrap_or_else(|| s.dataset_name.clone());
        models.push((trained_on, ckpt.into_classifier()?));
    }
    let shape = models[0].1.spec().input;
    if let Some((_, m)) = models.iter().find(|(_, m)| m.spec().input != shape) {
        return Err(Error::Config(vec![format!(
            "evaluate.models mix input shapes {shape:?} and {:?}",
            m.spec().input
        )]));
    }
    let classes = models.iter().map(|(_, m)| m.classes()).max().unwrap_or(1);
    let datasets = s
        .eval_datasets
        .iter()
        .map(|d| eval_dataset(s, d, shape, classes))
        .collect::<Result<Vec<_>>>()?;
    run.phase("load");

    let grid: Vec<GridModel<'_>> = models
        .iter()
        .map(|(t, m)| GridModel { trained_on: t, model: m })
        .collect();
    let refs: Vec<&Dataset> = datasets.iter().collect();
    let matrix = evaluate_grid(&grid, &refs)?;

    let mut threshold_rows = Vec::new();
    for (path, (trained_on, model)) in s.eval_models.iter().zip(&models) {
        let id = datasets.iter().find(|d| d.name() == trained_on).expect("checked by evaluate_grid");
        let foreign: Vec<&Tensor> = datasets.iter().filter(|d| d.name() != trained_on).map(|d| d.images()).collect();
        let report = if foreign.is_empty() {
            None
        } else {
            let ood = ood_predict_batch(model, &Tensor::concat_rows(&foreign)?)?;
            let id_preds = ood_predict_batch(model, id.images())?;
            Some(threshold_from_predictions(&id_preds, id.labels(), &ood)?)
        };
        let mut row = vec![Cell::from(path.as_str()), Cell::from(trained_on.as_str())];
        row.extend(threshold_cells(report.as_ref()));
        threshold_rows.push(row);
    }
    run.phase("evaluate");

    let mut columns = vec![("model".to_owned(), ColumnKind::Text), ("trained_on".to_owned(), ColumnKind::Text)];
    columns.extend(matrix.columns.iter().map(|c| (c.clone(), ColumnKind::Float)));
    let rows: Vec<Vec<Cell>> = (0..models.len())
        .map(|i| {
            let mut row = vec![Cell::from(s.eval_models[i].as_str()), Cell::from(matrix.rows[i].as_str())];
            row.extend((0..matrix.columns.len()).map(|j| Cell::from(matrix.get(i, j))));
            row
        })
        .collect();
    write_csv(&rows, &Schema::new(columns), run.path("accuracy.csv"))?;
    run.artifact("accuracy.csv")?;
    let mut columns = vec![("model".to_owned(), ColumnKind::Text), ("trained_on".to_owned(), ColumnKind::Text)];
    columns.extend(threshold_columns());
    write_csv(&threshold_rows, &Schema::new(columns), run.path("threshold.csv"))?;
    run.artifact("threshold.csv")?;
    for (i, row) in matrix.rows.iter().enumerate() {
        for (j, col) in matrix.columns.iter().enumerate() {
            run.metric(&format!("{i}:{row}/{col}"), matrix.get(i, j));
        }
    }
    run.phase("write");
    Ok(())
}
