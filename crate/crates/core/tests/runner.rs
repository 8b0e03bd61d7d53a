mod common;

use std::process::Command as Process;

use common::runs::{config, determinism_diff, quick};
use netinv::data::{load_checkpoint, Checkpoint};
use netinv::run::{exit_code, run_command, Command, Manifest, RunConfig, Settings, MANIFEST, RESOLVED_CONFIG};
use netinv::Error;

fn read_csv(path: &std::path::Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let headers = r.headers().unwrap().iter().map(str::to_owned).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(str::to_owned).collect()).collect();
    (headers, rows)
}

fn col(headers: &[String], name: &str) -> usize {
    headers.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"))
}

#[test]
fn every_command_is_byte_deterministic() {
    for command in Command::ALL {
        let dir = tempfile::tempdir().unwrap();
        let diff = determinism_diff(command, dir.path());
        assert!(diff.is_empty(), "{}: {diff:?} differ", command.name());
    }
}

#[test]
fn manifest_hashes_and_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(Command::TrainClassifier, dir.path());
    let manifest = run_command(Command::TrainClassifier, &cfg, dir.path()).unwrap();
    let on_disk = Manifest::load(dir.path().join(MANIFEST)).unwrap();
    assert_eq!(on_disk, manifest);
    assert!(manifest.stale_artifacts(dir.path()).unwrap().is_empty());
    for name in [RESOLVED_CONFIG, "classifier.ninv", "metrics.csv"] {
        assert!(manifest.artifacts.contains_key(name), "{name}");
    }
    let resolved = RunConfig::load(dir.path().join(RESOLVED_CONFIG)).unwrap();
    assert_eq!(resolved, cfg);
    assert_eq!(resolved.entries().len(), netinv::run::KEYS.len());
    assert!(manifest.metrics["classifier_test_accuracy"] >= 0.95);
    let (_, rows) = read_csv(&dir.path().join("metrics.csv"));
    assert_eq!(rows.len(), 8);

    std::fs::write(dir.path().join("metrics.csv"), "tampered").unwrap();
    assert_eq!(manifest.stale_artifacts(dir.path()).unwrap(), vec!["metrics.csv".to_owned()]);
}

#[test]
fn same_seed_same_checkpoint_hash_different_seed_differs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(Command::TrainClassifier, dir.path());
    let a = run_command(Command::TrainClassifier, &cfg, dir.path().join("a")).unwrap();
    let b = run_command(Command::TrainClassifier, &cfg, dir.path().join("b")).unwrap();
    cfg.set("seed", 99).unwrap();
    let c = run_command(Command::TrainClassifier, &cfg, dir.path().join("c")).unwrap();
    assert_eq!(a.artifacts["classifier.ninv"], b.artifacts["classifier.ninv"]);
    assert_ne!(a.artifacts["classifier.ninv"], c.artifacts["classifier.ninv"]);
}

#[test]
fn inversion_loss_csv_total_is_weighted_sum() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(Command::Invert, dir.path());
    let manifest = run_command(Command::Invert, &cfg, dir.path()).unwrap();
    let s = Settings::from_config(&cfg).unwrap();
    let w = s.inversion.weights;
    let (h, rows) = read_csv(&dir.path().join("inversion_loss.csv"));
    assert_eq!(rows.len(), 120);
    for row in &rows {
        let v = |name: &str| row[col(&h, name)].parse::<f64>().unwrap();
        let sum = w.alpha * v("kl") + w.beta * v("ce") + w.gamma * v("cosine") + w.delta * v("ortho");
        assert!((sum - v("total")).abs() <= 1e-7 * v("total").abs().max(1.0));
    }
    let evaluated = rows.iter().filter(|r| !r[col(&h, "accuracy")].is_empty()).count();
    assert_eq!(evaluated, 3);
    assert!(manifest.metrics.contains_key("inversion_accuracy"));
    assert!(dir.path().join("samples.pgm").is_file());
    assert!(load_checkpoint(dir.path().join("generator.ninv")).unwrap().into_generator().is_ok());
}

#[test]
fn inversion_without_diversity_terms_completes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(Command::Invert, dir.path());
    cfg.set("inversion.gamma", 0).unwrap();
    cfg.set("inversion.delta", 0).unwrap();
    cfg.set("inversion.steps", 20).unwrap();
    run_command(Command::Invert, &cfg, dir.path()).unwrap();
}

#[test]
fn invert_reuses_a_saved_classifier() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    run_command(Command::TrainClassifier, &quick(Command::TrainClassifier, dir.path()), &src).unwrap();
    let mut cfg = quick(Command::Invert, dir.path());
    cfg.set("classifier.checkpoint", src.join("classifier.ninv").display()).unwrap();
    cfg.set("inversion.steps", 10).unwrap();
    let out = dir.path().join("inv");
    let m = run_command(Command::Invert, &cfg, &out).unwrap();
    assert!(!m.artifacts.contains_key("classifier.ninv"));

    cfg.set("dataset.size", 10).unwrap();
    assert!(matches!(run_command(Command::Invert, &cfg, &out), Err(Error::Config(_))));
}

#[test]
fn reconstruct_reports_one_row_per_reconstruction() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(Command::Reconstruct, dir.path());
    let m = run_command(Command::Reconstruct, &cfg, dir.path()).unwrap();
    let (h, rows) = read_csv(&dir.path().join("privacy.csv"));
    assert_eq!(rows.len(), 6);
    let mean: f64 = rows.iter().map(|r| r[col(&h, "train_ssim")].parse::<f64>().unwrap()).sum::<f64>() / 6.0;
    assert!((mean - m.metrics["mean_ssim_train"]).abs() < 1e-8);
    for r in &rows {
        assert!(r[col(&h, "train_match")].parse::<usize>().unwrap() < 30);
    }
}

#[test]
fn ood_cycle_bookkeeping() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(Command::Ood, dir.path());
    cfg.set("ood.budget", 7).unwrap();
    cfg.set("ood.init_garbage", 10).unwrap();
    cfg.set("ood.capacity_factor", 1).unwrap();
    run_command(Command::Ood, &cfg, dir.path()).unwrap();
    let (h, rows) = read_csv(&dir.path().join("cycles.csv"));
    let sizes: Vec<usize> = rows.iter().map(|r| r[col(&h, "garbage_size")].parse().unwrap()).collect();
    assert_eq!(sizes, vec![10, 17, 24]);
    for name in ["routed_noise", "routed_crosses", "gap", "violations"] {
        col(&h, name);
    }
    assert!(dir.path().join("cycle_1.pgm").is_file() && dir.path().join("cycle_2.pgm").is_file());
    let ckpt: Checkpoint = load_checkpoint(dir.path().join("classifier.ninv")).unwrap();
    assert_eq!(ckpt.metadata["garbage_class"], "3");
    assert_eq!(ckpt.into_classifier().unwrap().classes(), 4);

    let base = dir.path().join("base");
    cfg.set("ood.cycles", 0).unwrap();
    run_command(Command::Ood, &cfg, &base).unwrap();
    let (_, rows) = read_csv(&base.join("cycles.csv"));
    assert_eq!(rows.len(), 1);
    assert!(!base.join("cycle_1.pgm").exists());
}

#[test]
fn evaluate_grid_layout() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(Command::Evaluate, dir.path());
    cfg.set("evaluate.datasets", "bars").unwrap();
    let out = dir.path().join("one");
    let m = run_command(Command::Evaluate, &cfg, &out).unwrap();
    let (h, rows) = read_csv(&out.join("accuracy.csv"));
    assert_eq!(h, vec!["model", "trained_on", "bars"]);
    assert_eq!(rows.len(), 1);
    assert!((rows[0][2].parse::<f64>().unwrap() - m.metrics["0:bars/bars"]).abs() < 1e-8);

    cfg.set("evaluate.datasets", "noise, bars ,crosses").unwrap();
    let out = dir.path().join("three");
    run_command(Command::Evaluate, &cfg, &out).unwrap();
    let (h, rows) = read_csv(&out.join("accuracy.csv"));
    assert_eq!(h[2..], ["noise", "bars", "crosses"]);
    for v in &rows[0][2..] {
        assert!((0.0..=1.0).contains(&v.parse::<f64>().unwrap()));
    }
    let (h, rows) = read_csv(&out.join("threshold.csv"));
    assert_eq!(rows.len(), 1);
    assert!(!rows[0][col(&h, "gap")].is_empty() && !rows[0][col(&h, "violations")].is_empty());

    cfg.set("evaluate.datasets", "crosses").unwrap();
    assert!(matches!(run_command(Command::Evaluate, &cfg, dir.path().join("x")), Err(Error::Config(_))));
}

#[test]
fn evaluate_family_diagonal_matches_training_test_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(Command::Ood, dir.path());
    cfg.set("dataset.family", "rings").unwrap();
    let trained = run_command(Command::Ood, &cfg, dir.path().join("rings")).unwrap();
    cfg.set("dataset.family", "bars").unwrap();
    cfg.set("evaluate.models", dir.path().join("rings/classifier.ninv").display()).unwrap();
    cfg.set("evaluate.datasets", "bars,rings").unwrap();
    let m = run_command(Command::Evaluate, &cfg, dir.path().join("eval")).unwrap();
    assert!((m.metrics["0:rings/rings"] - trained.metrics["id_test_accuracy"]).abs() < 1e-12);
}

#[test]
fn config_errors_are_collected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&[
        ("recon.eta_pix", "inf".to_owned()),
        ("inversion.alpha", "-1".to_owned()),
        ("dataset.family", "stripes".to_owned()),
    ]);
    match run_command(Command::Reconstruct, &cfg, dir.path()) {
        Err(Error::Config(list)) => assert_eq!(list.len(), 3, "{list:?}"),
        other => panic!("{other:?}"),
    }
    let missing = config(&[
        ("dataset.source", "idx".to_owned()),
        ("dataset.train_images", "/nonexistent/a".to_owned()),
        ("dataset.train_labels", "/nonexistent/b".to_owned()),
        ("dataset.test_images", "/nonexistent/c".to_owned()),
        ("dataset.test_labels", "/nonexistent/d".to_owned()),
    ]);
    let result = run_command(Command::TrainClassifier, &missing, dir.path());
    assert_eq!(exit_code(&result), 2);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_netinv");
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# tiny\ntrain.epochs = 2\ndataset.train = 30\ndataset.test = 9\n").unwrap();
    let out = dir.path().join("out");
    let status = Process::new(bin)
        .args(["train-classifier", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(["--seed", "4"])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(0), "{}", String::from_utf8_lossy(&status.stderr));
    assert_eq!(Manifest::load(out.join(MANIFEST)).unwrap().seed, 4);

    std::fs::write(&cfg, "bogus = 1\ntrain.lr = fast\n").unwrap();
    let status = Process::new(bin).args(["ood", "--config"]).arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert_eq!(status.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&status.stderr);
    assert!(stderr.contains("bogus"), "{stderr}");

    std::fs::write(&cfg, "train.optimizer = momentum\ntrain.lr = 1e9\ntrain.epochs = 3\nood.cycles = 1\nood.inversion_steps = 5\nood.warmup = 0\ndataset.train = 30\ndataset.test = 9\n").unwrap();
    let status = Process::new(bin).args(["ood", "--config"]).arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert_eq!(status.status.code(), Some(3), "{}", String::from_utf8_lossy(&status.stderr));
}
