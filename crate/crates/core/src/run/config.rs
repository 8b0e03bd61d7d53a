//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::Family;
use crate::error::{Error, Result};
use crate::inversion::{InversionConfig, InversionWeights};
use crate::model::{ClassifierKind, ClassifierSpec, CondMode, GeneratorSpec};
use crate::ood::OodConfig;
use crate::optim::{OptimConfig, OptimizerKind};
use crate::recon::ReconConfig;
use crate::training::TrainConfig;

/// Every accepted key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "root seed; every phase derives its own stream from it"),
    ("dataset.source", "synth", "synth | idx"),
    ("dataset.family", "bars", "synthetic family: bars | crosses | blobs | rings"),
    ("dataset.classes", "3", "synthetic class count"),
    ("dataset.size", "12", "synthetic canvas side length"),
    ("dataset.channels", "1", "1 or 3"),
    ("dataset.noise", "0.1", "synthetic pixel noise standard deviation"),
    ("dataset.jitter", "0", "synthetic maximum template shift in pixels"),
    ("dataset.train", "300", "synthetic training samples (idx: cap, 0 = all)"),
    ("dataset.test", "150", "synthetic test samples (idx: cap, 0 = all)"),
    ("dataset.name", "", "dataset name used in reports; defaults to the family or 'idx'"),
    ("dataset.train_images", "", "idx training images"),
    ("dataset.train_labels", "", "idx training labels"),
    ("dataset.test_images", "", "idx test images"),
    ("dataset.test_labels", "", "idx test labels"),
    ("model.arch", "mlp", "mlp | cnn"),
    ("model.hidden", "256,128", "mlp hidden widths"),
    ("model.filters", "8,16", "cnn filters of the two conv blocks"),
    ("model.fc", "64", "cnn hidden affine width"),
    ("train.epochs", "20", "classifier epochs"),
    ("train.batch", "32", "classifier batch size"),
    ("train.optimizer", "adam", "adam | momentum"),
    ("train.lr", "0.001", "classifier learning rate"),
    ("train.momentum", "0.9", "momentum coefficient"),
    ("train.weight_decay", "0", "L2 coefficient"),
    ("classifier.checkpoint", "", "trained classifier for invert / reconstruct"),
    ("generator.z_dim", "64", "latent dimension"),
    ("generator.cond", "hot", "hot | hidden"),
    ("generator.cond_dim", "32", "hidden conditioning width"),
    ("generator.dropout", "0.5", "dropout rate on hidden layers"),
    ("generator.hidden", "128,256", "generator hidden widths"),
    ("inversion.alpha", "1", "KL weight"),
    ("inversion.beta", "1", "cross-entropy weight"),
    ("inversion.gamma", "0.5", "cosine-diversity weight"),
    ("inversion.delta", "0.1", "orthogonality weight"),
    ("inversion.kl_smoothing", "0.1", "uniform mass in the KL target"),
    ("inversion.batch", "32", "generator batch size"),
    ("inversion.steps", "5000", "maximum generator updates"),
    ("inversion.lr", "0.002", "generator learning rate"),
    ("inversion.target_accuracy", "0.95", "stop once reached (0 = never)"),
    ("inversion.eval_every", "100", "steps between accuracy evaluations"),
    ("inversion.eval_samples", "300", "samples per accuracy evaluation"),
    ("inversion.grid_per_class", "8", "samples per class in the image grid"),
    ("recon.alpha", "1", "KL weight"),
    ("recon.alpha_pert", "1", "KL weight on perturbed images"),
    ("recon.beta", "1", "cross-entropy weight"),
    ("recon.beta_pert", "1", "cross-entropy weight on perturbed images"),
    ("recon.gamma", "0.25", "cosine-diversity weight"),
    ("recon.delta", "0.1", "orthogonality weight"),
    ("recon.eta_var", "0.1", "total-variation weight"),
    ("recon.eta_pix", "1", "pixel-range weight"),
    ("recon.eta_grad", "0.01", "gradient-norm weight"),
    ("recon.eps_pert", "0.05", "L-infinity perturbation radius"),
    ("recon.kl_smoothing", "0.1", "uniform mass in the KL target"),
    ("recon.batch", "8", "generator batch size"),
    ("recon.steps", "2000", "generator updates"),
    ("recon.lr", "0.002", "generator learning rate"),
    ("recon.samples", "60", "reconstructions scored against the reference sets"),
    ("ood.cycles", "5", "train-invert-exclude cycles"),
    ("ood.init_garbage", "0", "initial noise images (0 = one class's count)"),
    ("ood.budget", "0", "inverted samples per cycle (0 = one class's count)"),
    ("ood.capacity_factor", "4", "garbage capacity as a multiple of the ID set size"),
    ("ood.initial_epochs", "10", "classifier epochs before the first cycle"),
    ("ood.cycle_epochs", "5", "classifier epochs per cycle"),
    ("ood.inversion_steps", "600", "generator updates per cycle"),
    ("ood.warmup", "1", "cycles exempt from the divergence check"),
    ("ood.probes", "noise,crosses", "OOD probe sets: 'noise', 'idx', or synthetic family names"),
    ("ood.probe_count", "150", "images per probe set"),
    ("ood.probe_images", "", "idx images for the 'idx' probe"),
    ("ood.probe_labels", "", "idx labels for the 'idx' probe"),
    ("evaluate.models", "", "comma-separated classifier checkpoints"),
    ("evaluate.datasets", "", "comma-separated datasets: synthetic families, 'noise', or 'idx'"),
];

/// Parsed configuration with every default materialized.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Parse `key = value` lines; `#` starts a comment. All problems are
    /// reported together.
    pub fn parse(text: &str) -> Result<Self> {
        let mut values: BTreeMap<String, String> =
            KEYS.iter().map(|(k, d, _)| (k.to_string(), d.to_string())).collect();
        let mut errors = Vec::new();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                errors.push(format!("line {}: expected 'key = value', got '{line}'", i + 1));
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            if !values.contains_key(k) {
                errors.push(format!("line {}: unknown key '{k}'", i + 1));
                continue;
            }
            if let Some(prev) = seen.insert(k.to_owned(), i + 1) {
                errors.push(format!("line {}: '{k}' already set on line {prev}", i + 1));
            }
            values.insert(k.to_owned(), v.to_owned());
        }
        if errors.is_empty() {
            Ok(RunConfig { values })
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("cannot read config {}: {e}", path.display())]))?;
        Self::parse(&text)
    }

    pub fn defaults() -> Self {
        Self::parse("").expect("defaults parse")
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> Result<()> {
        if !self.values.contains_key(key) {
            return Err(Error::Config(vec![format!("unknown key '{key}'")]));
        }
        self.values.insert(key.to_owned(), value.to_string());
        Ok(())
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    /// Resolved configuration text with every key present.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, _, help) in KEYS {
            out.push_str(&format!("# {help}\n{k} = {}\n", self.get(k)));
        }
        out
    }
}

/// Typed reads that collect every failure instead of stopping at the first.
pub(crate) struct Reader<'a> {
    cfg: &'a RunConfig,
    pub errors: Vec<String>,
}

impl<'a> Reader<'a> {
    pub fn new(cfg: &'a RunConfig) -> Self {
        Reader {
            cfg,
            errors: Vec::new(),
        }
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, what: &str) -> Option<T> {
        let raw = self.cfg.get(key);
        match raw.parse() {
            Ok(v) => Some(v),
            Err(_) => {
                self.errors.push(format!("{key} = '{raw}' is not {what}"));
                None
            }
        }
    }

    pub fn usize(&mut self, key: &str) -> usize {
        self.parse(key, "a non-negative integer").unwrap_or(0)
    }

    pub fn u64(&mut self, key: &str) -> u64 {
        self.parse(key, "a non-negative integer").unwrap_or(0)
    }

    pub fn f64(&mut self, key: &str) -> f64 {
        match self.parse::<f64>(key, "a number") {
            Some(v) if v.is_finite() => v,
            Some(v) => {
                self.errors.push(format!("{key} = {v} must be finite"));
                0.0
            }
            None => 0.0,
        }
    }

    pub fn positive(&mut self, key: &str) -> usize {
        let v = self.usize(key);
        if v == 0 && self.errors.iter().all(|e| !e.starts_with(key)) {
            self.errors.push(format!("{key} must be at least 1"));
        }
        v
    }

    pub fn str(&mut self, key: &str) -> String {
        self.cfg.get(key).to_owned()
    }

    pub fn choice(&mut self, key: &str, options: &[&str]) -> String {
        let v = self.cfg.get(key);
        if !options.contains(&v) {
            self.errors.push(format!("{key} = '{v}' must be one of {}", options.join(" | ")));
        }
        v.to_owned()
    }

    pub fn list(&mut self, key: &str) -> Vec<String> {
        self.cfg
            .get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_owned)
            .collect()
    }

    pub fn usize_list(&mut self, key: &str) -> Vec<usize> {
        let items = self.list(key);
        let mut out = Vec::new();
        for item in items {
            match item.parse() {
                Ok(v) => out.push(v),
                Err(_) => self.errors.push(format!("{key}: '{item}' is not a non-negative integer")),
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synth(crate::data::SynthSpec),
    Idx {
        train_images: String,
        train_labels: String,
        test_images: String,
        test_labels: String,
    },
}

/// Everything a command needs, decoded from a [`RunConfig`].
#[derive(Clone, Debug)]
pub struct Settings {
    pub seed: u64,
    pub source: DataSource,
    pub dataset_name: String,
    pub n_train: usize,
    pub n_test: usize,
    pub arch: String,
    pub mlp_hidden: Vec<usize>,
    pub cnn_filters: [usize; 2],
    pub cnn_fc: usize,
    pub train: TrainConfig,
    pub classifier_checkpoint: String,
    pub generator: GeneratorTemplate,
    pub inversion: InversionConfig,
    pub grid_per_class: usize,
    pub recon: ReconConfig,
    pub recon_samples: usize,
    pub ood: OodConfig,
    pub ood_probes: Vec<String>,
    pub probe_count: usize,
    pub probe_idx: (String, String),
    pub eval_models: Vec<String>,
    pub eval_datasets: Vec<String>,
}

/// Generator settings that do not depend on the classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorTemplate {
    pub z_dim: usize,
    pub hidden_cond: bool,
    pub cond_dim: usize,
    pub dropout: f64,
    pub hidden: Vec<usize>,
}

impl GeneratorTemplate {
    pub fn spec(&self, classes: usize, output: [usize; 3], seed: u64) -> GeneratorSpec {
        let cond = if self.hidden_cond {
            CondMode::Hidden {
                dim: self.cond_dim,
                seed,
            }
        } else {
            CondMode::Hot
        };
        GeneratorSpec {
            z_dim: self.z_dim,
            cond,
            classes,
            dropout: self.dropout,
            hidden: self.hidden.clone(),
            output,
        }
    }
}

fn optim(r: &mut Reader<'_>, prefix: &str) -> OptimConfig {
    let kind = r.choice(&format!("{prefix}.optimizer"), &["adam", "momentum"]);
    let lr = r.f64(&format!("{prefix}.lr"));
    let mut cfg = if kind == "momentum" {
        OptimConfig::momentum(lr, r.f64(&format!("{prefix}.momentum")))
    } else {
        OptimConfig::adam(lr)
    };
    cfg.weight_decay = r.f64(&format!("{prefix}.weight_decay"));
    if lr <= 0.0 {
        r.errors.push(format!("{prefix}.lr must be positive"));
    }
    if let OptimizerKind::Momentum { momentum } = cfg.kind {
        if !(0.0..1.0).contains(&momentum) {
            r.errors.push(format!("{prefix}.momentum must lie in [0, 1)"));
        }
    }
    cfg
}

impl Settings {
    pub fn from_config(cfg: &RunConfig) -> Result<Settings> {
        let mut r = Reader::new(cfg);
        let seed = r.u64("seed");
        let source_kind = r.choice("dataset.source", &["synth", "idx"]);
        let family_name = r.str("dataset.family");
        let family = Family::parse(&family_name);
        if family.is_none() {
            r.errors.push(format!("dataset.family = '{family_name}' is not a synthetic family"));
        }
        let classes = r.positive("dataset.classes");
        let size = r.usize("dataset.size");
        let channels = r.usize("dataset.channels");
        let noise = r.f64("dataset.noise");
        let jitter = r.f64("dataset.jitter");
        let n_train = r.usize("dataset.train");
        let n_test = r.usize("dataset.test");
        let source = if source_kind == "idx" {
            let mut path = |k: &str| {
                let v = r.str(k);
                if v.is_empty() {
                    r.errors.push(format!("{k} is required when dataset.source = idx"));
                }
                v
            };
            DataSource::Idx {
                train_images: path("dataset.train_images"),
                train_labels: path("dataset.train_labels"),
                test_images: path("dataset.test_images"),
                test_labels: path("dataset.test_labels"),
            }
        } else {
            let spec = crate::data::SynthSpec {
                family: family.unwrap_or(Family::Bars),
                classes,
                size,
                channels,
                noise,
                jitter,
                seed: crate::seed::derive_seed(seed, "data"),
            };
            if let Err(e) = spec.validate() {
                r.errors.push(format!("dataset: {e}"));
            }
            if n_train < classes || n_test < classes {
                r.errors.push(format!("dataset.train and dataset.test must be at least dataset.classes ({classes})"));
            }
            DataSource::Synth(spec)
        };
        let mut dataset_name = r.str("dataset.name");
        if dataset_name.is_empty() {
            dataset_name = if source_kind == "idx" { "idx".into() } else { family_name.clone() };
        }

        let arch = r.choice("model.arch", &["mlp", "cnn"]);
        let mlp_hidden = r.usize_list("model.hidden");
        let filters = r.usize_list("model.filters");
        let cnn_filters = match filters.as_slice() {
            [a, b] => [*a, *b],
            _ => {
                r.errors.push("model.filters needs exactly two entries".into());
                [1, 1]
            }
        };
        let cnn_fc = r.positive("model.fc");

        let train = TrainConfig {
            epochs: r.usize("train.epochs"),
            batch_size: r.positive("train.batch"),
            optim: optim(&mut r, "train"),
        };
        let classifier_checkpoint = r.str("classifier.checkpoint");

        let generator = GeneratorTemplate {
            z_dim: r.positive("generator.z_dim"),
            hidden_cond: r.choice("generator.cond", &["hot", "hidden"]) == "hidden",
            cond_dim: r.positive("generator.cond_dim"),
            dropout: r.f64("generator.dropout"),
            hidden: r.usize_list("generator.hidden"),
        };
        if !(0.0..1.0).contains(&generator.dropout) {
            r.errors.push("generator.dropout must lie in [0, 1)".into());
        }

        let target = r.f64("inversion.target_accuracy");
        let inversion = InversionConfig {
            weights: InversionWeights {
                alpha: r.f64("inversion.alpha"),
                beta: r.f64("inversion.beta"),
                gamma: r.f64("inversion.gamma"),
                delta: r.f64("inversion.delta"),
            },
            kl_smoothing: r.f64("inversion.kl_smoothing"),
            batch_size: r.usize("inversion.batch"),
            steps: r.usize("inversion.steps"),
            optim: OptimConfig::adam(r.f64("inversion.lr")),
            target_accuracy: (target > 0.0).then_some(target),
            eval_every: r.usize("inversion.eval_every"),
            eval_samples: r.usize("inversion.eval_samples"),
            seed,
        };
        let mut errs = Vec::new();
        inversion.collect_errors(&mut errs);
        r.errors.extend(errs.into_iter().map(|e| format!("inversion: {e}")));
        let grid_per_class = r.positive("inversion.grid_per_class");

        let recon = ReconConfig {
            inversion: InversionConfig {
                weights: InversionWeights {
                    alpha: r.f64("recon.alpha"),
                    beta: r.f64("recon.beta"),
                    gamma: r.f64("recon.gamma"),
                    delta: r.f64("recon.delta"),
                },
                kl_smoothing: r.f64("recon.kl_smoothing"),
                batch_size: r.usize("recon.batch"),
                steps: r.usize("recon.steps"),
                optim: OptimConfig::adam(r.f64("recon.lr")),
                target_accuracy: None,
                eval_every: 0,
                eval_samples: 300,
                seed,
            },
            alpha_pert: r.f64("recon.alpha_pert"),
            beta_pert: r.f64("recon.beta_pert"),
            eta_var: r.f64("recon.eta_var"),
            eta_pix: r.f64("recon.eta_pix"),
            eta_grad: r.f64("recon.eta_grad"),
            eps_pert: r.f64("recon.eps_pert"),
        };
        let mut errs = Vec::new();
        recon.collect_errors(&mut errs);
        r.errors.extend(errs.into_iter().map(|e| format!("recon: {e}")));
        let recon_samples = r.positive("recon.samples");

        let optional = |v: usize| (v > 0).then_some(v);
        let ood = OodConfig {
            cycles: r.usize("ood.cycles"),
            init_garbage: optional(r.usize("ood.init_garbage")),
            budget: optional(r.usize("ood.budget")),
            capacity_factor: r.positive("ood.capacity_factor"),
            initial_epochs: r.usize("ood.initial_epochs"),
            cycle_epochs: r.usize("ood.cycle_epochs"),
            train: train.clone(),
            inversion: InversionConfig {
                steps: r.usize("ood.inversion_steps"),
                target_accuracy: None,
                eval_every: 0,
                ..inversion.clone()
            },
            warmup_cycles: r.usize("ood.warmup"),
            seed,
        };
        let ood_probes = r.list("ood.probes");
        for p in &ood_probes {
            if p != "noise" && p != "idx" && Family::parse(p).is_none() {
                r.errors.push(format!("ood.probes: '{p}' is not 'noise', 'idx', or a synthetic family"));
            }
        }
        let probe_count = r.positive("ood.probe_count");
        let probe_idx = (r.str("ood.probe_images"), r.str("ood.probe_labels"));
        if ood_probes.iter().any(|p| p == "idx") && (probe_idx.0.is_empty() || probe_idx.1.is_empty()) {
            r.errors.push("ood.probe_images and ood.probe_labels are required for the 'idx' probe".into());
        }
        let eval_models = r.list("evaluate.models");
        let eval_datasets = r.list("evaluate.datasets");
        for d in &eval_datasets {
            if d != "noise" && d != "idx" && Family::parse(d).is_none() {
                r.errors.push(format!("evaluate.datasets: unknown dataset '{d}'"));
            }
        }

        if !r.errors.is_empty() {
            return Err(Error::Config(r.errors));
        }
        Ok(Settings {
            seed,
            source,
            dataset_name,
            n_train,
            n_test,
            arch,
            mlp_hidden,
            cnn_filters,
            cnn_fc,
            train,
            classifier_checkpoint,
            generator,
            inversion,
            grid_per_class,
            recon,
            recon_samples,
            ood,
            ood_probes,
            probe_count,
            probe_idx,
            eval_models,
            eval_datasets,
        })
    }

    pub fn classifier_spec(&self, input: [usize; 3], classes: usize) -> ClassifierSpec {
        let kind = if self.arch == "cnn" {
            ClassifierKind::Cnn {
                filters: self.cnn_filters,
                hidden: self.cnn_fc,
            }
        } else {
            ClassifierKind::Mlp {
                hidden: self.mlp_hidden.clone(),
            }
        };
        ClassifierSpec { kind, input, classes }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let s = Settings::from_config(&RunConfig::defaults()).unwrap();
        assert_eq!(s.inversion.weights, InversionWeights::default());
        assert_eq!(s.recon.inversion.weights.gamma, 0.25);
        assert_eq!(s.ood.cycles, 5);
    }

    #[test]
    fn unknown_keys_reported_together() {
        let err = RunConfig::parse("seed = 1\nfoo = 2\n# comment\nbar=3\nnonsense\n").unwrap_err();
        match err {
            Error::Config(list) => {
                assert_eq!(list.len(), 3);
                assert!(list[0].contains("foo") && list[1].contains("bar"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_values_reported_together() {
        let cfg = RunConfig::parse("recon.eta_pix = inf\ninversion.batch = 1\nmodel.arch = rnn\n").unwrap();
        match Settings::from_config(&cfg).unwrap_err() {
            Error::Config(list) => assert_eq!(list.len(), 3, "{list:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn render_round_trips() {
        let mut cfg = RunConfig::defaults();
        cfg.set("dataset.family", "rings").unwrap();
        assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
    }
}
