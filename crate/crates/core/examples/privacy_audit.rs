//! Reconstruct training-like images from MLP and CNN classifiers trained on
//! 100 synthetic samples, and compare their mean max-SSIM against the training
//! set and a disjoint holdout set.

use std::path::PathBuf;

use netinv::data::{synth_dataset, write_pgm_grid, Family, SynthSpec};
use netinv::model::{Classifier, ClassifierSpec, CondMode, Generator, GeneratorSpec, Mode};
use netinv::recon::{train_reconstructor, ReconConfig};
use netinv::seed;
use netinv::ssim::privacy_score;
use netinv::training::{fit, TrainConfig};

fn main() -> netinv::Result<()> {
    let root: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let out = PathBuf::from(std::env::args().nth(2).unwrap_or_else(|| ".".into()));
    let spec = SynthSpec::new(Family::Bars, 3, 12, root);
    let (train, holdout) = synth_dataset(&spec, 100, 100)?;

    for (name, arch) in [("mlp", ClassifierSpec::mlp(spec.image_shape(), 3)), ("cnn", ClassifierSpec::cnn(spec.image_shape(), 3))] {
        let mut clf = Classifier::new(arch, &mut seed::stream(root, "init/classifier"))?;
        fit(&mut clf, train.images(), train.labels(), &TrainConfig::default(), &mut seed::stream(root, "train"), |_, _, _| Ok(()))?;
        clf.freeze();

        let mut gen = Generator::new(GeneratorSpec::new(3, spec.image_shape(), CondMode::Hot), &mut seed::stream(root, "init/generator"))?;
        let cfg = ReconConfig::default();
        let run = train_reconstructor(&mut gen, &clf, &cfg, &mut seed::stream(root, "reconstruct"), |_| {})?;
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let recons = gen.generate(&labels, Mode::Train, &mut seed::stream(root, "reconstruct/samples"))?;
        let on_train = privacy_score(&recons, train.images(), "train")?;
        let on_holdout = privacy_score(&recons, holdout.images(), "holdout")?;
        write_pgm_grid(&recons, 12, out.join(format!("reconstructions_{name}.pgm")))?;
        println!(
            "{name}: reconstruction accuracy {:.3}, mean max-SSIM train {:.4} holdout {:.4} (difference {:+.4})",
            run.final_accuracy,
            on_train.mean,
            on_holdout.mean,
            on_train.mean - on_holdout.mean
        );
    }
    Ok(())
}
