//! Train a classifier with a garbage class on synthetic bars and watch how
//! crosses and Gaussian-noise probes are routed across train → invert →
//! exclude cycles.

use std::time::Instant;

use netinv::data::{synth_dataset, Family, SynthSpec};
use netinv::model::{Classifier, ClassifierSpec, CondMode, Generator, GeneratorSpec};
use netinv::ood::{init_garbage, ood_training_cycle, OodConfig, OodMonitor};
use netinv::seed;

fn main() -> netinv::Result<()> {
    let root: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let spec = SynthSpec::new(Family::Bars, 3, 12, root);
    let (train, test) = synth_dataset(&spec, 300, 150)?;
    let crosses = synth_dataset(&SynthSpec::new(Family::Crosses, 3, 12, root ^ 0x5eed), 3, 150)?.1;
    let noise = init_garbage(150, spec.image_shape(), 3, 150, &mut seed::stream(root, "probe/noise"))?.images();

    let clf = Classifier::new(ClassifierSpec::mlp(spec.image_shape(), 4), &mut seed::stream(root, "init/classifier"))?;
    let cfg = OodConfig { seed: root, ..Default::default() };
    let monitor = OodMonitor {
        id_test: Some(&test),
        probes: vec![("noise", &noise), ("crosses", crosses.images())],
    };
    let t = Instant::now();
    let factory = |_cycle: usize, rng: &mut seed::Stream| Generator::new(GeneratorSpec::new(4, spec.image_shape(), CondMode::Hot), rng);
    let out = ood_training_cycle(clf, factory, &train, &monitor, &cfg, |r, _| {
        println!(
            "cycle {}  train {:.3}  test {:.3}  inv {:?}  garbage {}  ue {:?}  routing {:?}  gap {:?}",
            r.cycle,
            r.id_train_accuracy,
            r.id_test_accuracy.unwrap_or(f64::NAN),
            r.inversion_accuracy.map(|a| (a * 1000.0).round() / 1000.0),
            r.garbage_size,
            r.mean_inverted_ue.map(|a| (a * 1000.0).round() / 1000.0),
            r.routing,
            r.threshold.as_ref().map(|t| (t.gap, t.violations)),
        );
    })?;
    println!("{} cycles in {:.1?}; final garbage {}", out.reports.len() - 1, t.elapsed(), out.garbage.len());
    Ok(())
}
