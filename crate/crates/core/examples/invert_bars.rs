//! Train a small MLP on synthetic bars, then train a generator to invert it.

use std::time::Instant;

use netinv::data::{synth_dataset, Family, SynthSpec};
use netinv::inversion::{train_generator, InversionConfig};
use netinv::model::{Classifier, ClassifierSpec, Generator, GeneratorSpec, CondMode};
use netinv::seed;
use netinv::training::{accuracy, fit, TrainConfig};

fn main() -> netinv::Result<()> {
    let root: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let spec = SynthSpec::new(Family::Bars, 3, 12, root);
    let (train, test) = synth_dataset(&spec, 300, 150)?;

    let t = Instant::now();
    let mut clf = Classifier::new(ClassifierSpec::mlp(spec.image_shape(), 3), &mut seed::stream(root, "init/classifier"))?;
    fit(&mut clf, train.images(), train.labels(), &TrainConfig { epochs: 10, ..Default::default() }, &mut seed::stream(root, "train"), |e, loss, _| {
        println!("epoch {e:2}  loss {loss:.4}");
        Ok(())
    })?;
    let acc = accuracy(&clf, test.images(), test.labels())?;
    println!("test accuracy {acc:.3} ({:.1?})", t.elapsed());
    clf.freeze();

    let t = Instant::now();
    let gspec = GeneratorSpec::new(3, spec.image_shape(), CondMode::Hot);
    let mut gen = Generator::new(gspec, &mut seed::stream(root, "init/generator"))?;
    let cfg = InversionConfig { steps: 5000, target_accuracy: Some(0.95), ..Default::default() };
    let run = train_generator(&mut gen, &clf, &cfg, &mut seed::stream(root, "invert"), |log| {
        if let Some(a) = log.accuracy {
            let terms: Vec<String> = log.breakdown.terms.iter().map(|t| format!("{} {:.3}", t.name, t.value)).collect();
            println!("step {:5}  total {:.4}  accuracy {a:.3}  [{}]", log.step + 1, log.breakdown.total, terms.join(", "));
        }
    })?;
    println!("inversion accuracy {:.3} after {} steps ({:.1?})", run.final_accuracy, run.steps_taken, t.elapsed());
    Ok(())
}
