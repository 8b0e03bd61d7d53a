//! Train a classifier, save it to a checksummed checkpoint, reload it and
//! confirm the restored model predicts identically.

use netinv::data::{load_checkpoint, save_checkpoint, synth_dataset, Checkpoint, Family, SynthSpec};
use netinv::model::{Classifier, ClassifierSpec};
use netinv::seed;
use netinv::training::{accuracy, fit, TrainConfig};

fn main() -> netinv::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "classifier.ninv".into());
    let spec = SynthSpec::new(Family::Crosses, 4, 12, 1);
    let (train, test) = synth_dataset(&spec, 200, 100)?;
    let mut clf = Classifier::new(ClassifierSpec::cnn(spec.image_shape(), 4), &mut seed::stream(1, "init/classifier"))?;
    let cfg = TrainConfig { epochs: 5, ..Default::default() };
    fit(&mut clf, train.images(), train.labels(), &cfg, &mut seed::stream(1, "train"), |_, _, _| Ok(()))?;

    save_checkpoint(&Checkpoint::from_classifier(&clf, 1).with_meta("dataset", train.name()), &path)?;
    let ckpt = load_checkpoint(&path)?;
    println!("saved {path}: seed {}, metadata {:?}, {} tensors", ckpt.seed, ckpt.metadata, ckpt.params.len());
    let restored = ckpt.into_classifier()?;
    let same = restored.predict_probs(test.images())? == clf.predict_probs(test.images())?;
    println!("test accuracy {:.3}, restored predictions identical: {same}", accuracy(&restored, test.images(), test.labels())?);
    Ok(())
}
