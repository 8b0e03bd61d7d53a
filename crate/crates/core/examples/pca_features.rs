//! Project the penultimate features of a trained classifier onto their top
//! principal components and report the per-class centroids.

use netinv::data::{synth_dataset, Family, SynthSpec};
use netinv::model::{Classifier, ClassifierSpec};
use netinv::pca::pca_project;
use netinv::seed;
use netinv::training::{fit, TrainConfig};

fn main() -> netinv::Result<()> {
    let spec = SynthSpec::new(Family::Blobs, 3, 12, 2);
    let (train, test) = synth_dataset(&spec, 300, 150)?;
    let mut clf = Classifier::new(ClassifierSpec::mlp(spec.image_shape(), 3), &mut seed::stream(2, "init/classifier"))?;
    fit(&mut clf, train.images(), train.labels(), &TrainConfig::default(), &mut seed::stream(2, "train"), |_, _, _| Ok(()))?;

    let (_, features) = clf.infer(test.images())?;
    let proj = pca_project(&features, 2)?;
    println!("explained variance {:?}", proj.explained_variance);
    for class in 0..3 {
        let rows: Vec<usize> = (0..test.len()).filter(|&i| test.labels()[i] == class).collect();
        let n = rows.len() as f64;
        let (x, y) = rows.iter().fold((0.0, 0.0), |(x, y), &i| (x + proj.coords.row(i)[0], y + proj.coords.row(i)[1]));
        println!("class {class}: {} samples, centroid ({:.3}, {:.3})", rows.len(), x / n, y / n);
    }
    Ok(())
}
