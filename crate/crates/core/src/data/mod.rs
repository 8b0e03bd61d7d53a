//! Datasets, file formats, and artifact writers.

mod checkpoint;
mod csv;
mod idx;
mod pgm;
mod synth;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ModelDescriptor, CHECKPOINT_VERSION};
pub use csv::{csv_string, format_float, write_csv, Cell, ColumnKind, Schema};
pub use idx::load_idx;
pub use pgm::{encode_grid, grid_dims, write_pgm_grid};
pub use synth::{synth_dataset, Family, SynthSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

/// Labeled images `[N × C × H × W]` with pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    name: String,
    split: Split,
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, split: Split, images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 {
            return Err(Error::dim("dataset", format!("images must be [N, C, H, W], got {s:?}")));
        }
        if s[0] != labels.len() {
            return Err(Error::Consistency(format!("{} images but {} labels", s[0], labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Domain(format!("label {l} out of range for {classes} classes")));
        }
        if let Some(p) = images.data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Domain(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Dataset {
            name: name.into(),
            split,
            images,
            labels,
            classes,
        })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of a single image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// The first `n` samples (or all of them if fewer).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let images = self.images.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(self.name.clone(), self.split, images, labels, self.classes)
    }

    /// Count of samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}
