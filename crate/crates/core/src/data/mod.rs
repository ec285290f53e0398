//! Datasets, the incremental stage plan and mini-batch loading.

mod idx;
mod loader;
mod plan;
mod synthetic;

pub use idx::{load_idx_dataset, write_idx_images, write_idx_labels};
pub use loader::{Augment, Batch, StageLoader};
pub use plan::{build_stage_plan, StagePlan};
pub use synthetic::{make_synthetic, SyntheticSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images `[N, C, H, W]` in `[0, 1]` with their class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::dim(
                "Split::new",
                format!("{} labels for images {:?}", labels.len(), images.shape()),
            ));
        }
        Ok(Split { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of a single example.
    pub fn example_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == class).then_some(i))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    pub num_classes: usize,
}

impl Dataset {
    /// Validates class ids and per-class coverage of both splits.
    pub fn new(train: Split, test: Split, num_classes: usize) -> Result<Self> {
        if train.example_shape() != test.example_shape() {
            return Err(Error::Config(format!(
                "train examples {:?} vs test examples {:?}",
                train.example_shape(),
                test.example_shape()
            )));
        }
        for (name, split) in [("train", &train), ("test", &test)] {
            let mut counts = vec![0usize; num_classes];
            for &l in &split.labels {
                if l >= num_classes {
                    return Err(Error::Config(format!(
                        "{name} label {l} outside [0, {num_classes})"
                    )));
                }
                counts[l] += 1;
            }
            if let Some(k) = counts.iter().position(|&c| c == 0) {
                return Err(Error::Config(format!("class {k} has no {name} examples")));
            }
        }
        Ok(Dataset {
            train,
            test,
            num_classes,
        })
    }
}

/// Class-prior weights of the old/new label mixture at one stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixtureWeights {
    phi_old: f64,
}

impl MixtureWeights {
    pub fn new(phi_old: f64) -> Result<Self> {
        if !(phi_old > 0.0 && phi_old < 1.0) {
            return Err(Error::Contract(format!("phi_old = {phi_old} not in (0, 1)")));
        }
        Ok(MixtureWeights { phi_old })
    }

    /// Weights implied by the number of training examples on each side.
    pub fn from_counts(old: usize, new: usize) -> Result<Self> {
        Self::new(old as f64 / (old + new) as f64)
    }

    pub fn phi_old(&self) -> f64 {
        self.phi_old
    }

    pub fn phi_new(&self) -> f64 {
        1.0 - self.phi_old
    }
}
