use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Split, StagePlan};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Optional train-time augmentation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augment {
    #[serde(default)]
    pub flip: bool,
    /// Zero-pad by this many pixels and take a random crop of the original size.
    #[serde(default)]
    pub pad_crop: usize,
}

impl Augment {
    pub fn is_identity(&self) -> bool {
        !self.flip && self.pad_crop == 0
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    /// Head columns of the labels (see [`StagePlan::column`]).
    pub targets: Vec<usize>,
    /// Indices into the training split.
    pub indices: Vec<usize>,
}

/// Mini-batches over `D^t ∪ E^t`: the current stage's training examples plus
/// the stored exemplars of earlier classes.
#[derive(Clone, Debug)]
pub struct StageLoader {
    indices: Vec<usize>,
    batch_size: usize,
    augment: Augment,
}

impl StageLoader {
    pub fn new(
        plan: &StagePlan,
        split: &Split,
        stage: usize,
        exemplars: &[usize],
        batch_size: usize,
    ) -> Result<Self> {
        if stage >= plan.num_stages() {
            return Err(Error::Config(format!(
                "stage {stage} out of {} planned",
                plan.num_stages()
            )));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let current = &plan.stages[stage];
        let mut indices: Vec<usize> = split
            .labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| current.contains(l).then_some(i))
            .collect();
        for &e in exemplars {
            if e >= split.len() {
                return Err(Error::Config(format!("exemplar index {e} out of range")));
            }
            indices.push(e);
        }
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() {
            return Err(Error::Config(format!("stage {stage} has no training examples")));
        }
        Ok(StageLoader {
            indices,
            batch_size,
            augment: Augment::default(),
        })
    }

    pub fn with_augment(mut self, augment: Augment) -> Self {
        self.augment = augment;
        self
    }

    /// Sorted training-split indices covered by one epoch.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Index groups of one shuffled epoch; the last group may be short.
    pub fn epoch_order(&self, rng: &mut Rng) -> Vec<Vec<usize>> {
        let mut order = self.indices.clone();
        order.shuffle(rng);
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// Materializes the batches of one shuffled epoch.
    pub fn epoch(&self, plan: &StagePlan, split: &Split, rng: &mut Rng) -> Result<Vec<Batch>> {
        self.epoch_order(rng)
            .into_iter()
            .map(|idx| {
                let mut images = split.images.gather_outer(&idx)?;
                if !self.augment.is_identity() {
                    augment_in_place(&mut images, self.augment, rng);
                }
                Ok(Batch {
                    images,
                    targets: idx.iter().map(|&i| plan.column(split.labels[i])).collect(),
                    indices: idx,
                })
            })
            .collect()
    }
}

fn augment_in_place(images: &mut Tensor, aug: Augment, rng: &mut Rng) {
    let s = images.shape().to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let ex = c * h * w;
    let data = images.data_mut();
    let mut scratch = vec![0.0; ex];
    for i in 0..n {
        let img = &mut data[i * ex..(i + 1) * ex];
        let flip = aug.flip && rng.random_bool(0.5);
        let p = aug.pad_crop as isize;
        let (dy, dx) = if p > 0 {
            (rng.random_range(-p as i64..=p as i64) as isize, rng.random_range(-p as i64..=p as i64) as isize)
        } else {
            (0, 0)
        };
        scratch.copy_from_slice(img);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize + dy;
                    let sx0 = if flip { (w - 1 - x) as isize } else { x as isize };
                    let sx = sx0 + dx;
                    img[(ch * h + y) * w + x] =
                        if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            scratch[(ch * h + sy as usize) * w + sx as usize]
                        } else {
                            0.0
                        };
                }
            }
        }
    }
}
