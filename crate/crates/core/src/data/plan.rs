use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Class order and the per-stage class sets of an incremental run.
///
/// Head columns follow the class order: the class at `class_order[j]` is
/// scored by column `j`, so every stage only ever appends columns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub class_order: Vec<usize>,
    pub stages: Vec<Vec<usize>>,
    /// `n^t`: number of classes seen once stage `t` is done.
    pub cumulative: Vec<usize>,
    /// Inverse of `class_order`.
    column: Vec<usize>,
}

pub fn build_stage_plan(
    num_classes: usize,
    num_stages: usize,
    class_order_seed: u64,
    initial_half: bool,
) -> Result<StagePlan> {
    if num_stages == 0 || num_classes == 0 {
        return Err(Error::Config("need at least one class and one stage".into()));
    }
    let sizes: Vec<usize> = if initial_half && num_stages > 1 {
        let first = num_classes / 2;
        let rest = num_classes - first;
        if first == 0 || !rest.is_multiple_of(num_stages - 1) {
            return Err(Error::Config(format!(
                "{rest} remaining classes cannot be split evenly over {} stages",
                num_stages - 1
            )));
        }
        std::iter::once(first)
            .chain(std::iter::repeat_n(rest / (num_stages - 1), num_stages - 1))
            .collect()
    } else if initial_half {
        return Err(Error::Config(
            "initial_half needs at least two stages to hold the other half".into(),
        ));
    } else {
        if !num_classes.is_multiple_of(num_stages) {
            return Err(Error::Config(format!(
                "{num_classes} classes cannot be split evenly over {num_stages} stages"
            )));
        }
        vec![num_classes / num_stages; num_stages]
    };

    let mut class_order: Vec<usize> = (0..num_classes).collect();
    class_order.shuffle(&mut rng::rng(class_order_seed));

    let mut stages = Vec::with_capacity(sizes.len());
    let mut cumulative = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for s in sizes {
        stages.push(class_order[start..start + s].to_vec());
        start += s;
        cumulative.push(start);
    }
    let mut column = vec![0; num_classes];
    for (j, &c) in class_order.iter().enumerate() {
        column[c] = j;
    }
    Ok(StagePlan {
        class_order,
        stages,
        cumulative,
        column,
    })
}

impl StagePlan {
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_order.len()
    }

    pub fn stage_sizes(&self) -> Vec<usize> {
        self.stages.iter().map(Vec::len).collect()
    }

    /// Head column that scores `class`.
    pub fn column(&self, class: usize) -> usize {
        self.column[class]
    }

    /// `n^t`.
    pub fn seen_after(&self, stage: usize) -> usize {
        self.cumulative[stage]
    }

    /// `n^{t−1}` (0 before the first stage).
    pub fn seen_before(&self, stage: usize) -> usize {
        if stage == 0 {
            0
        } else {
            self.cumulative[stage - 1]
        }
    }

    /// Classes of all stages up to and including `stage`, in plan order.
    pub fn seen_classes(&self, stage: usize) -> &[usize] {
        &self.class_order[..self.cumulative[stage]]
    }

    /// Index of the stage that introduced `class`.
    pub fn stage_of(&self, class: usize) -> usize {
        let col = self.column[class];
        self.cumulative.iter().position(|&n| col < n).expect("every class belongs to a stage")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fifty_one_stage_protocol() {
        let p = build_stage_plan(100, 51, 0, true).unwrap();
        let sizes = p.stage_sizes();
        assert_eq!(sizes[0], 50);
        assert!(sizes[1..].iter().all(|&s| s == 1));
        assert_eq!(sizes.len(), 51);
    }

    #[test]
    fn small_plans() {
        assert_eq!(build_stage_plan(8, 3, 1, true).unwrap().stage_sizes(), vec![4, 2, 2]);
        assert_eq!(build_stage_plan(10, 5, 1, false).unwrap().stage_sizes(), vec![2; 5]);
        assert_eq!(build_stage_plan(8, 3, 1, true).unwrap().cumulative, vec![4, 6, 8]);
    }

    #[test]
    fn indivisible_split_is_a_config_error() {
        assert!(matches!(build_stage_plan(8, 4, 0, true), Err(Error::Config(_))));
        assert!(matches!(build_stage_plan(10, 3, 0, false), Err(Error::Config(_))));
        assert!(build_stage_plan(8, 1, 0, true).is_err());
    }

    #[test]
    fn columns_invert_the_order() {
        let p = build_stage_plan(10, 5, 9, false).unwrap();
        for (j, &c) in p.class_order.iter().enumerate() {
            assert_eq!(p.column(c), j);
        }
        assert_eq!(p.stage_of(p.class_order[0]), 0);
        assert_eq!(p.stage_of(p.class_order[9]), 4);
    }

    proptest! {
        #[test]
        fn stages_partition_the_classes(k in 2usize..60, stages in 1usize..12, half: bool, seed: u64) {
            if let Ok(p) = build_stage_plan(k, stages, seed, half) {
                let mut all: Vec<usize> = p.stages.concat();
                prop_assert_eq!(all.len(), k);
                all.sort_unstable();
                prop_assert_eq!(all, (0..k).collect::<Vec<_>>());
                prop_assert!(p.cumulative.windows(2).all(|w| w[0] < w[1]));
                prop_assert_eq!(&p, &build_stage_plan(k, stages, seed, half).unwrap());
            }
        }
    }
}
