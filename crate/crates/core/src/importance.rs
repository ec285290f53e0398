//! Channel importance `I_{ℓ,c} = E‖∂ℒ_cls/∂Z_{ℓ,c}‖²_F`, estimated once per
//! stage, and its per-layer normalization.

use std::io::Write;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::{Split, StagePlan};
use crate::error::{Error, Result};
use crate::losses::classification_terms;
use crate::network::{Mode, Model};
use crate::rng::{self, Stream};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub stage: usize,
    /// Backbone block index of each tapped layer.
    pub layers: Vec<usize>,
    /// Accumulated `Σ‖∇‖²_F` per layer and channel.
    pub raw: Vec<Vec<f64>>,
    pub normalized: Option<Vec<Vec<f64>>>,
    pub sample_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimateOptions {
    pub batch_size: usize,
    pub include_true_class: bool,
    /// Batch statistics instead of running statistics. Examples in a batch
    /// then influence each other's gradients.
    pub train_mode_bn: bool,
    pub sample_limit: Option<usize>,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        EstimateOptions {
            batch_size: 64,
            include_true_class: false,
            train_mode_bn: false,
            sample_limit: None,
        }
    }
}

impl ImportanceTable {
    /// `Ĩ ≡ 1` on every tapped channel.
    pub fn uniform(model: &Model, stage: usize) -> Self {
        let raw: Vec<Vec<f64>> = model.backbone.tap_channels().iter().map(|&c| vec![1.0; c]).collect();
        ImportanceTable {
            stage,
            layers: model.backbone.tap_blocks.clone(),
            normalized: Some(raw.clone()),
            raw,
            sample_count: 0,
        }
    }

    /// Per-example means instead of sums.
    pub fn mean_accumulated(&self) -> ImportanceTable {
        let n = self.sample_count.max(1) as f64;
        ImportanceTable {
            raw: self.raw.iter().map(|l| l.iter().map(|v| v / n).collect()).collect(),
            normalized: None,
            ..self.clone()
        }
    }

    /// `Ĩ_{ℓ,c} = I_{ℓ,c} / mean_c I_{ℓ,c}`. A layer whose raw values are all
    /// zero gets `Ĩ ≡ 1`.
    pub fn finalize(&mut self) {
        let norm = self
            .raw
            .iter()
            .zip(&self.layers)
            .map(|(layer, &l)| {
                let mean = layer.iter().sum::<f64>() / layer.len() as f64;
                if mean > 0.0 {
                    layer.iter().map(|v| v / mean).collect()
                } else {
                    log::warn!("layer {l}: all raw importances are zero; using uniform weights");
                    vec![1.0; layer.len()]
                }
            })
            .collect();
        self.normalized = Some(norm);
    }

    pub fn finalized(mut self) -> Self {
        self.finalize();
        self
    }

    /// Normalized values; uniform if [`finalize`](Self::finalize) has not run.
    pub fn weights(&self) -> Vec<Vec<f64>> {
        match &self.normalized {
            Some(n) => n.clone(),
            None => self.raw.iter().map(|l| vec![1.0; l.len()]).collect(),
        }
    }

    /// `|mean_c Ĩ_{ℓ,c} − 1|`, worst layer.
    pub fn max_mean_deviation(&self) -> Option<f64> {
        self.normalized.as_ref().map(|n| {
            n.iter()
                .map(|l| (l.iter().sum::<f64>() / l.len() as f64 - 1.0).abs())
                .fold(0.0, f64::max)
        })
    }

    pub fn write_csv<W: Write>(&self, mut w: W, header: bool) -> std::io::Result<()> {
        if header {
            writeln!(w, "stage,layer,channel,raw,normalized")?;
        }
        let norm = self.weights();
        for ((&layer, raw), norm) in self.layers.iter().zip(&self.raw).zip(&norm) {
            for (c, (r, n)) in raw.iter().zip(norm).enumerate() {
                writeln!(w, "{},{layer},{c},{r},{n}", self.stage)?;
            }
        }
        Ok(())
    }
}

/// Accumulates per-example squared gradient norms of the classification
/// loss at every tap, over `indices` of `split` (in the given order).
pub fn estimate(
    model: &Model,
    split: &Split,
    indices: &[usize],
    plan: &StagePlan,
    stage: usize,
    opts: &EstimateOptions,
) -> Result<ImportanceTable> {
    if model.backbone.tap_blocks.is_empty() {
        return Err(Error::Contract("importance estimation needs at least one tap".into()));
    }
    if opts.sample_limit == Some(0) || opts.batch_size == 0 {
        return Err(Error::Config("sample_limit and batch_size must be positive".into()));
    }
    let indices = match opts.sample_limit {
        Some(n) if n < indices.len() => &indices[..n],
        _ => indices,
    };
    if indices.is_empty() {
        return Err(Error::Config("importance estimation over an empty set".into()));
    }
    let mut raw: Vec<Vec<f64>> = model.backbone.tap_channels().iter().map(|&c| vec![0.0; c]).collect();
    let mode = if opts.train_mode_bn { Mode::Train } else { Mode::Eval };
    for chunk in indices.chunks(opts.batch_size) {
        let images = split.images.gather_outer(chunk)?;
        let targets: Vec<usize> = chunk.iter().map(|&i| plan.column(split.labels[i])).collect();
        let mut tape = Tape::new();
        let x = tape.constant(&images)?;
        let f = model.forward(&mut tape, x, mode, true)?;
        let eta = *f.params.last().expect("eta leaf");
        let terms = classification_terms(
            &mut tape,
            f.scores,
            &targets,
            eta,
            model.head.delta,
            opts.include_true_class,
        )?;
        let loss = tape.sum(terms)?;
        let grads = tape.backward(loss)?;
        for (tap, acc) in f.taps.iter().zip(raw.iter_mut()) {
            accumulate_channel_norms(&grads.get(tap.maps), acc);
        }
    }
    Ok(ImportanceTable {
        stage,
        layers: model.backbone.tap_blocks.clone(),
        raw,
        normalized: None,
        sample_count: indices.len(),
    })
}

/// Adds `‖g_{b,c}‖²_F` of every example `b` to `acc[c]`, examples in order.
pub fn accumulate_channel_norms(grad: &Tensor, acc: &mut [f64]) {
    let s = grad.shape();
    let hw = s[2] * s[3];
    for example in grad.data().chunks(s[1] * hw) {
        for (c, map) in example.chunks(hw).enumerate() {
            acc[c] += map.iter().map(|v| v * v).sum::<f64>();
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariabilityRow {
    pub sample_size: usize,
    /// Standard deviation of `Ĩ` across repeats, per layer and channel.
    pub std: Vec<Vec<f64>>,
    pub mean_std: f64,
}

/// Re-estimates `Ĩ` on `repeats` random subsets of each size and reports
/// the spread across repeats.
#[allow(clippy::too_many_arguments)]
pub fn importance_variability(
    model: &Model,
    split: &Split,
    indices: &[usize],
    plan: &StagePlan,
    sample_sizes: &[usize],
    repeats: usize,
    seed: u64,
    opts: &EstimateOptions,
) -> Result<Vec<VariabilityRow>> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be positive".into()));
    }
    if repeats == 1 {
        log::warn!("a single repeat has no spread; reporting zero deviation");
    }
    let mut rows = Vec::with_capacity(sample_sizes.len());
    for (si, &size) in sample_sizes.iter().enumerate() {
        if size == 0 || size > indices.len() {
            return Err(Error::Config(format!(
                "sample size {size} outside 1..={}",
                indices.len()
            )));
        }
        let mut runs = Vec::with_capacity(repeats);
        for r in 0..repeats {
            let mut g = rng::rng(rng::derive(seed, Stream::Subsample, (si * repeats + r) as u64));
            let mut subset: Vec<usize> = index::sample(&mut g, indices.len(), size)
                .into_iter()
                .map(|i| indices[i])
                .collect();
            subset.sort_unstable();
            let opts = EstimateOptions {
                sample_limit: None,
                ..*opts
            };
            runs.push(estimate(model, split, &subset, plan, 0, &opts)?.finalized().weights());
        }
        let std: Vec<Vec<f64>> = runs[0]
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                (0..layer.len())
                    .map(|c| {
                        if repeats < 2 {
                            return 0.0;
                        }
                        let vals: Vec<f64> = runs.iter().map(|run| run[l][c]).collect();
                        let mean = vals.iter().sum::<f64>() / repeats as f64;
                        let ss: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum();
                        (ss / (repeats - 1) as f64).sqrt()
                    })
                    .collect()
            })
            .collect();
        let count: usize = std.iter().map(Vec::len).sum();
        let mean_std = std.iter().flatten().sum::<f64>() / count as f64;
        rows.push(VariabilityRow {
            sample_size: size,
            std,
            mean_std,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_stage_plan, make_synthetic, SyntheticSpec};
    use crate::network::NetworkConfig;

    fn table(raw: Vec<Vec<f64>>) -> ImportanceTable {
        ImportanceTable {
            stage: 0,
            layers: (0..raw.len()).collect(),
            raw,
            normalized: None,
            sample_count: 4,
        }
    }

    #[test]
    fn finalize_examples() {
        let t = table(vec![vec![2.0, 4.0, 6.0], vec![3.0; 3], vec![14.0, 28.0, 42.0]]).finalized();
        let n = t.normalized.unwrap();
        assert_eq!(n[0], vec![0.5, 1.0, 1.5]);
        assert_eq!(n[1], vec![1.0; 3]);
        assert_eq!(n[2], n[0]);
    }

    #[test]
    fn all_zero_layer_falls_back_to_uniform() {
        let t = table(vec![vec![0.0; 4], vec![1.0, 3.0]]).finalized();
        assert_eq!(t.normalized.as_ref().unwrap()[0], vec![1.0; 4]);
        assert_eq!(t.max_mean_deviation(), Some(0.0));
    }

    #[test]
    fn sum_and_mean_accumulation_agree_for_power_of_two_counts() {
        let t = table(vec![vec![0.3, 1.7, 2.9, 0.01]]);
        assert_eq!(t.clone().finalized().normalized, t.mean_accumulated().finalized().normalized);
    }

    #[test]
    fn linear_tap_gradient_accumulates_n_times_its_norm() {
        // ℒ = Σ_b ⟨G, Z_b⟩ on a single channel: ∇_{Z_b} ℒ = G for every b.
        let g = [1.0, -2.0, 0.5, 3.0];
        let n = 5;
        let mut tape = Tape::new();
        let z = tape.param(&Tensor::new(vec![n, 1, 2, 2], (0..4 * n).map(|i| i as f64).collect()).unwrap()).unwrap();
        let gt = tape.constant(&Tensor::new(vec![n, 1, 2, 2], g.repeat(n)).unwrap()).unwrap();
        let prod = tape.mul(z, gt).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grad = tape.backward_wrt(loss, &[z]).unwrap().remove(0);
        let mut acc = [0.0];
        accumulate_channel_norms(&grad, &mut acc);
        let g2: f64 = g.iter().map(|v| v * v).sum();
        assert_eq!(acc[0], n as f64 * g2);
    }

    #[test]
    fn csv_layout() {
        let t = table(vec![vec![2.0, 6.0]]).finalized();
        let mut buf = Vec::new();
        t.write_csv(&mut buf, true).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "stage,layer,channel,raw,normalized\n0,0,0,2,0.5\n0,0,1,6,1.5\n"
        );
    }

    fn fixture() -> (Model, crate::data::Dataset, StagePlan) {
        let ds = make_synthetic(&SyntheticSpec::new(4, 6, 8, 3)).unwrap();
        let plan = build_stage_plan(4, 1, 0, false).unwrap();
        let cfg = NetworkConfig {
            channels: vec![3, 4],
            proxies_per_class: 2,
            ..NetworkConfig::default()
        };
        let model = Model::new(&cfg, 1, 4, &mut rng::rng(1)).unwrap();
        (model, ds, plan)
    }

    #[test]
    fn estimation_is_deterministic_and_read_only() {
        let (model, ds, plan) = fixture();
        let idx: Vec<usize> = (0..ds.train.len()).collect();
        let digest = model.digest();
        let a = estimate(&model, &ds.train, &idx, &plan, 0, &EstimateOptions::default()).unwrap();
        let b = estimate(&model, &ds.train, &idx, &plan, 0, &EstimateOptions::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(model.digest(), digest);
        assert_eq!(a.sample_count, 24);
        assert!(a.raw.iter().flatten().all(|&v| v >= 0.0));
        assert!(a.raw.iter().flatten().any(|&v| v > 0.0));
    }

    #[test]
    fn batching_does_not_change_raw_values() {
        let (model, ds, plan) = fixture();
        let idx: Vec<usize> = (0..ds.train.len()).collect();
        let one = EstimateOptions {
            batch_size: 1,
            ..EstimateOptions::default()
        };
        let a = estimate(&model, &ds.train, &idx, &plan, 0, &one).unwrap();
        let b = estimate(&model, &ds.train, &idx, &plan, 0, &EstimateOptions::default()).unwrap();
        for (x, y) in a.raw.iter().flatten().zip(b.raw.iter().flatten()) {
            assert!((x - y).abs() <= 1e-10 * x.abs().max(1e-300), "{x} vs {y}");
        }
    }

    #[test]
    fn duplicating_examples_doubles_raw() {
        let (model, ds, plan) = fixture();
        let idx: Vec<usize> = (0..ds.train.len()).collect();
        let twice: Vec<usize> = idx.iter().chain(&idx).copied().collect();
        let opts = EstimateOptions {
            batch_size: idx.len(),
            ..EstimateOptions::default()
        };
        let a = estimate(&model, &ds.train, &idx, &plan, 0, &opts).unwrap();
        let b = estimate(&model, &ds.train, &twice, &plan, 0, &opts).unwrap();
        for (x, y) in a.raw.iter().flatten().zip(b.raw.iter().flatten()) {
            assert!((2.0 * x - y).abs() <= 1e-12 * y.abs(), "{x} {y}");
        }
    }

    #[test]
    fn channel_without_downstream_effect_has_zero_importance() {
        let (mut model, ds, plan) = fixture();
        // Block 1 no longer reads channel 2 of block 0.
        let k = &mut model.backbone.blocks[1].kernel;
        let (cout, cin) = (k.shape()[0], k.shape()[1]);
        for o in 0..cout {
            for tap in 0..9 {
                k.data_mut()[(o * cin + 2) * 9 + tap] = 0.0;
            }
        }
        let idx: Vec<usize> = (0..ds.train.len()).collect();
        let t = estimate(&model, &ds.train, &idx, &plan, 0, &EstimateOptions::default()).unwrap();
        assert_eq!(t.raw[0][2], 0.0);
        assert!(t.raw[0][0] > 0.0);
    }

    #[test]
    fn rejects_zero_limit() {
        let (model, ds, plan) = fixture();
        let opts = EstimateOptions {
            sample_limit: Some(0),
            ..EstimateOptions::default()
        };
        assert!(estimate(&model, &ds.train, &[0, 1], &plan, 0, &opts).is_err());
    }

    #[test]
    fn full_size_subsets_have_no_spread() {
        let (model, ds, plan) = fixture();
        let idx: Vec<usize> = (0..ds.train.len()).collect();
        let rows = importance_variability(
            &model,
            &ds.train,
            &idx,
            &plan,
            &[1, idx.len()],
            4,
            9,
            &EstimateOptions::default(),
        )
        .unwrap();
        assert_eq!(rows[1].mean_std, 0.0);
        assert!(rows[0].mean_std > rows[1].mean_std);
        let single = importance_variability(&model, &ds.train, &idx, &plan, &[3], 1, 9, &EstimateOptions::default())
            .unwrap();
        assert_eq!(single[0].mean_std, 0.0);
        assert!(importance_variability(&model, &ds.train, &idx, &plan, &[25], 2, 9, &EstimateOptions::default())
            .is_err());
    }

    #[test]
    fn uniform_table_is_all_ones() {
        let (model, _, _) = fixture();
        let t = ImportanceTable::uniform(&model, 2);
        assert!(t.weights().iter().flatten().all(|&v| v == 1.0));
    }
}
