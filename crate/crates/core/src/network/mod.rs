//! Convolutional backbone with feature taps and the local similarity
//! classifier head.
//!
//! A [`Model`] owns plain tensors. Each forward pass records them on a fresh
//! [`Tape`], either as trainable leaves (student) or as constants (the frozen
//! [`Teacher`]).

mod head;

pub use head::{lsc_scores, LscHead};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{BatchStats, Tape, Tensor, Var};

const BN_EPS: f64 = 1e-5;
const EMBED_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default = "default_channels")]
    pub channels: Vec<usize>,
    /// Zero-based indices of the blocks whose outputs are tapped.
    /// Empty means every block.
    #[serde(default)]
    pub taps: Vec<usize>,
    #[serde(default = "default_proxies")]
    pub proxies_per_class: usize,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_eta")]
    pub eta_init: f64,
    /// Lower bound enforced on `η` after every optimizer step.
    #[serde(default = "default_eta")]
    pub eta_min: f64,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
}

fn default_channels() -> Vec<usize> {
    vec![16, 32, 64]
}
fn default_proxies() -> usize {
    10
}
fn default_delta() -> f64 {
    0.6
}
fn default_eta() -> f64 {
    1.0
}
fn default_bn_momentum() -> f64 {
    0.1
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            channels: default_channels(),
            taps: Vec::new(),
            proxies_per_class: default_proxies(),
            delta: default_delta(),
            eta_init: default_eta(),
            eta_min: default_eta(),
            bn_momentum: default_bn_momentum(),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("network.channels must be non-empty and positive".into()));
        }
        if let Some(&t) = self.taps.iter().find(|&&t| t >= self.channels.len()) {
            return Err(Error::Config(format!(
                "tap {t} out of range for {} blocks",
                self.channels.len()
            )));
        }
        if self.proxies_per_class == 0 {
            return Err(Error::Config("proxies_per_class must be positive".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config(format!("bn_momentum = {}", self.bn_momentum)));
        }
        if !(self.eta_init.is_finite() && self.delta.is_finite()) {
            return Err(Error::Config("eta_init and delta must be finite".into()));
        }
        if !(self.eta_min > 0.0 && self.eta_min <= self.eta_init) {
            return Err(Error::Config(format!(
                "eta_min = {} must lie in (0, eta_init]",
                self.eta_min
            )));
        }
        Ok(())
    }

    fn tap_blocks(&self) -> Vec<usize> {
        if self.taps.is_empty() {
            (0..self.channels.len()).collect()
        } else {
            let mut t = self.taps.clone();
            t.sort_unstable();
            t.dedup();
            t
        }
    }
}

/// conv3×3 (no bias) → batch norm → ReLU → 2×2 average pool (skipped on odd
/// spatial extents).
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub kernel: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl Block {
    fn new(cin: usize, cout: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / (cin * 9) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let kernel = (0..cout * cin * 9).map(|_| normal.sample(rng)).collect();
        Block {
            kernel: Tensor::new(vec![cout, cin, 3, 3], kernel).expect("kernel shape"),
            gamma: Tensor::full(&[cout], 1.0),
            beta: Tensor::zeros(&[cout]),
            running_mean: vec![0.0; cout],
            running_var: vec![1.0; cout],
        }
    }

    pub fn channels(&self) -> usize {
        self.kernel.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub blocks: Vec<Block>,
    pub tap_blocks: Vec<usize>,
    pub in_channels: usize,
}

impl Backbone {
    pub fn embedding_dim(&self) -> usize {
        self.blocks.last().map_or(0, Block::channels)
    }

    /// Channel count of every tapped layer, in tap order.
    pub fn tap_channels(&self) -> Vec<usize> {
        self.tap_blocks.iter().map(|&b| self.blocks[b].channels()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running averages updated afterwards.
    Train,
    /// Stored running statistics.
    Eval,
}

/// Feature maps `[B, C, H, W]` captured at one tapped block.
#[derive(Clone, Copy, Debug)]
pub struct FeatureTap {
    pub layer: usize,
    pub channels: usize,
    pub maps: Var,
}

/// Handles produced by one forward pass.
#[derive(Debug)]
pub struct Forward {
    /// `[B, n]` LSC scores in head-column order.
    pub scores: Var,
    pub taps: Vec<FeatureTap>,
    /// `[B, d]`, L2-normalized.
    pub embedding: Var,
    /// Leaves in [`Model::params`] order.
    pub params: Vec<Var>,
    /// Per-block batch statistics (training mode only).
    pub batch_stats: Vec<Option<BatchStats>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: Backbone,
    pub head: LscHead,
    bn_momentum: f64,
}

impl Model {
    /// Fresh model for `[C, H, W]` inputs with `classes` head classes.
    pub fn new(cfg: &NetworkConfig, in_channels: usize, classes: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(cfg.channels.len());
        let mut cin = in_channels;
        for &cout in &cfg.channels {
            blocks.push(Block::new(cin, cout, rng));
            cin = cout;
        }
        let backbone = Backbone {
            blocks,
            tap_blocks: cfg.tap_blocks(),
            in_channels,
        };
        let mut head = LscHead::new(backbone.embedding_dim(), cfg.proxies_per_class, cfg.eta_init, cfg.delta);
        if classes > 0 {
            head.grow(classes, rng)?;
        }
        Ok(Model {
            backbone,
            head,
            bn_momentum: cfg.bn_momentum,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    /// Trainable tensors: per block kernel, γ, β; then proxies and η.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(3 * self.backbone.blocks.len() + 2);
        for b in &self.backbone.blocks {
            out.extend([&b.kernel, &b.gamma, &b.beta]);
        }
        out.extend([&self.head.proxies, &self.head.eta]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(3 * self.backbone.blocks.len() + 2);
        for b in &mut self.backbone.blocks {
            out.extend([&mut b.kernel, &mut b.gamma, &mut b.beta]);
        }
        out.extend([&mut self.head.proxies, &mut self.head.eta]);
        out
    }

    /// Whether `params()[i]` belongs to the classifier head.
    pub fn is_head_param(&self, i: usize) -> bool {
        i >= 3 * self.backbone.blocks.len()
    }

    /// Every stored value, parameters and running statistics alike, in a
    /// fixed order. This is what checkpoints persist.
    pub fn state(&self) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = Vec::new();
        for b in &self.backbone.blocks {
            let c = b.channels();
            out.extend([
                b.kernel.clone(),
                b.gamma.clone(),
                b.beta.clone(),
                Tensor::new(vec![c], b.running_mean.clone()).expect("channels"),
                Tensor::new(vec![c], b.running_var.clone()).expect("channels"),
            ]);
        }
        out.extend([self.head.proxies.clone(), self.head.eta.clone()]);
        out
    }

    /// Inverse of [`Model::state`]; shapes must match this model's layout
    /// except for the proxy count, which follows the stored tensor.
    pub fn load_state(&mut self, state: &[Tensor]) -> Result<()> {
        let nb = self.backbone.blocks.len();
        if state.len() != 5 * nb + 2 {
            return Err(Error::Contract(format!(
                "{} state tensors for a {nb}-block model",
                state.len()
            )));
        }
        let check = |a: &Tensor, b: &Tensor| {
            if a.shape() == b.shape() {
                Ok(())
            } else {
                Err(Error::dim("load_state", format!("{:?} vs {:?}", a.shape(), b.shape())))
            }
        };
        for (b, s) in self.backbone.blocks.iter_mut().zip(state.chunks(5)) {
            check(&b.kernel, &s[0])?;
            check(&b.gamma, &s[1])?;
            check(&b.beta, &s[2])?;
            check(&b.gamma, &s[3])?;
            check(&b.gamma, &s[4])?;
            b.kernel = s[0].clone();
            b.gamma = s[1].clone();
            b.beta = s[2].clone();
            b.running_mean = s[3].data().to_vec();
            b.running_var = s[4].data().to_vec();
        }
        let proxies = &state[5 * nb];
        let j = self.head.proxies_per_class();
        if proxies.rank() != 2 || proxies.shape()[1] != self.head.dim() || !proxies.shape()[0].is_multiple_of(j) {
            return Err(Error::dim("load_state", format!("proxies {:?}", proxies.shape())));
        }
        check(&self.head.eta, &state[5 * nb + 1])?;
        self.head.proxies = proxies.clone();
        self.head.eta = state[5 * nb + 1].clone();
        Ok(())
    }

    /// SHA-256 over the shapes and little-endian bytes of [`Model::state`].
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in self.state() {
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Records a forward pass of `x` (`[B, C, H, W]`). With `trainable`
    /// false, parameters enter the tape as constants.
    pub fn forward(&self, tape: &mut Tape, x: Var, mode: Mode, trainable: bool) -> Result<Forward> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.backbone.in_channels {
            return Err(Error::dim(
                "forward",
                format!("input {s:?}, expected [B, {}, H, W]", self.backbone.in_channels),
            ));
        }
        let leaf = |tape: &mut Tape, t: &Tensor| if trainable { tape.param(t) } else { tape.constant(t) };
        let mut params = Vec::with_capacity(3 * self.backbone.blocks.len() + 2);
        let mut taps = Vec::new();
        let mut batch_stats = Vec::with_capacity(self.backbone.blocks.len());
        let mut z = x;
        for (i, b) in self.backbone.blocks.iter().enumerate() {
            let k = leaf(tape, &b.kernel)?;
            let g = leaf(tape, &b.gamma)?;
            let be = leaf(tape, &b.beta)?;
            params.extend([k, g, be]);
            let conv = tape.conv2d(z, k, 1)?;
            let running = match mode {
                Mode::Train => None,
                Mode::Eval => Some((&b.running_mean[..], &b.running_var[..])),
            };
            let (bn, stats) = tape.batch_norm(conv, g, be, running, BN_EPS)?;
            batch_stats.push(stats);
            let act = tape.relu(bn)?;
            let (h, w) = (tape.shape(act)[2], tape.shape(act)[3]);
            z = if h % 2 == 0 && w % 2 == 0 { tape.avg_pool(act, 2)? } else { act };
            if self.backbone.tap_blocks.contains(&i) {
                taps.push(FeatureTap {
                    layer: i,
                    channels: b.channels(),
                    maps: z,
                });
            }
        }
        let zs = tape.shape(z).to_vec();
        let (bsz, d, hw) = (zs[0], zs[1], zs[2] * zs[3]);
        let flat = tape.reshape(z, vec![bsz, d, hw])?;
        let pooled = tape.sum_last_axis(flat)?;
        let pooled = tape.scale(pooled, 1.0 / hw as f64)?;
        let embedding = tape.normalize(pooled, d, EMBED_EPS)?;
        let p = leaf(tape, &self.head.proxies)?;
        let eta = leaf(tape, &self.head.eta)?;
        params.extend([p, eta]);
        let scores = self.head.record_scores(tape, embedding, p)?;
        Ok(Forward {
            scores,
            taps,
            embedding,
            params,
            batch_stats,
        })
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[Option<BatchStats>]) {
        let m = self.bn_momentum;
        for (b, s) in self.backbone.blocks.iter_mut().zip(stats) {
            let Some(s) = s else { continue };
            let unbias = if s.count > 1 {
                s.count as f64 / (s.count - 1) as f64
            } else {
                1.0
            };
            for c in 0..b.running_mean.len() {
                b.running_mean[c] = (1.0 - m) * b.running_mean[c] + m * s.mean[c];
                b.running_var[c] = (1.0 - m) * b.running_var[c] + m * s.var[c] * unbias;
            }
        }
    }

    /// Eval-mode scores and embeddings for a batch of images, without
    /// keeping the tape.
    pub fn infer(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let x = tape.constant(images)?;
        let f = self.forward(&mut tape, x, Mode::Eval, false)?;
        Ok((tape.value(f.scores).clone(), tape.value(f.embedding).clone()))
    }

    /// [`Model::infer`] over `images` in chunks of `batch` rows.
    pub fn infer_batched(&self, images: &Tensor, batch: usize) -> Result<(Tensor, Tensor)> {
        let n = images.shape()[0];
        let (mut scores, mut emb) = (Vec::new(), Vec::new());
        let mut start = 0;
        while start < n {
            let end = (start + batch.max(1)).min(n);
            let (s, e) = self.infer(&images.slice_outer(start, end)?)?;
            scores.extend_from_slice(s.data());
            emb.extend_from_slice(e.data());
            start = end;
        }
        Ok((
            Tensor::new(vec![n, self.num_classes()], scores)?,
            Tensor::new(vec![n, self.backbone.embedding_dim()], emb)?,
        ))
    }

    pub fn clone_frozen(&self) -> Teacher {
        Teacher(self.clone())
    }
}

/// Immutable snapshot `M^{t−1}`: always evaluated in eval mode with its
/// parameters recorded as constants.
#[derive(Clone, Debug, PartialEq)]
pub struct Teacher(Model);

impl Teacher {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Forward> {
        self.0.forward(tape, x, Mode::Eval, false)
    }

    pub fn model(&self) -> &Model {
        &self.0
    }

    pub fn clone_frozen(&self) -> Teacher {
        self.clone()
    }

    pub fn digest(&self) -> String {
        self.0.digest()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn small() -> NetworkConfig {
        NetworkConfig {
            channels: vec![4, 6],
            proxies_per_class: 2,
            ..NetworkConfig::default()
        }
    }

    fn images(b: usize, seed: u64) -> Tensor {
        let mut r = rng::rng(seed);
        let n = Normal::new(0.5, 0.2).unwrap();
        Tensor::new(vec![b, 1, 8, 8], (0..b * 64).map(|_| n.sample(&mut r)).collect()).unwrap()
    }

    #[test]
    fn forward_shapes() {
        let m = Model::new(&small(), 1, 4, &mut rng::rng(0)).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&images(2, 1)).unwrap();
        let f = m.forward(&mut tape, x, Mode::Train, true).unwrap();
        assert_eq!(tape.shape(f.scores), &[2, 4]);
        assert_eq!(tape.shape(f.embedding), &[2, 6]);
        assert_eq!(f.taps.len(), 2);
        assert_eq!(tape.shape(f.taps[0].maps), &[2, 4, 4, 4]);
        assert_eq!(tape.shape(f.taps[1].maps), &[2, 6, 2, 2]);
        assert_eq!(f.params.len(), m.params().len());
        for row in tape.value(f.embedding).data().chunks(6) {
            let n: f64 = row.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-9);
        }
        for &s in tape.value(f.scores).data() {
            assert!((-1.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn rejects_wrong_input_channels() {
        let m = Model::new(&small(), 3, 2, &mut rng::rng(0)).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&images(1, 0)).unwrap();
        assert!(matches!(
            m.forward(&mut tape, x, Mode::Eval, false),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn teacher_is_unaffected_by_student_updates() {
        let mut student = Model::new(&small(), 1, 3, &mut rng::rng(2)).unwrap();
        let teacher = student.clone_frozen();
        let x = images(3, 4);
        let run = |t: &Teacher| {
            let mut tape = Tape::new();
            let v = tape.constant(&x).unwrap();
            let f = t.forward(&mut tape, v).unwrap();
            f.taps.iter().map(|tp| tape.value(tp.maps).clone()).collect::<Vec<_>>()
        };
        let before = run(&teacher);
        let fresh = run(&student.clone_frozen());
        assert_eq!(before, fresh);
        for p in student.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v += 0.1);
        }
        assert_eq!(run(&teacher), before);
        assert_eq!(teacher.clone_frozen(), teacher);
        assert_ne!(student.digest(), teacher.digest());
    }

    #[test]
    fn teacher_leaves_are_constants() {
        let m = Model::new(&small(), 1, 2, &mut rng::rng(0)).unwrap();
        let t = m.clone_frozen();
        let mut tape = Tape::new();
        let x = tape.constant(&images(2, 0)).unwrap();
        let f = t.forward(&mut tape, x).unwrap();
        assert!(f.params.iter().all(|&p| !tape.requires_grad(p)));
        assert!(!tape.requires_grad(f.scores));
    }

    #[test]
    fn growth_keeps_old_columns() {
        let mut m = Model::new(&small(), 1, 4, &mut rng::rng(5)).unwrap();
        let x = images(3, 6);
        let (before, _) = m.infer(&x).unwrap();
        m.head.grow(2, &mut rng::rng(9)).unwrap();
        let (after, _) = m.infer(&x).unwrap();
        assert_eq!(after.shape(), &[3, 6]);
        for b in 0..3 {
            assert_eq!(&after.data()[b * 6..b * 6 + 4], &before.data()[b * 4..b * 4 + 4]);
        }
    }

    #[test]
    fn state_round_trip_and_digest() {
        let a = Model::new(&small(), 1, 3, &mut rng::rng(1)).unwrap();
        let mut b = Model::new(&small(), 1, 3, &mut rng::rng(2)).unwrap();
        assert_ne!(a.digest(), b.digest());
        b.load_state(&a.state()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let mut m = Model::new(&small(), 1, 2, &mut rng::rng(1)).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&images(4, 2)).unwrap();
        let f = m.forward(&mut tape, x, Mode::Train, true).unwrap();
        let s = f.batch_stats[0].clone().unwrap();
        m.update_running_stats(&f.batch_stats);
        let b = &m.backbone.blocks[0];
        assert!((b.running_mean[0] - 0.1 * s.mean[0]).abs() < 1e-15);
    }

    #[test]
    fn batched_inference_matches_single_pass() {
        let m = Model::new(&small(), 1, 3, &mut rng::rng(3)).unwrap();
        let x = images(7, 1);
        let (s1, e1) = m.infer(&x).unwrap();
        let (s2, e2) = m.infer_batched(&x, 3).unwrap();
        for (a, b) in s1.data().iter().zip(s2.data()).chain(e1.data().iter().zip(e2.data())) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
