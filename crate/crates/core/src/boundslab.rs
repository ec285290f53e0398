//! Numerical checks of the analysis behind the method: the first-order
//! expansion of the loss change, the two-step upper bound on it, the
//! old/new mixture inequality, the link between the importance-weighted
//! discrepancy and the loss change, and finite-difference checks of the full
//! training loss.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::data::MixtureWeights;
use crate::error::{Error, Result};
use crate::losses;
use crate::network::{Mode, Model, NetworkConfig};
use crate::rng::{self, Rng, Stream};
use crate::tensor::{gradcheck, Tape, Tensor, Var};

/// Relative slack below which an inequality counts as violated.
pub const CHAIN_TOLERANCE: f64 = 1e-10;
/// Relative tolerance for identities that hold exactly up to rounding.
pub const IDENTITY_TOLERANCE: f64 = 1e-12;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Halving sequence used by the Taylor suite.
pub const TAYLOR_EPS: [f64; 3] = [1e-2, 5e-3, 2.5e-3];
/// Step for the total-loss finite differences.
pub const GRADCHECK_STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundTrialReport {
    pub suite: String,
    pub trials: usize,
    pub violations: usize,
    /// Largest relative slack `(rhs − lhs) / max(|lhs|, |rhs|)` seen.
    pub max_slack: f64,
    /// Smallest relative slack; zero when a bound is attained.
    pub min_slack: f64,
    pub passed: bool,
    /// Per-trial values of each link of the chain, left to right.
    #[serde(skip)]
    pub links: Vec<Vec<f64>>,
}

impl BoundTrialReport {
    fn new(suite: &str) -> Self {
        BoundTrialReport {
            suite: suite.to_string(),
            trials: 0,
            violations: 0,
            max_slack: f64::NEG_INFINITY,
            min_slack: f64::INFINITY,
            passed: true,
            links: Vec::new(),
        }
    }

    /// Checks `lhs ≤ rhs` up to `tol` relative.
    fn record(&mut self, lhs: f64, rhs: f64, tol: f64) {
        let slack = relative_slack(lhs, rhs);
        self.max_slack = self.max_slack.max(slack);
        self.min_slack = self.min_slack.min(slack);
        if !(slack >= -tol) {
            self.violations += 1;
        }
    }

    fn finish(mut self) -> Self {
        self.passed = self.violations == 0;
        self
    }
}

fn relative_slack(lhs: f64, rhs: f64) -> f64 {
    let scale = lhs.abs().max(rhs.abs());
    if scale == 0.0 {
        0.0
    } else {
        (rhs - lhs) / scale
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gaussian(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

// ---------------------------------------------------------------------------
// Cauchy–Schwarz chain

/// One draw of a (gradient, feature change) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub grad: Vec<f64>,
    pub delta: Vec<f64>,
}

/// Empirical expectations along
/// `E⟨∇,Δ⟩ ≤ E[‖∇‖‖Δ‖] ≤ sqrt(E‖∇‖² · E‖Δ‖²)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChainLinks {
    pub inner: f64,
    pub norm_product: f64,
    pub root_moments: f64,
    /// Quarter discriminant of `λ ↦ E[(λ‖∇‖ − ‖Δ‖)²]`; never positive.
    pub discriminant: f64,
}

pub fn chain_links(pairs: &[PairSample]) -> ChainLinks {
    let n = pairs.len() as f64;
    let (mut inner, mut prod, mut gg, mut dd) = (0.0, 0.0, 0.0, 0.0);
    for p in pairs {
        let (a, b) = (norm(&p.grad), norm(&p.delta));
        inner += dot(&p.grad, &p.delta);
        prod += a * b;
        gg += a * a;
        dd += b * b;
    }
    let (inner, prod, gg, dd) = (inner / n, prod / n, gg / n, dd / n);
    ChainLinks {
        inner,
        norm_product: prod,
        root_moments: (gg * dd).sqrt(),
        discriminant: prod * prod - gg * dd,
    }
}

/// Each trial is one empirical distribution over pairs.
pub fn check_cs_chain(trials: &[Vec<PairSample>]) -> Result<BoundTrialReport> {
    if trials.len() < 100 {
        return Err(Error::Contract(format!(
            "the chain check needs at least 100 trials, got {}",
            trials.len()
        )));
    }
    let mut report = BoundTrialReport::new("cs_chain");
    for pairs in trials {
        if pairs.is_empty() {
            return Err(Error::Contract("empty pair distribution".into()));
        }
        let l = chain_links(pairs);
        report.record(l.inner, l.norm_product, CHAIN_TOLERANCE);
        report.record(l.norm_product, l.root_moments, CHAIN_TOLERANCE);
        let gd = l.root_moments * l.root_moments;
        report.record(l.norm_product * l.norm_product, gd, CHAIN_TOLERANCE);
        report.links.push(vec![l.inner, l.norm_product, l.root_moments]);
        report.trials += 1;
    }
    Ok(report.finish())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairKind {
    /// Correlated pairs with log-normal scales.
    Random,
    /// `Δ = ∇`: the first inequality is tight.
    Aligned,
    /// `Δ ⟂ ∇` in every draw.
    Orthogonal,
    /// Constant `‖∇‖` and `‖Δ‖`: the second inequality is tight.
    ConstantNorms,
}

pub fn cs_trials(kind: PairKind, trials: usize, samples: usize, dim: usize, seed: u64) -> Vec<Vec<PairSample>> {
    (0..trials)
        .map(|t| {
            let mut r = rng::rng(rng::derive(seed, Stream::Verify, t as u64));
            let (ga, da): (f64, f64) = (r.random_range(0.1..10.0), r.random_range(0.1..10.0));
            (0..samples)
                .map(|_| {
                    let mut g = gaussian(&mut r, dim);
                    let noise = gaussian(&mut r, dim);
                    let delta = match kind {
                        PairKind::Random => {
                            let rho: f64 = r.random_range(-1.0..1.0);
                            let s: f64 = StandardNormal.sample(&mut r);
                            let sg: f64 = StandardNormal.sample(&mut r);
                            g.iter_mut().for_each(|v| *v *= sg.exp());
                            let gn = norm(&g).max(f64::MIN_POSITIVE);
                            let nn = norm(&noise).max(f64::MIN_POSITIVE);
                            let c = (1.0 - rho * rho).sqrt();
                            g.iter()
                                .zip(&noise)
                                .map(|(a, b)| s.exp() * (rho * a / gn + c * b / nn))
                                .collect()
                        }
                        PairKind::Aligned => g.clone(),
                        PairKind::Orthogonal => {
                            let k = dot(&noise, &g) / dot(&g, &g);
                            let mut d: Vec<f64> = noise.iter().zip(&g).map(|(n, a)| n - k * a).collect();
                            // one Gram–Schmidt pass leaves O(ε) overlap; a second removes it
                            let k2 = dot(&d, &g) / dot(&g, &g);
                            d.iter_mut().zip(&g).for_each(|(v, a)| *v -= k2 * a);
                            d
                        }
                        PairKind::ConstantNorms => {
                            let (gn, nn) = (norm(&g), norm(&noise));
                            g.iter_mut().for_each(|v| *v *= ga / gn);
                            noise.iter().map(|v| v * da / nn).collect()
                        }
                    };
                    PairSample { grad: g, delta }
                })
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Mixture inequality

/// A distribution over finitely many points.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDist {
    pub support: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
}

impl FiniteDist {
    pub fn new(support: Vec<Vec<f64>>, probs: Vec<f64>) -> Result<Self> {
        if support.len() != probs.len() || support.is_empty() {
            return Err(Error::Contract("support and probabilities must be non-empty and aligned".into()));
        }
        if probs.iter().any(|&p| !(p >= 0.0)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Contract("probabilities must be non-negative and sum to 1".into()));
        }
        Ok(FiniteDist { support, probs })
    }

    /// `E[f]` by enumeration; `f` must be non-negative.
    pub fn expect(&self, f: &dyn Fn(&[f64]) -> f64) -> Result<f64> {
        let mut acc = 0.0;
        for (x, &p) in self.support.iter().zip(&self.probs) {
            let v = f(x);
            if !(v >= 0.0) {
                return Err(Error::Contract(format!("ΔZ = {v} is negative; it must be a squared norm")));
            }
            acc += p * v;
        }
        Ok(acc)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSpec {
    /// In `[0, 1]`; the boundaries are allowed here.
    pub phi_old: f64,
    pub old: FiniteDist,
    pub new: FiniteDist,
}

impl MixtureSpec {
    pub fn new(phi_old: f64, old: FiniteDist, new: FiniteDist) -> Result<Self> {
        if !(0.0..=1.0).contains(&phi_old) {
            return Err(Error::Contract(format!("phi_old = {phi_old} outside [0, 1]")));
        }
        Ok(MixtureSpec { phi_old, old, new })
    }

    pub fn from_weights(w: MixtureWeights, old: FiniteDist, new: FiniteDist) -> Self {
        MixtureSpec {
            phi_old: w.phi_old(),
            old,
            new,
        }
    }

    /// The mixture as one enumerated distribution over the union of supports.
    pub fn mixture(&self) -> FiniteDist {
        let phi_new = 1.0 - self.phi_old;
        FiniteDist {
            support: self.old.support.iter().chain(&self.new.support).cloned().collect(),
            probs: self
                .old
                .probs
                .iter()
                .map(|p| self.phi_old * p)
                .chain(self.new.probs.iter().map(|q| phi_new * q))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixtureTerms {
    /// `φ_old · E_old[ΔZ]`.
    pub old_term: f64,
    /// `φ_new · E_q[ΔZ]`.
    pub new_term: f64,
    /// `E_mixture[ΔZ]`, enumerated directly.
    pub mixture: f64,
}

pub fn mixture_terms(spec: &MixtureSpec, delta_z: &dyn Fn(&[f64]) -> f64) -> Result<MixtureTerms> {
    Ok(MixtureTerms {
        old_term: spec.phi_old * spec.old.expect(delta_z)?,
        new_term: (1.0 - spec.phi_old) * spec.new.expect(delta_z)?,
        mixture: spec.mixture().expect(delta_z)?,
    })
}

/// Verifies `φ_old·E_old ≤ φ_old·E_old + φ_new·E_q == E_mixture` for each mixture.
pub fn check_mixture_bound(specs: &[MixtureSpec], delta_z: &dyn Fn(&[f64]) -> f64) -> Result<BoundTrialReport> {
    let mut report = BoundTrialReport::new("mixture_bound");
    for spec in specs {
        let t = mixture_terms(spec, delta_z)?;
        let sum = t.old_term + t.new_term;
        report.record(t.old_term, t.mixture, CHAIN_TOLERANCE);
        report.record(sum, t.mixture, IDENTITY_TOLERANCE);
        report.record(t.mixture, sum, IDENTITY_TOLERANCE);
        report.links.push(vec![t.old_term, sum, t.mixture]);
        report.trials += 1;
    }
    Ok(report.finish())
}

/// `ΔZ(x) = ‖(S − T)x‖²` for random linear teacher `T` and student `S`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureShift {
    diff: Vec<f64>,
    dim: usize,
}

impl FeatureShift {
    pub fn random(dim: usize, out: usize, rng: &mut Rng) -> Self {
        let t = gaussian(rng, dim * out);
        let s: Vec<f64> = t.iter().map(|v| v + 0.3 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)).collect();
        FeatureShift {
            diff: s.iter().zip(&t).map(|(a, b)| a - b).collect(),
            dim,
        }
    }

    pub fn delta_z(&self, x: &[f64]) -> f64 {
        self.diff.chunks(self.dim).map(|row| dot(row, x).powi(2)).sum()
    }
}

fn random_dist(rng: &mut Rng, dim: usize, shift: f64) -> FiniteDist {
    let n = rng.random_range(1..=6);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    let total: f64 = w.iter().sum();
    let support = (0..n)
        .map(|_| gaussian(rng, dim).into_iter().map(|v| v + shift).collect())
        .collect();
    let mut probs: Vec<f64> = w.iter().map(|v| v / total).collect();
    // absorb rounding so the probabilities sum to one as closely as possible
    let s: f64 = probs[..n - 1].iter().sum();
    probs[n - 1] = 1.0 - s;
    FiniteDist { support, probs }
}

/// A random mixture together with its feature-shift functional.
pub fn random_mixture(seed: u64, index: u64, dim: usize) -> (MixtureSpec, FeatureShift) {
    let mut r = rng::rng(rng::derive(seed, Stream::Verify, index));
    let phi_old = r.random_range(0.05..0.95);
    let old = random_dist(&mut r, dim, 0.0);
    let new = random_dist(&mut r, dim, 1.5);
    let f = FeatureShift::random(dim, 3, &mut r);
    (MixtureSpec { phi_old, old, new }, f)
}

/// Mixture check over `trials` random mixtures, each with its own `ΔZ`.
pub fn mixture_suite(trials: usize, seed: u64) -> Result<BoundTrialReport> {
    let mut report = BoundTrialReport::new("mixture_bound");
    for i in 0..trials {
        let (spec, f) = random_mixture(seed, i as u64, 4);
        let r = check_mixture_bound(std::slice::from_ref(&spec), &|x| f.delta_z(x))?;
        report.trials += 1;
        report.violations += r.violations;
        report.max_slack = report.max_slack.max(r.max_slack);
        report.min_slack = report.min_slack.min(r.min_slack);
        report.links.extend(r.links);
    }
    Ok(report.finish())
}

// ---------------------------------------------------------------------------
// First-order expansion

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Softplus,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Readout {
    Sum,
    LogSumExp,
    SquaredNorm,
}

/// `ℒ(G(Z))` with `G` = optional 3×3 conv → activation → optional linear map.
#[derive(Clone, Debug, PartialEq)]
pub struct TaylorFixture {
    /// `[1, C, H, W]`.
    pub z: Tensor,
    /// Perturbation direction `D`, same shape as `z`.
    pub direction: Tensor,
    pub kernel: Option<Tensor>,
    pub activation: Activation,
    pub weights: Option<Tensor>,
    pub readout: Readout,
}

impl TaylorFixture {
    pub fn random(seed: u64, activation: Activation) -> Self {
        let mut r = rng::rng(rng::derive(seed, Stream::Verify, 0));
        let (c, hw, co, k) = (r.random_range(1..=3), r.random_range(3..=5), r.random_range(2..=4), 4);
        let z = Tensor::new(vec![1, c, hw, hw], gaussian(&mut r, c * hw * hw)).expect("shape");
        let mut d = gaussian(&mut r, c * hw * hw);
        let n = norm(&d);
        d.iter_mut().for_each(|v| *v /= n);
        let kstd = (1.0 / (9 * c) as f64).sqrt();
        let kernel: Vec<f64> = gaussian(&mut r, co * c * 9).iter().map(|v| v * kstd).collect();
        let f = co * hw * hw;
        let wstd = (1.0 / f as f64).sqrt();
        let weights: Vec<f64> = gaussian(&mut r, k * f).iter().map(|v| v * wstd).collect();
        TaylorFixture {
            z,
            direction: Tensor::new(vec![1, c, hw, hw], d).expect("shape"),
            kernel: Some(Tensor::new(vec![co, c, 3, 3], kernel).expect("shape")),
            activation,
            weights: Some(Tensor::new(vec![k, f], weights).expect("shape")),
            readout: Readout::LogSumExp,
        }
    }

    /// Linear `G` and linear `ℒ`.
    pub fn linear(seed: u64) -> Self {
        TaylorFixture {
            activation: Activation::Identity,
            readout: Readout::Sum,
            ..Self::random(seed, Activation::Identity)
        }
    }

    /// `ℒ(z) = ‖z‖²` with `G` the identity.
    pub fn quadratic(seed: u64) -> Self {
        TaylorFixture {
            kernel: None,
            weights: None,
            activation: Activation::Identity,
            readout: Readout::SquaredNorm,
            ..Self::random(seed, Activation::Identity)
        }
    }

    fn record(&self, tape: &mut Tape, z: Var) -> Result<(Var, Var)> {
        let pre = match &self.kernel {
            Some(k) => {
                let k = tape.constant(k)?;
                tape.conv2d(z, k, 1)?
            }
            None => z,
        };
        let h = match self.activation {
            Activation::Identity => pre,
            Activation::Softplus => tape.softplus(pre)?,
            Activation::Relu => tape.relu(pre)?,
        };
        let h = tape.flatten(h)?;
        let y = match &self.weights {
            Some(w) => {
                let w = tape.constant(w)?;
                tape.matmul(h, w, true)?
            }
            None => h,
        };
        let loss = match self.readout {
            Readout::Sum => tape.sum(y)?,
            Readout::LogSumExp => {
                let e = tape.exp(y)?;
                let s = tape.sum(e)?;
                tape.log(s)?
            }
            Readout::SquaredNorm => {
                let sq = tape.mul(y, y)?;
                tape.sum(sq)?
            }
        };
        Ok((loss, pre))
    }

    pub fn loss(&self, z: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let zv = tape.constant(z)?;
        let (l, _) = self.record(&mut tape, zv)?;
        tape.value(l).item()
    }

    /// `ℒ(G(Z))` and `∇_Z ℒ` at the fixture point.
    pub fn gradient(&self) -> Result<(f64, Tensor)> {
        let mut tape = Tape::new();
        let zv = tape.param(&self.z)?;
        let (l, _) = self.record(&mut tape, zv)?;
        let value = tape.value(l).item()?;
        let g = tape.backward_wrt(l, &[zv])?.remove(0);
        Ok((value, g))
    }

    fn preactivations(&self, z: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let zv = tape.constant(z)?;
        let (_, pre) = self.record(&mut tape, zv)?;
        Ok(tape.value(pre).data().to_vec())
    }

    fn shifted(&self, eps: f64) -> Tensor {
        let mut z = self.z.clone();
        z.data_mut()
            .iter_mut()
            .zip(self.direction.data())
            .for_each(|(v, d)| *v += eps * d);
        z
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TaylorRow {
    pub eps: f64,
    /// `|ℒ(G(Z+εD)) − ℒ(G(Z)) − ε⟨∇_Z ℒ, D⟩_F|`.
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaylorTable {
    pub rows: Vec<TaylorRow>,
}

impl TaylorTable {
    /// `r(ε_i) / r(ε_{i+1})` for consecutive rows.
    pub fn ratios(&self) -> Vec<f64> {
        self.rows.windows(2).map(|w| w[0].residual / w[1].residual).collect()
    }

    /// Every halving shrinks the residual by a factor in `[3, 5]`.
    pub fn second_order(&self) -> bool {
        let r = self.ratios();
        !r.is_empty() && r.iter().all(|x| (3.0..=5.0).contains(x))
    }

    pub fn max_residual(&self) -> f64 {
        self.rows.iter().map(|r| r.residual).fold(0.0, f64::max)
    }
}

/// Residuals of the first-order expansion along the fixture direction.
/// With a ReLU fixture, fails when the segment `Z + [0, max ε]·D` crosses
/// (or starts on) a kink.
pub fn check_taylor(fx: &TaylorFixture, eps: &[f64]) -> Result<TaylorTable> {
    if fx.activation == Activation::Relu {
        let far = eps.iter().cloned().fold(0.0, f64::max);
        let a = fx.preactivations(&fx.z)?;
        let b = fx.preactivations(&fx.shifted(far))?;
        if let Some(i) = a.iter().zip(&b).position(|(x, y)| *x == 0.0 || (*x > 0.0) != (*y > 0.0)) {
            return Err(Error::NonDifferentiable(format!(
                "pre-activation {i} changes sign within ε ≤ {far}"
            )));
        }
    }
    let (l0, g) = fx.gradient()?;
    let lin = dot(g.data(), fx.direction.data());
    let rows = eps
        .iter()
        .map(|&e| {
            let l = fx.loss(&fx.shifted(e))?;
            Ok(TaylorRow {
                eps: e,
                residual: (l - l0 - e * lin).abs(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(TaylorTable { rows })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaylorSuiteReport {
    pub fixtures: usize,
    /// Fixtures excluded because a kink lies on the probe segment.
    pub kinks: usize,
    pub second_order: usize,
    /// `second_order / (fixtures − kinks)`.
    pub fraction: f64,
}

pub fn taylor_suite(fixtures: usize, activation: Activation, seed: u64) -> Result<TaylorSuiteReport> {
    let (mut kinks, mut ok) = (0, 0);
    for i in 0..fixtures {
        let fx = TaylorFixture::random(rng::derive(seed, Stream::Verify, i as u64), activation);
        match check_taylor(&fx, &TAYLOR_EPS) {
            Ok(t) => ok += usize::from(t.second_order()),
            Err(Error::NonDifferentiable(_)) => kinks += 1,
            Err(e) => return Err(e),
        }
    }
    let evaluated = fixtures - kinks;
    Ok(TaylorSuiteReport {
        fixtures,
        kinks,
        second_order: ok,
        fraction: if evaluated == 0 { 0.0 } else { ok as f64 / evaluated as f64 },
    })
}

// ---------------------------------------------------------------------------
// Importance-weighted discrepancy vs. loss change

/// Per channel `c` of every tapped layer, over the examples in `images`
/// (uniformly weighted), checks
/// `(E⟨∇_{Z_c}ℒ, ΔZ_c⟩)² ≤ E‖∇_{Z_c}ℒ‖² · E‖ΔZ_c‖² = I_c · E‖ΔZ_c‖²`,
/// then the same for the channel sums. Gradients come from the teacher in
/// eval mode, so each example's slice is its own exact gradient.
pub fn check_importance_bound_link(
    teacher: &Model,
    student: &Model,
    images: &Tensor,
    targets: &[usize],
    include_true_class: bool,
) -> Result<BoundTrialReport> {
    let mut tape = Tape::new();
    let x = tape.constant(images)?;
    let f = teacher.forward(&mut tape, x, Mode::Eval, true)?;
    let eta = *f.params.last().expect("eta leaf");
    let terms = losses::classification_terms(&mut tape, f.scores, targets, eta, teacher.head.delta, include_true_class)?;
    let loss = tape.sum(terms)?;
    let grads = tape.backward(loss)?;

    let mut stape = Tape::new();
    let sx = stape.constant(images)?;
    let sf = student.forward(&mut stape, sx, Mode::Eval, false)?;
    if sf.taps.len() != f.taps.len() {
        return Err(Error::Contract("teacher and student tap different layers".into()));
    }

    let n = targets.len() as f64;
    let mut report = BoundTrialReport::new("importance_bound_link");
    let (mut lhs_sum, mut rhs_sum) = (0.0, 0.0);
    for (tt, st) in f.taps.iter().zip(&sf.taps) {
        let g = grads.get(tt.maps);
        let (zt, zs) = (tape.value(tt.maps), stape.value(st.maps));
        if zt.shape() != zs.shape() {
            return Err(Error::dim("importance_bound_link", format!("{:?} vs {:?}", zt.shape(), zs.shape())));
        }
        let s = zt.shape();
        let (c, hw) = (s[1], s[2] * s[3]);
        let (mut ip, mut gn, mut dn) = (vec![0.0; c], vec![0.0; c], vec![0.0; c]);
        for b in 0..s[0] {
            for ch in 0..c {
                let o = (b * c + ch) * hw;
                let gs = &g.data()[o..o + hw];
                let delta: Vec<f64> = (o..o + hw).map(|i| zs.data()[i] - zt.data()[i]).collect();
                ip[ch] += dot(gs, &delta);
                gn[ch] += dot(gs, gs);
                dn[ch] += dot(&delta, &delta);
            }
        }
        for ch in 0..c {
            let lhs = (ip[ch] / n).powi(2);
            let rhs = (gn[ch] / n) * (dn[ch] / n);
            report.record(lhs, rhs, CHAIN_TOLERANCE);
            report.links.push(vec![lhs, rhs]);
            report.trials += 1;
            lhs_sum += lhs;
            rhs_sum += rhs;
        }
    }
    report.record(lhs_sum, rhs_sum, CHAIN_TOLERANCE);
    Ok(report.finish())
}

/// Adds `scale · N(0, 1)` noise (relative to each tensor's RMS) to every
/// backbone kernel and affine parameter.
pub fn perturbed(model: &Model, scale: f64, seed: u64) -> Model {
    let mut m = model.clone();
    let mut r = rng::rng(seed);
    let heads: Vec<bool> = (0..m.params().len()).map(|i| m.is_head_param(i)).collect();
    for (p, head) in m.params_mut().into_iter().zip(heads) {
        if head {
            continue;
        }
        let rms = (p.data().iter().map(|v| v * v).sum::<f64>() / p.len() as f64).sqrt().max(1e-3);
        for v in p.data_mut() {
            *v += scale * rms * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r);
        }
    }
    m
}

/// A teacher trained for two stages on a tiny synthetic set, with the
/// training images and their head columns.
pub fn importance_link_fixture(seed: u64) -> Result<(Model, Tensor, Vec<usize>)> {
    let cfg = ExperimentConfig::from_json(&format!(
        r#"{{
        "dataset": {{"synthetic": {{"num_classes": 4, "train_per_class": 6, "test_per_class": 2, "image_size": 8, "seed": {seed}}}}},
        "plan": {{"stages": 2}},
        "network": {{"channels": [3, 4], "proxies_per_class": 2}},
        "train": {{"epochs": 2, "batch_size": 8, "seed": {seed}}},
        "memory": {{"budget": {{"per_class": 2}}}}
    }}"#
    ))?;
    let data = cfg.load_dataset()?;
    let r = crate::trainer::run_experiment(&cfg, &data, None)?;
    let targets = data.train.labels.iter().map(|&l| r.plan.column(l)).collect();
    Ok((r.model, data.train.images.clone(), targets))
}

pub fn importance_link_suite(perturbations: usize, seed: u64) -> Result<BoundTrialReport> {
    let (teacher, images, targets) = importance_link_fixture(seed)?;
    let mut report = BoundTrialReport::new("importance_bound_link");
    for i in 0..perturbations {
        let student = perturbed(&teacher, 0.05, rng::derive(seed, Stream::Verify, i as u64));
        let r = check_importance_bound_link(&teacher, &student, &images, &targets, false)?;
        report.trials += 1;
        report.violations += r.violations;
        report.max_slack = report.max_slack.max(r.max_slack);
        report.min_slack = report.min_slack.min(r.min_slack);
    }
    Ok(report.finish())
}

// ---------------------------------------------------------------------------
// Finite-difference checks of the training loss

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckOutcome {
    pub fixture: u64,
    pub params: usize,
    /// Coordinates whose ±step crosses a ReLU kink, where central
    /// differences do not estimate the derivative.
    pub skipped: usize,
    pub max_rel_error: f64,
}

struct LossFixture {
    model: Model,
    teacher: Model,
    images: Tensor,
    targets: Vec<usize>,
    weights: Vec<Vec<f64>>,
    lambda_disc: f64,
    lambda_t: f64,
    include_true_class: bool,
}

impl LossFixture {
    fn random(seed: u64) -> Result<Self> {
        let mut r = rng::rng(rng::derive(seed, Stream::Verify, 0));
        let blocks = r.random_range(1..=2);
        let cfg = NetworkConfig {
            channels: (0..blocks).map(|_| r.random_range(2..=4)).collect(),
            proxies_per_class: r.random_range(1..=3),
            delta: r.random_range(0.0..0.8),
            eta_init: r.random_range(0.5..3.0),
            eta_min: 0.1,
            ..NetworkConfig::default()
        };
        cfg.validate()?;
        let (in_c, size, b) = (r.random_range(1..=2), [4, 6][r.random_range(0..2)], 3);
        let n_prev = r.random_range(2..=3);
        let n_new = r.random_range(1..=2);
        let mut teacher = Model::new(&cfg, in_c, n_prev, &mut r)?;
        for blk in &mut teacher.backbone.blocks {
            blk.running_mean.iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
            blk.running_var.iter_mut().for_each(|v| *v = r.random_range(0.5..2.0));
        }
        let mut model = perturbed(&teacher, 0.3, r.random());
        model.head.grow(n_new, &mut r)?;
        let images = Tensor::new(vec![b, in_c, size, size], gaussian(&mut r, b * in_c * size * size))?;
        let n = n_prev + n_new;
        let targets = (0..b).map(|_| r.random_range(0..n)).collect();
        let weights = model
            .backbone
            .tap_channels()
            .iter()
            .map(|&c| {
                let w: Vec<f64> = (0..c).map(|_| r.random_range(0.1..2.0)).collect();
                let m = w.iter().sum::<f64>() / c as f64;
                w.into_iter().map(|v| v / m).collect()
            })
            .collect();
        Ok(LossFixture {
            model,
            teacher,
            images,
            targets,
            weights,
            lambda_disc: r.random_range(1.0..6.0),
            lambda_t: losses::lambda_t(n, n_prev)?,
            include_true_class: r.random_bool(0.5),
        })
    }

    /// Total loss at `params` plus the ReLU sign pattern along the way.
    fn evaluate(&self, params: &[Tensor], grads: bool) -> Result<(f64, Vec<bool>, Option<Vec<Tensor>>)> {
        let mut m = self.model.clone();
        for (dst, src) in m.params_mut().into_iter().zip(params) {
            *dst = src.clone();
        }
        let mut ttape = Tape::new();
        let tx = ttape.constant(&self.images)?;
        let tf = self.teacher.clone_frozen().forward(&mut ttape, tx)?;
        let maps: Vec<Tensor> = tf.taps.iter().map(|t| ttape.value(t.maps).clone()).collect();

        let mut tape = Tape::new();
        let x = tape.constant(&self.images)?;
        let f = m.forward(&mut tape, x, Mode::Train, true)?;
        let eta = *f.params.last().expect("eta leaf");
        let cls = losses::classification_loss(
            &mut tape,
            f.scores,
            &self.targets,
            eta,
            m.head.delta,
            self.include_true_class,
        )?;
        let disc = losses::discrepancy_loss(&mut tape, &f.taps, &maps, &self.weights, losses::MAP_NORM_EPS)?;
        let (total, _) = losses::record_total(&mut tape, cls, Some(disc), self.lambda_disc, self.lambda_t)?;
        let value = tape.value(total).item()?;
        let pattern = tape.relu_pattern();
        let g = if grads {
            Some(tape.backward_wrt(total, &f.params)?)
        } else {
            None
        };
        Ok((value, pattern, g))
    }
}

/// Analytic vs central-difference gradients of the total loss (classification
/// plus weighted discrepancy) with respect to every student parameter.
pub fn total_loss_gradcheck(seed: u64) -> Result<GradcheckOutcome> {
    let fx = LossFixture::random(seed)?;
    let params: Vec<Tensor> = fx.model.params().into_iter().cloned().collect();
    let (_, pattern, analytic) = fx.evaluate(&params, true)?;
    let analytic = analytic.expect("gradients requested");
    let h = GRADCHECK_STEP;
    let mut work = params.clone();
    let (mut worst, mut skipped, mut count) = (0.0f64, 0, 0);
    for ti in 0..params.len() {
        for i in 0..params[ti].len() {
            count += 1;
            let orig = params[ti].data()[i];
            work[ti].data_mut()[i] = orig + h;
            let (plus, pp, _) = fx.evaluate(&work, false)?;
            work[ti].data_mut()[i] = orig - h;
            let (minus, pm, _) = fx.evaluate(&work, false)?;
            work[ti].data_mut()[i] = orig;
            if pp != pattern || pm != pattern {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(gradcheck::relative_error(analytic[ti].data()[i], numeric));
        }
    }
    Ok(GradcheckOutcome {
        fixture: seed,
        params: count,
        skipped,
        max_rel_error: worst,
    })
}

pub fn gradcheck_suite(fixtures: usize, seed: u64) -> Result<(BoundTrialReport, Vec<GradcheckOutcome>)> {
    let mut report = BoundTrialReport::new("gradcheck_total_loss");
    let mut outcomes = Vec::with_capacity(fixtures);
    for i in 0..fixtures {
        let o = total_loss_gradcheck(rng::derive(seed, Stream::Verify, i as u64))?;
        report.record(o.max_rel_error, GRADCHECK_TOLERANCE, 0.0);
        report.trials += 1;
        outcomes.push(o);
    }
    Ok((report.finish(), outcomes))
}

// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub chain_trials: usize,
    pub mixture_trials: usize,
    pub taylor_fixtures: usize,
    pub link_perturbations: usize,
    pub gradcheck_fixtures: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            chain_trials: 1000,
            mixture_trials: 1000,
            taylor_fixtures: 200,
            link_perturbations: 100,
            gradcheck_fixtures: 50,
        }
    }
}

impl VerifyOptions {
    /// Reduced trial counts for smoke runs.
    pub fn quick() -> Self {
        VerifyOptions {
            seed: 0,
            chain_trials: 100,
            mixture_trials: 100,
            taylor_fixtures: 20,
            link_perturbations: 5,
            gradcheck_fixtures: 3,
        }
    }
}

/// Runs every suite once, in a fixed order.
pub fn verify_all(opts: &VerifyOptions) -> Result<Vec<BoundTrialReport>> {
    let mut out = Vec::new();
    for (kind, name) in [
        (PairKind::Random, "cs_chain"),
        (PairKind::Aligned, "cs_chain_aligned"),
        (PairKind::Orthogonal, "cs_chain_orthogonal"),
        (PairKind::ConstantNorms, "cs_chain_constant_norms"),
    ] {
        let mut r = check_cs_chain(&cs_trials(kind, opts.chain_trials, 16, 8, opts.seed))?;
        r.suite = name.to_string();
        out.push(r);
    }
    out.push(mixture_suite(opts.mixture_trials, opts.seed)?);
    let t = taylor_suite(opts.taylor_fixtures, Activation::Softplus, opts.seed)?;
    out.push(BoundTrialReport {
        suite: "taylor".into(),
        trials: t.fixtures - t.kinks,
        violations: t.fixtures - t.kinks - t.second_order,
        max_slack: t.fraction,
        min_slack: t.fraction,
        passed: t.fraction >= 0.95,
        links: Vec::new(),
    });
    out.push(importance_link_suite(opts.link_perturbations, opts.seed)?);
    out.push(gradcheck_suite(opts.gradcheck_fixtures, opts.seed)?.0);
    Ok(out)
}
