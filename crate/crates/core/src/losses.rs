//! The consolidation objective: margin classification loss on LSC scores,
//! importance-weighted feature-map discrepancy, and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::FeatureTap;
use crate::tensor::{Tape, Tensor, Var};

pub const MAP_NORM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_lambda_disc")]
    pub lambda_disc: f64,
    #[serde(default = "default_eps")]
    pub map_norm_eps: f64,
    /// Keep the true class in the denominator of the classification loss
    /// (a plain softmax cross-entropy with margin).
    #[serde(default)]
    pub include_true_class: bool,
}

fn default_lambda_disc() -> f64 {
    4.0
}
fn default_eps() -> f64 {
    MAP_NORM_EPS
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_disc: default_lambda_disc(),
            map_norm_eps: MAP_NORM_EPS,
            include_true_class: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_disc >= 0.0 && self.lambda_disc.is_finite()) {
            return Err(Error::Config(format!("lambda_disc = {}", self.lambda_disc)));
        }
        if !(self.map_norm_eps > 0.0) {
            return Err(Error::Config(format!("map_norm_eps = {}", self.map_norm_eps)));
        }
        Ok(())
    }
}

/// Loss components of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cls: f64,
    pub disc: f64,
    pub total: f64,
    pub lambda_t: f64,
}

/// `sqrt(n^t / (n^t − n^{t−1}))`.
pub fn lambda_t(n_t: usize, n_prev: usize) -> Result<f64> {
    if n_t <= n_prev {
        return Err(Error::Contract(format!("lambda_t needs n_t > n_prev, got {n_t} <= {n_prev}")));
    }
    Ok((n_t as f64 / (n_t - n_prev) as f64).sqrt())
}

/// `cls + λ_disc·λ^t·disc`.
pub fn total_loss(cls: f64, disc: f64, lambda_disc: f64, lambda_t: f64) -> LossReport {
    LossReport {
        cls,
        disc,
        total: cls + lambda_disc * lambda_t * disc,
        lambda_t,
    }
}

/// Records the same sum on the tape; `disc` is `None` when there is no
/// teacher.
pub fn record_total(
    tape: &mut Tape,
    cls: Var,
    disc: Option<Var>,
    lambda_disc: f64,
    lambda_t: f64,
) -> Result<(Var, LossReport)> {
    let cls_v = tape.value(cls).item()?;
    match disc {
        None => Ok((cls, total_loss(cls_v, 0.0, lambda_disc, lambda_t))),
        Some(d) => {
            let w = tape.scale(d, lambda_disc * lambda_t)?;
            let total = tape.add(cls, w)?;
            let report = total_loss(cls_v, tape.value(d).item()?, lambda_disc, lambda_t);
            Ok((total, report))
        }
    }
}

/// Per-example terms `[−log(e^{η(ŷ_g−δ)} / Σ_{i≠g} e^{ηŷ_i})]_+`, shape `[B]`.
pub fn classification_terms(
    tape: &mut Tape,
    scores: Var,
    targets: &[usize],
    eta: Var,
    delta: f64,
    include_true_class: bool,
) -> Result<Var> {
    let s = tape.shape(scores).to_vec();
    if s.len() != 2 || s[0] != targets.len() {
        return Err(Error::dim(
            "classification_loss",
            format!("scores {s:?} for {} targets", targets.len()),
        ));
    }
    let (b, n) = (s[0], s[1]);
    if b == 0 {
        return Err(Error::Contract("classification loss of an empty batch".into()));
    }
    if let Some(&g) = targets.iter().find(|&&g| g >= n) {
        return Err(Error::dim("classification_loss", format!("target {g} for {n} scores")));
    }
    if n < 2 && !include_true_class {
        return Err(Error::Contract("the margin loss needs at least two classes".into()));
    }
    let mut onehot = vec![0.0; b * n];
    for (i, &g) in targets.iter().enumerate() {
        onehot[i * n + g] = 1.0;
    }
    let others: Vec<f64> = if include_true_class {
        vec![1.0; b * n]
    } else {
        onehot.iter().map(|v| 1.0 - v).collect()
    };
    let onehot = tape.constant(&Tensor::new(vec![b, n], onehot)?)?;
    let others = tape.constant(&Tensor::new(vec![b, n], others)?)?;

    let logits = tape.mul(scores, eta)?;
    let e = tape.exp(logits)?;
    let e = tape.mul(e, others)?;
    let den = tape.sum_last_axis(e)?;
    let log_den = tape.log(den)?;
    let yg = tape.mul(scores, onehot)?;
    let yg = tape.sum_last_axis(yg)?;
    let yg = tape.shift(yg, -delta)?;
    let num = tape.mul(yg, eta)?;
    let neg = tape.scale(num, -1.0)?;
    let raw = tape.add(log_den, neg)?;
    tape.relu(raw)
}

/// Batch mean of [`classification_terms`].
pub fn classification_loss(
    tape: &mut Tape,
    scores: Var,
    targets: &[usize],
    eta: Var,
    delta: f64,
    include_true_class: bool,
) -> Result<Var> {
    let terms = classification_terms(tape, scores, targets, eta, delta, include_true_class)?;
    let sum = tape.sum(terms)?;
    tape.scale(sum, 1.0 / targets.len() as f64)
}

/// `z / (‖z‖_F + eps)` applied to every trailing `H×W` map of `z`.
pub fn normalize_map(z: &Tensor, eps: f64) -> Tensor {
    let s = z.shape();
    let hw = if s.len() >= 2 { s[s.len() - 2] * s[s.len() - 1] } else { z.len().max(1) };
    let mut out = z.clone();
    for m in out.data_mut().chunks_mut(hw) {
        let n = m.iter().map(|v| v * v).sum::<f64>().sqrt();
        let inv = 1.0 / (n + eps);
        m.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

/// `(1/B) Σ_b Σ_ℓ Σ_c Ĩ_{ℓ,c} ‖norm(Z'_{ℓ,c}) − norm(Z_{ℓ,c})‖²_F` with the
/// teacher maps entering as constants.
pub fn discrepancy_loss(
    tape: &mut Tape,
    student: &[FeatureTap],
    teacher: &[Tensor],
    importance: &[Vec<f64>],
    eps: f64,
) -> Result<Var> {
    if student.len() != teacher.len() || student.len() != importance.len() || student.is_empty() {
        return Err(Error::dim(
            "discrepancy_loss",
            format!(
                "{} student taps, {} teacher taps, {} importance layers",
                student.len(),
                teacher.len(),
                importance.len()
            ),
        ));
    }
    let mut acc: Option<Var> = None;
    let mut batch = 0;
    for ((tap, t), imp) in student.iter().zip(teacher).zip(importance) {
        let s = tape.shape(tap.maps).to_vec();
        if s != t.shape() || s.len() != 4 {
            return Err(Error::dim(
                "discrepancy_loss",
                format!("layer {}: student {s:?} vs teacher {:?}", tap.layer, t.shape()),
            ));
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        if imp.len() != c {
            return Err(Error::dim(
                "discrepancy_loss",
                format!("layer {}: {} importances for {c} channels", tap.layer, imp.len()),
            ));
        }
        if let Some(v) = imp.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::Contract(format!("importance {v} on layer {}", tap.layer)));
        }
        batch = b;
        let sn = tape.normalize(tap.maps, hw, eps)?;
        let neg_t = tape.constant(&normalize_map(t, eps).map(|v| -v))?;
        let diff = tape.add(sn, neg_t)?;
        let sq = tape.mul(diff, diff)?;
        let mut w = Vec::with_capacity(b * c * hw);
        for _ in 0..b {
            for &i in imp {
                w.extend(std::iter::repeat_n(i, hw));
            }
        }
        let w = tape.constant(&Tensor::new(s, w)?)?;
        let weighted = tape.mul(sq, w)?;
        let layer = tape.sum(weighted)?;
        acc = Some(match acc {
            None => layer,
            Some(a) => tape.add(a, layer)?,
        });
    }
    let total = acc.expect("at least one layer");
    tape.scale(total, 1.0 / batch as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;

    fn cls_value(scores: &[f64], n: usize, targets: &[usize], eta: f64, delta: f64) -> f64 {
        let mut tape = Tape::new();
        let b = targets.len();
        let s = tape.constant(&Tensor::new(vec![b, n], scores.to_vec()).unwrap()).unwrap();
        let e = tape.constant(&Tensor::scalar(eta)).unwrap();
        let l = classification_loss(&mut tape, s, targets, e, delta, false).unwrap();
        tape.value(l).item().unwrap()
    }

    /// Direct scalar evaluation of the margin loss for one example.
    fn reference(scores: &[f64], g: usize, eta: f64, delta: f64) -> f64 {
        let den: f64 = scores
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != g)
            .map(|(_, s)| (eta * s).exp())
            .sum();
        (-(eta * (scores[g] - delta)) + den.ln()).max(0.0)
    }

    #[test]
    fn lambda_t_values() {
        assert!((lambda_t(60, 50).unwrap() - 6f64.sqrt()).abs() < 1e-15);
        assert_eq!(lambda_t(50, 0).unwrap(), 1.0);
        assert!((lambda_t(51, 50).unwrap() - 7.141).abs() < 1e-3);
        assert!(lambda_t(5, 5).is_err());
        assert!(lambda_t(4, 5).is_err());
    }

    #[test]
    fn single_term_denominator() {
        assert!((cls_value(&[0.0, 1.0], 2, &[0], 1.0, 0.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn large_margin_clamps_to_zero() {
        assert_eq!(cls_value(&[1.0, -1.0], 2, &[0], 10.0, 0.0), 0.0);
        assert_eq!(cls_value(&[0.9, 0.3, 0.1], 3, &[0], 2.0, 0.1), 0.0);
        let raw = -(1.6 - (0.6f64.exp() + 0.2f64.exp()).ln());
        assert!((raw - (-0.487)).abs() < 1e-3);
    }

    #[test]
    fn positive_when_true_class_is_weak() {
        let v = cls_value(&[0.2, 0.6, 0.5], 3, &[0], 2.0, 0.1);
        assert!(v > 0.0);
        assert!((v - reference(&[0.2, 0.6, 0.5], 0, 2.0, 0.1)).abs() < 1e-14);
    }

    #[test]
    fn batch_mean_matches_reference() {
        let scores = [0.1, 0.5, -0.2, 0.3, 0.3, 0.9];
        let v = cls_value(&scores, 3, &[2, 0], 3.0, 0.6);
        let r = 0.5 * (reference(&scores[..3], 2, 3.0, 0.6) + reference(&scores[3..], 0, 3.0, 0.6));
        assert!((v - r).abs() < 1e-14);
    }

    #[test]
    fn target_out_of_range_and_empty_batch() {
        let mut tape = Tape::new();
        let s = tape.constant(&Tensor::zeros(&[1, 2])).unwrap();
        let e = tape.constant(&Tensor::scalar(1.0)).unwrap();
        assert!(classification_loss(&mut tape, s, &[2], e, 0.0, false).is_err());
        let s0 = tape.constant(&Tensor::zeros(&[0, 2])).unwrap();
        assert!(classification_loss(&mut tape, s0, &[], e, 0.0, false).is_err());
    }

    #[test]
    fn including_true_class_is_cross_entropy_with_margin() {
        let mut tape = Tape::new();
        let sc = [0.2, 0.7];
        let s = tape.constant(&Tensor::new(vec![1, 2], sc.to_vec()).unwrap()).unwrap();
        let e = tape.constant(&Tensor::scalar(2.0)).unwrap();
        let l = classification_loss(&mut tape, s, &[1], e, 0.1, true).unwrap();
        let r = -(2.0 * (0.7 - 0.1)) + ((2.0f64 * 0.2).exp() + (2.0f64 * 0.7).exp()).ln();
        assert!((tape.value(l).item().unwrap() - r).abs() < 1e-14);
    }

    #[test]
    fn normalize_map_cases() {
        let z = Tensor::from_rows(&[&[3.0, 0.0], &[0.0, 4.0]]).unwrap();
        let n = normalize_map(&z, MAP_NORM_EPS);
        assert!((n.data()[0] - 0.6).abs() < 1e-8 && (n.data()[3] - 0.8).abs() < 1e-8);
        assert!(crate::tensor::frobenius_norm(&n) <= 1.0);
        assert_eq!(normalize_map(&Tensor::zeros(&[2, 2]), MAP_NORM_EPS), Tensor::zeros(&[2, 2]));
        let big = normalize_map(&z.map(|v| 10.0 * v), MAP_NORM_EPS);
        for (a, b) in big.data().iter().zip(n.data()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    fn tap_of(tape: &mut Tape, t: &Tensor) -> FeatureTap {
        FeatureTap {
            layer: 0,
            channels: t.shape()[1],
            maps: tape.param(t).unwrap(),
        }
    }

    #[test]
    fn identical_taps_have_zero_discrepancy() {
        let t = Tensor::new(vec![2, 2, 2, 2], (0..16).map(|i| i as f64 - 3.0).collect()).unwrap();
        let mut tape = Tape::new();
        let tap = tap_of(&mut tape, &t);
        let d = discrepancy_loss(&mut tape, &[tap], std::slice::from_ref(&t), &[vec![1.0, 2.0]], MAP_NORM_EPS).unwrap();
        assert_eq!(tape.value(d).item().unwrap(), 0.0);
    }

    #[test]
    fn half_difference_in_every_entry() {
        // Normalized student is 0.5 everywhere, teacher is the zero map.
        let s = Tensor::full(&[1, 1, 2, 2], 3.0);
        let t = Tensor::zeros(&[1, 1, 2, 2]);
        let mut tape = Tape::new();
        let tap = tap_of(&mut tape, &s);
        let d = discrepancy_loss(&mut tape, &[tap], &[t], &[vec![1.0]], MAP_NORM_EPS).unwrap();
        assert!((tape.value(d).item().unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn linear_in_importance() {
        let s = Tensor::new(vec![2, 2, 2, 1], vec![1.0, 2.0, 0.5, -1.0, 3.0, 0.0, 1.0, 1.0]).unwrap();
        let t = Tensor::new(vec![2, 2, 2, 1], vec![2.0, 1.0, 1.0, 1.0, 0.0, 3.0, 1.0, -1.0]).unwrap();
        let eval = |imp: Vec<f64>| {
            let mut tape = Tape::new();
            let tap = tap_of(&mut tape, &s);
            let d = discrepancy_loss(&mut tape, &[tap], std::slice::from_ref(&t), &[imp], MAP_NORM_EPS).unwrap();
            tape.value(d).item().unwrap()
        };
        let c0 = eval(vec![1.0, 0.0]);
        let c1 = eval(vec![0.0, 1.0]);
        assert!((eval(vec![1.0, 1.0]) - (c0 + c1)).abs() < 1e-14);
        assert!((eval(vec![2.0, 1.0]) - (2.0 * c0 + c1)).abs() < 1e-14);
    }

    #[test]
    fn rejects_negative_importance_and_mismatch() {
        let s = Tensor::zeros(&[1, 2, 1, 1]);
        let mut tape = Tape::new();
        let tap = tap_of(&mut tape, &s);
        assert!(matches!(
            discrepancy_loss(&mut tape, &[tap], std::slice::from_ref(&s), &[vec![1.0, -1.0]], MAP_NORM_EPS),
            Err(Error::Contract(_))
        ));
        assert!(discrepancy_loss(&mut tape, &[tap], std::slice::from_ref(&s), &[vec![1.0]], MAP_NORM_EPS).is_err());
        assert!(discrepancy_loss(&mut tape, &[tap], &[Tensor::zeros(&[1, 2, 2, 1])], &[vec![1.0, 1.0]], MAP_NORM_EPS).is_err());
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.0, 0.5, 4.0, 2.0).total, 5.0);
        assert_eq!(total_loss(0.7, 0.0, 4.0, 1.0).total, 0.7);
        assert_eq!(total_loss(0.7, 0.3, 0.0, 3.0).total, 0.7);
    }

    #[test]
    fn discrepancy_gradient_matches_finite_differences() {
        let s = Tensor::new(vec![2, 2, 2, 2], (0..16).map(|i| ((i * 7) % 5) as f64 - 1.7).collect()).unwrap();
        let t = Tensor::new(vec![2, 2, 2, 2], (0..16).map(|i| ((i * 3) % 4) as f64 * 0.4 - 0.5).collect()).unwrap();
        let imp = vec![0.4, 1.6];
        let f = |x: &[Tensor]| {
            let mut tape = Tape::new();
            let tap = tap_of(&mut tape, &x[0]);
            let d = discrepancy_loss(&mut tape, &[tap], std::slice::from_ref(&t), std::slice::from_ref(&imp), MAP_NORM_EPS)?;
            tape.value(d).item()
        };
        let mut tape = Tape::new();
        let tap = tap_of(&mut tape, &s);
        let d = discrepancy_loss(&mut tape, &[tap], std::slice::from_ref(&t), std::slice::from_ref(&imp), MAP_NORM_EPS).unwrap();
        let g = tape.backward_wrt(d, &[tap.maps]).unwrap();
        let n = gradcheck::central_difference(f, &[s], gradcheck::DEFAULT_STEP).unwrap();
        assert!(gradcheck::compare(&g, &n).passes(1e-4));
    }
}
