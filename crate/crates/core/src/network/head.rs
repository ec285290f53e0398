use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

const PROXY_EPS: f64 = 1e-12;

/// Local similarity classifier: `J` unit proxies per class, a learnable
/// scale `η` and a fixed margin `δ`.
#[derive(Clone, Debug, PartialEq)]
pub struct LscHead {
    /// `[n·J, d]`, rows `k·J .. (k+1)·J` belong to head column `k`.
    pub proxies: Tensor,
    /// One-element tensor.
    pub eta: Tensor,
    pub delta: f64,
    j: usize,
}

impl LscHead {
    pub fn new(dim: usize, proxies_per_class: usize, eta: f64, delta: f64) -> Self {
        LscHead {
            proxies: Tensor::zeros(&[0, dim]),
            eta: Tensor::scalar(eta),
            delta,
            j: proxies_per_class,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.proxies.shape()[0] / self.j
    }

    pub fn proxies_per_class(&self) -> usize {
        self.j
    }

    pub fn dim(&self) -> usize {
        self.proxies.shape()[1]
    }

    pub fn eta(&self) -> f64 {
        self.eta.data()[0]
    }

    /// Appends `J` random unit proxies for each of `new_classes` classes.
    pub fn grow(&mut self, new_classes: usize, rng: &mut Rng) -> Result<()> {
        if new_classes == 0 {
            return Err(Error::Contract("grow_head needs at least one new class".into()));
        }
        let d = self.dim();
        let rows = new_classes * self.j;
        let mut data = self.proxies.data().to_vec();
        data.reserve(rows * d);
        for _ in 0..rows {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= n);
            data.extend(v);
        }
        self.proxies = Tensor::new(vec![data.len() / d, d], data)?;
        Ok(())
    }

    /// Appends caller-supplied proxies (`[new·J, d]`, normalized here).
    pub fn grow_with(&mut self, proxies: &Tensor) -> Result<()> {
        let d = self.dim();
        if proxies.rank() != 2 || proxies.shape()[1] != d || !proxies.shape()[0].is_multiple_of(self.j) || proxies.is_empty() {
            return Err(Error::dim("grow_with", format!("{:?}", proxies.shape())));
        }
        let mut data = self.proxies.data().to_vec();
        data.extend_from_slice(proxies.data());
        self.proxies = Tensor::new(vec![data.len() / d, d], data)?;
        let old = self.proxies.shape()[0] - proxies.shape()[0];
        renormalize_rows(&mut self.proxies.data_mut()[old * d..], d);
        Ok(())
    }

    /// Projects every proxy back onto the unit sphere.
    pub fn renormalize(&mut self) {
        let d = self.dim();
        renormalize_rows(self.proxies.data_mut(), d);
    }

    pub fn clamp_eta(&mut self, min: f64) {
        let e = &mut self.eta.data_mut()[0];
        *e = e.max(min);
    }

    /// Records `ŷ_k = Σ_j softmax_j(⟨θ_kj, h⟩)·⟨θ_kj, h⟩` on the tape.
    /// Proxies are normalized inside the graph so the gradient respects
    /// the unit-norm constraint.
    pub(crate) fn record_scores(&self, tape: &mut Tape, h: Var, proxies: Var) -> Result<Var> {
        let d = self.dim();
        let b = tape.shape(h)[0];
        let n = self.num_classes();
        let p = tape.normalize(proxies, d, PROXY_EPS)?;
        let sims = tape.matmul(h, p, true)?;
        let sims = tape.reshape(sims, vec![b, n, self.j])?;
        let w = tape.softmax(sims)?;
        let weighted = tape.mul(w, sims)?;
        tape.sum_last_axis(weighted)
    }
}

fn renormalize_rows(data: &mut [f64], d: usize) {
    for row in data.chunks_mut(d) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
}

/// Reference LSC scores for one embedding `h` against `[n·J, d]` proxies.
pub fn lsc_scores(h: &[f64], proxies: &Tensor, j: usize) -> Result<Vec<f64>> {
    let d = h.len();
    if proxies.rank() != 2 || proxies.shape()[1] != d || j == 0 || !proxies.shape()[0].is_multiple_of(j) {
        return Err(Error::dim("lsc_scores", format!("h[{d}] vs proxies {:?}", proxies.shape())));
    }
    let sims: Vec<f64> = proxies.data().chunks(d).map(|p| crate::tensor::dot(p, h)).collect();
    Ok(sims
        .chunks(j)
        .map(|s| {
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            s.iter().zip(&e).map(|(v, w)| v * w / z).sum()
        })
        .collect())
}
