//! Exemplar memory: herding selection, budget truncation and the two
//! inference rules (nearest exemplar mean, classifier argmax).

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::{Split, StagePlan};
use crate::error::{Error, Result};
use crate::network::Model;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

const INFER_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    /// `R_per` exemplars for every class.
    PerClass(usize),
    /// `R_total` shared by all seen classes, `⌊R_total / n^t⌋` each.
    Total(usize),
}

impl Budget {
    pub fn per_class(&self, seen: usize) -> usize {
        match *self {
            Budget::PerClass(r) => r,
            Budget::Total(r) => r / seen.max(1),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    Herding,
    Random,
}

/// Greedy herding: step `s` adds the example whose inclusion brings the
/// running mean closest to the class mean. Ties go to the lowest index.
pub fn herd_select(embeddings: &[Vec<f64>], m: usize) -> Result<Vec<usize>> {
    if embeddings.is_empty() {
        return Err(Error::Contract("herding over an empty class".into()));
    }
    let d = embeddings[0].len();
    let n = embeddings.len() as f64;
    let mut mu = vec![0.0; d];
    for e in embeddings {
        mu.iter_mut().zip(e).for_each(|(a, b)| *a += b);
    }
    mu.iter_mut().for_each(|v| *v /= n);
    herd_select_towards(embeddings, &mu, m)
}

/// [`herd_select`] towards an explicit target mean `mu`.
pub fn herd_select_towards(embeddings: &[Vec<f64>], mu: &[f64], m: usize) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(Error::Contract("herding budget must be positive".into()));
    }
    let n = embeddings.len();
    let m = if m > n {
        log::warn!("budget {m} exceeds the {n} available examples; keeping all");
        n
    } else {
        m
    };
    let d = mu.len();
    let mut chosen = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut acc = vec![0.0; d];
    for step in 1..=m {
        let inv = 1.0 / step as f64;
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in embeddings.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let dist: f64 = (0..d)
                .map(|k| {
                    let diff = mu[k] - (acc[k] + e[k]) * inv;
                    diff * diff
                })
                .sum();
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((i, dist));
            }
        }
        let (i, _) = best.expect("unselected example remains");
        taken[i] = true;
        acc.iter_mut().zip(&embeddings[i]).for_each(|(a, b)| *a += b);
        chosen.push(i);
    }
    Ok(chosen)
}

/// Index of the largest score; ties go to the lowest index.
pub fn classify_cnn(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExemplarStore {
    /// Class id → training-split indices in selection order.
    pub per_class: BTreeMap<usize, Vec<usize>>,
    /// Class id → unit-normalized mean exemplar embedding.
    pub class_means: BTreeMap<usize, Vec<f64>>,
}

impl ExemplarStore {
    pub fn len(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every stored index, sorted.
    pub fn indices(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.per_class.values().flatten().copied().collect();
        all.sort_unstable();
        all
    }

    /// Nearest class mean to `h`; ties go to the lowest class id.
    pub fn classify_nme(&self, h: &[f64]) -> Result<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (&k, mu) in &self.class_means {
            let d: f64 = mu.iter().zip(h).map(|(a, b)| (a - b) * (a - b)).sum();
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((k, d));
            }
        }
        best.map(|(k, _)| k).ok_or_else(|| Error::Contract("NME classification with an empty store".into()))
    }

    /// Selects exemplars for the classes introduced at `stage`, truncates
    /// older classes to the stage budget, and recomputes every class mean
    /// with `model`.
    #[allow(clippy::too_many_arguments)]
    pub fn rebuild(
        &self,
        model: &Model,
        split: &Split,
        plan: &StagePlan,
        stage: usize,
        budget: Budget,
        selection: Selection,
        seed: u64,
    ) -> Result<ExemplarStore> {
        let m = budget.per_class(plan.seen_after(stage));
        if m == 0 {
            return Err(Error::Config(format!(
                "budget {budget:?} leaves no exemplars for {} classes",
                plan.seen_after(stage)
            )));
        }
        let mut per_class = BTreeMap::new();
        for &k in plan.seen_classes(stage) {
            let kept = match self.per_class.get(&k) {
                Some(old) => old[..old.len().min(m)].to_vec(),
                None => {
                    let pool = split.indices_of(k);
                    if pool.is_empty() {
                        return Err(Error::Config(format!("class {k} has no training examples")));
                    }
                    match selection {
                        Selection::Herding => {
                            let emb = embeddings(model, split, &pool)?;
                            herd_select(&emb, m)?.into_iter().map(|i| pool[i]).collect()
                        }
                        Selection::Random => {
                            let mut r = rng::rng(rng::derive(seed, Stream::Exemplars, k as u64));
                            let take = m.min(pool.len());
                            index::sample(&mut r, pool.len(), take).into_iter().map(|i| pool[i]).collect()
                        }
                    }
                }
            };
            per_class.insert(k, kept);
        }
        let mut store = ExemplarStore {
            per_class,
            class_means: BTreeMap::new(),
        };
        store.refresh_means(model, split)?;
        Ok(store)
    }

    /// Recomputes the unit-normalized class means from stored exemplars.
    pub fn refresh_means(&mut self, model: &Model, split: &Split) -> Result<()> {
        self.class_means.clear();
        for (&k, idx) in &self.per_class {
            if idx.is_empty() {
                continue;
            }
            let emb = embeddings(model, split, idx)?;
            let d = emb[0].len();
            let mut mu = vec![0.0; d];
            for e in &emb {
                mu.iter_mut().zip(e).for_each(|(a, b)| *a += b);
            }
            let n = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                mu.iter_mut().for_each(|v| *v /= n);
            }
            self.class_means.insert(k, mu);
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut w: W, stage: usize, header: bool) -> std::io::Result<()> {
        if header {
            writeln!(w, "stage,class,rank,dataset_index")?;
        }
        for (k, idx) in &self.per_class {
            for (rank, i) in idx.iter().enumerate() {
                writeln!(w, "{stage},{k},{rank},{i}")?;
            }
        }
        Ok(())
    }
}

/// Eval-mode L2-normalized embeddings of `split[indices]`.
pub fn embeddings(model: &Model, split: &Split, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
    let images: Tensor = split.images.gather_outer(indices)?;
    let (_, emb) = model.infer_batched(&images, INFER_BATCH)?;
    let d = emb.shape()[1];
    Ok(emb.data().chunks(d).map(<[f64]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_stage_plan, make_synthetic, SyntheticSpec};
    use crate::network::NetworkConfig;
    use proptest::prelude::*;

    fn scalars(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn herding_scalar_example() {
        assert_eq!(herd_select(&scalars(&[1.0, 2.0, 9.0]), 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn identical_embeddings_take_first_indices() {
        let e = vec![vec![0.6, 0.8]; 5];
        assert_eq!(herd_select(&e, 3).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn over_budget_keeps_everyone() {
        let e = scalars(&[0.0, 4.0, 1.0]);
        let all = herd_select(&e, 3).unwrap();
        assert_eq!(herd_select(&e, 10).unwrap(), all);
        let mut sorted = all.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2]);
        assert!(herd_select(&e, 0).is_err());
    }

    #[test]
    fn nme_rules() {
        let mut s = ExemplarStore::default();
        assert!(s.classify_nme(&[1.0, 0.0]).is_err());
        s.class_means.insert(1, vec![1.0, 0.0]);
        s.class_means.insert(2, vec![0.0, 1.0]);
        let n = (0.81f64 + 0.01).sqrt();
        assert_eq!(s.classify_nme(&[0.9 / n, 0.1 / n]).unwrap(), 1);
        assert_eq!(s.classify_nme(&[0.0, 1.0]).unwrap(), 2);
        let h = 0.5f64.sqrt();
        assert_eq!(s.classify_nme(&[h, h]).unwrap(), 1);
    }

    #[test]
    fn cnn_rules() {
        assert_eq!(classify_cnn(&[0.1, 0.9]), 1);
        assert_eq!(classify_cnn(&[0.3, 0.3, 0.3]), 0);
        assert_eq!(classify_cnn(&[-0.2]), 0);
    }

    #[test]
    fn budgets() {
        assert_eq!(Budget::Total(2000).per_class(100), 20);
        assert_eq!(Budget::Total(2000).per_class(50), 40);
        assert_eq!(Budget::Total(10).per_class(3), 3);
        assert_eq!(Budget::PerClass(20).per_class(4), 20);
    }

    fn fixture() -> (Model, crate::data::Dataset, StagePlan) {
        let ds = make_synthetic(&SyntheticSpec::new(4, 12, 8, 1)).unwrap();
        let plan = build_stage_plan(4, 2, 3, false).unwrap();
        let cfg = NetworkConfig {
            channels: vec![3, 4],
            proxies_per_class: 1,
            ..NetworkConfig::default()
        };
        let model = Model::new(&cfg, 1, 4, &mut rng::rng(0)).unwrap();
        (model, ds, plan)
    }

    #[test]
    fn rebuild_per_class_budget() {
        let (model, ds, plan) = fixture();
        let s0 = ExemplarStore::default()
            .rebuild(&model, &ds.train, &plan, 0, Budget::PerClass(5), Selection::Herding, 0)
            .unwrap();
        assert_eq!(s0.len(), 10);
        let s1 = s0.rebuild(&model, &ds.train, &plan, 1, Budget::PerClass(5), Selection::Herding, 0).unwrap();
        assert_eq!(s1.len(), 20);
        for &k in &plan.stages[0] {
            assert_eq!(s1.per_class[&k], s0.per_class[&k]);
        }
        for (k, idx) in &s1.per_class {
            assert!(idx.iter().all(|&i| ds.train.labels[i] == *k));
            let mu = &s1.class_means[k];
            assert!((mu.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn total_budget_truncates_to_prefix() {
        let (model, ds, plan) = fixture();
        let s0 = ExemplarStore::default()
            .rebuild(&model, &ds.train, &plan, 0, Budget::Total(16), Selection::Herding, 0)
            .unwrap();
        assert!(s0.per_class.values().all(|v| v.len() == 8));
        let s1 = s0.rebuild(&model, &ds.train, &plan, 1, Budget::Total(16), Selection::Herding, 0).unwrap();
        for &k in &plan.stages[0] {
            assert_eq!(s1.per_class[&k], s0.per_class[&k][..4]);
        }
        assert_eq!(s1.len(), 16);
        assert!(s0
            .rebuild(&model, &ds.train, &plan, 1, Budget::Total(3), Selection::Herding, 0)
            .is_err());
    }

    #[test]
    fn random_selection_is_seeded() {
        let (model, ds, plan) = fixture();
        let a = ExemplarStore::default()
            .rebuild(&model, &ds.train, &plan, 0, Budget::PerClass(4), Selection::Random, 5)
            .unwrap();
        let b = ExemplarStore::default()
            .rebuild(&model, &ds.train, &plan, 0, Budget::PerClass(4), Selection::Random, 5)
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
    }

    #[test]
    fn csv_rows() {
        let mut s = ExemplarStore::default();
        s.per_class.insert(3, vec![7, 2]);
        let mut buf = Vec::new();
        s.write_csv(&mut buf, 1, true).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "stage,class,rank,dataset_index\n1,3,0,7\n1,3,1,2\n");
    }

    proptest! {
        #[test]
        fn herding_prefix_property(seed: u64, n in 1usize..12, d in 1usize..4) {
            use rand_distr::{Distribution, StandardNormal};
            let mut r = rng::rng(seed);
            let e: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(&mut r)).collect()).collect();
            let full = herd_select(&e, n).unwrap();
            for m in 1..=n {
                prop_assert_eq!(&herd_select(&e, m).unwrap()[..], &full[..m]);
            }
        }

        #[test]
        fn argmax_and_argmin_are_scale_invariant(v in proptest::collection::vec(-1.0f64..1.0, 1..8), c in 0.01f64..100.0) {
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            prop_assert_eq!(classify_cnn(&v), classify_cnn(&scaled));
        }
    }
}
