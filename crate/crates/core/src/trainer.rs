//! The incremental stage loop.
//!
//! Each stage freezes the previous model as teacher, grows the head, trains
//! on `D^t ∪ E^t` with the combined loss, then estimates channel importance,
//! rebuilds the exemplar memory and evaluates on every seen class.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{BaselineMode, ExperimentConfig};
use crate::data::{build_stage_plan, Dataset, StageLoader, StagePlan};
use crate::error::{Error, Result};
use crate::importance::{self, EstimateOptions, ImportanceTable};
use crate::losses::{self, LossReport};
use crate::memory::{classify_cnn, ExemplarStore};
use crate::metrics::{self, AccuracyMatrix};
use crate::network::{Mode, Model, Teacher};
use crate::rng::{self, Stream};
use crate::tensor::{Tape, Tensor};

const EVAL_BATCH: usize = 256;

/// `0.5·lr0·(1 + cos(π·epoch/total))`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64) -> f64 {
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos())
}

/// SGD with heavy-ball momentum and decoupled handling of head parameters
/// (no weight decay on proxies or `η`).
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &[Tensor], lr: f64) {
        let head: Vec<bool> = (0..grads.len()).map(|i| model.is_head_param(i)).collect();
        let params = model.params_mut();
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let wd = if head[i] { 0.0 } else { self.weight_decay };
            let v = &mut self.velocity[i];
            for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi + wd * *w;
                *w -= lr * *vi;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub stage: usize,
    pub epoch: usize,
    pub iter: usize,
    #[serde(flatten)]
    pub loss: LossReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: usize,
    pub seen_classes: usize,
    pub acc_nme: f64,
    pub acc_cnn: f64,
    /// Accuracy on each earlier task's classes (and this one's), in stage order.
    pub task_acc_nme: Vec<f64>,
    pub task_acc_cnn: Vec<f64>,
    #[serde(skip)]
    pub log: Vec<LogRow>,
    #[serde(skip)]
    pub importance: Option<ImportanceTable>,
    pub optimizer_steps: usize,
    pub backward_passes: usize,
    pub importance_estimates: usize,
    pub exemplars: usize,
    pub teacher_digest: Option<String>,
    pub model_digest: String,
    #[serde(skip)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub mode: BaselineMode,
    pub stages: usize,
    pub avg_inc_acc_nme: f64,
    pub avg_inc_acc_cnn: f64,
    pub avg_acc_nme: f64,
    pub avg_acc_cnn: f64,
    pub bwt_nme: Option<f64>,
    pub bwt_cnn: Option<f64>,
    pub seen_acc_nme: Vec<f64>,
    pub seen_acc_cnn: Vec<f64>,
    pub accuracy_nme: AccuracyMatrix,
    pub accuracy_cnn: AccuracyMatrix,
    pub stage_results: Vec<StageResult>,
}

pub struct ExperimentResult {
    pub summary: Summary,
    pub stages: Vec<StageResult>,
    pub model: Model,
    pub store: ExemplarStore,
    pub plan: StagePlan,
}

/// Mutable state carried from one stage to the next.
pub struct RunState {
    pub model: Model,
    pub store: ExemplarStore,
    /// `Ĩ^{t−1}`, consumed by the discrepancy loss of stage `t`.
    pub importance: Option<ImportanceTable>,
}

/// Trains stage `t` and returns its result; `state` is advanced in place.
pub fn run_stage(
    t: usize,
    state: &mut RunState,
    plan: &StagePlan,
    data: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<StageResult> {
    let seed = cfg.train.seed;
    let teacher: Option<Teacher> = (t > 0).then(|| state.model.clone_frozen());
    if t > 0 {
        let mut g = rng::rng(rng::derive(seed, Stream::HeadGrowth, t as u64));
        state.model.head.grow(plan.stages[t].len(), &mut g)?;
    }
    if state.model.num_classes() != plan.seen_after(t) {
        return Err(Error::Contract(format!(
            "head has {} columns, stage {t} needs {}",
            state.model.num_classes(),
            plan.seen_after(t)
        )));
    }
    let lambda_t = losses::lambda_t(plan.seen_after(t), plan.seen_before(t))?;
    let disc_weight = match cfg.mode {
        BaselineMode::Finetune => 0.0,
        _ => cfg.loss.lambda_disc,
    };
    let use_teacher = teacher.is_some() && disc_weight > 0.0;
    let weights: Option<Vec<Vec<f64>>> = if use_teacher {
        Some(match (cfg.mode, &state.importance) {
            (BaselineMode::Afc, Some(imp)) => imp.weights(),
            _ => ImportanceTable::uniform(&state.model, t).weights(),
        })
    } else {
        None
    };
    let teacher_digest = teacher.as_ref().map(Teacher::digest);

    let exemplars = state.store.indices();
    let loader = StageLoader::new(plan, &data.train, t, &exemplars, cfg.train.batch_size)?
        .with_augment(cfg.train.augment);
    let mut shuffle = rng::rng(rng::derive(seed, Stream::Shuffle, t as u64));
    let mut sgd = Sgd::new(cfg.train.momentum, cfg.train.weight_decay);
    let mut log = Vec::new();
    let (mut steps, mut backward_passes) = (0, 0);

    for epoch in 0..cfg.train.epochs {
        let lr = cosine_lr(epoch, cfg.train.epochs, cfg.train.lr);
        for (iter, batch) in loader.epoch(plan, &data.train, &mut shuffle)?.into_iter().enumerate() {
            let mut tape = Tape::new();
            let x = tape.constant(&batch.images)?;
            let f = state.model.forward(&mut tape, x, Mode::Train, true)?;
            let eta = *f.params.last().expect("eta leaf");
            let cls = losses::classification_loss(
                &mut tape,
                f.scores,
                &batch.targets,
                eta,
                state.model.head.delta,
                cfg.loss.include_true_class,
            )?;
            let disc = match (&teacher, &weights) {
                (Some(teacher), Some(w)) if use_teacher => {
                    let mut ttape = Tape::new();
                    let tx = ttape.constant(&batch.images)?;
                    let tf = teacher.forward(&mut ttape, tx)?;
                    let maps: Vec<Tensor> = tf.taps.iter().map(|tp| ttape.value(tp.maps).clone()).collect();
                    Some(losses::discrepancy_loss(&mut tape, &f.taps, &maps, w, cfg.loss.map_norm_eps)?)
                }
                _ => None,
            };
            let (total, report) = losses::record_total(&mut tape, cls, disc, disc_weight, lambda_t)?;
            if !report.total.is_finite() {
                return Err(Error::StageAborted {
                    stage: t,
                    detail: format!("non-finite loss at epoch {epoch}, iteration {iter}: {report:?}"),
                });
            }
            let grads = tape.backward(total)?;
            backward_passes += tape.backward_passes();
            let g: Vec<Tensor> = f.params.iter().map(|&p| grads.get(p)).collect();
            sgd.step(&mut state.model, &g, lr);
            state.model.head.renormalize();
            state.model.head.clamp_eta(cfg.network.eta_min);
            state.model.update_running_stats(&f.batch_stats);
            steps += 1;
            log.push(LogRow {
                stage: t,
                epoch,
                iter,
                loss: report,
            });
        }
    }
    if let (Some(teacher), Some(before)) = (&teacher, &teacher_digest) {
        if &teacher.digest() != before {
            return Err(Error::StageAborted {
                stage: t,
                detail: "teacher parameters changed during training".into(),
            });
        }
    }

    let (table, estimates) = match cfg.mode {
        BaselineMode::Afc => {
            let opts = EstimateOptions {
                batch_size: cfg.importance.batch_size,
                include_true_class: cfg.loss.include_true_class,
                train_mode_bn: cfg.importance.train_mode_bn,
                sample_limit: cfg.importance.sample_limit,
            };
            let raw = importance::estimate(&state.model, &data.train, loader.indices(), plan, t, &opts)?;
            (raw.finalized(), 1)
        }
        _ => (ImportanceTable::uniform(&state.model, t), 0),
    };

    state.store = state.store.rebuild(
        &state.model,
        &data.train,
        plan,
        t,
        cfg.memory.budget,
        cfg.memory.selection,
        rng::derive(seed, Stream::Exemplars, t as u64),
    )?;
    let eval = evaluate(&state.model, &state.store, plan, data, t)?;
    state.importance = Some(table.clone());

    Ok(StageResult {
        stage: t,
        seen_classes: plan.seen_after(t),
        acc_nme: eval.seen_nme,
        acc_cnn: eval.seen_cnn,
        task_acc_nme: eval.task_nme,
        task_acc_cnn: eval.task_cnn,
        log,
        importance: Some(table),
        optimizer_steps: steps,
        backward_passes,
        importance_estimates: estimates,
        exemplars: state.store.len(),
        teacher_digest,
        model_digest: state.model.digest(),
        checkpoint: None,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub seen_nme: f64,
    pub seen_cnn: f64,
    pub task_nme: Vec<f64>,
    pub task_cnn: Vec<f64>,
}

/// Accuracy (%) on the test examples of every class seen by `stage`.
pub fn evaluate(
    model: &Model,
    store: &ExemplarStore,
    plan: &StagePlan,
    data: &Dataset,
    stage: usize,
) -> Result<Evaluation> {
    let seen = plan.seen_classes(stage);
    let idx: Vec<usize> = (0..data.test.len())
        .filter(|&i| seen.contains(&data.test.labels[i]))
        .collect();
    let images = data.test.images.gather_outer(&idx)?;
    let (scores, emb) = model.infer_batched(&images, EVAL_BATCH)?;
    let (n, d) = (model.num_classes(), emb.shape()[1]);
    let tasks = stage + 1;
    let mut hits_nme = vec![0usize; tasks];
    let mut hits_cnn = vec![0usize; tasks];
    let mut counts = vec![0usize; tasks];
    for (row, &i) in idx.iter().enumerate() {
        let label = data.test.labels[i];
        let task = plan.stage_of(label);
        counts[task] += 1;
        let cnn = plan.class_order[classify_cnn(&scores.data()[row * n..(row + 1) * n])];
        let nme = store.classify_nme(&emb.data()[row * d..(row + 1) * d])?;
        hits_cnn[task] += usize::from(cnn == label);
        hits_nme[task] += usize::from(nme == label);
    }
    let pct = |h: usize, c: usize| if c == 0 { 0.0 } else { 100.0 * h as f64 / c as f64 };
    let total: usize = counts.iter().sum();
    Ok(Evaluation {
        seen_nme: pct(hits_nme.iter().sum(), total),
        seen_cnn: pct(hits_cnn.iter().sum(), total),
        task_nme: hits_nme.iter().zip(&counts).map(|(&h, &c)| pct(h, c)).collect(),
        task_cnn: hits_cnn.iter().zip(&counts).map(|(&h, &c)| pct(h, c)).collect(),
    })
}

/// Runs every stage of `cfg` on `data`. With `out`, writes per-stage
/// checkpoints plus `metrics.csv`, `importance.csv`, `exemplars.csv` and
/// `summary.json`.
pub fn run_experiment(cfg: &ExperimentConfig, data: &Dataset, out: Option<&Path>) -> Result<ExperimentResult> {
    cfg.validate()?;
    if data.num_classes != cfg.num_classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes, config declares {}",
            data.num_classes,
            cfg.num_classes()
        )));
    }
    let plan = build_stage_plan(data.num_classes, cfg.plan.stages, cfg.plan.order_seed, cfg.plan.initial_half)?;
    let hash = cfg.hash();
    let in_channels = data.train.example_shape()[0];
    let mut init = rng::rng(rng::derive(cfg.train.seed, Stream::Init, 0));
    let model = Model::new(&cfg.network, in_channels, plan.stages[0].len(), &mut init)?;
    let mut state = RunState {
        model,
        store: ExemplarStore::default(),
        importance: None,
    };
    let writers = match out {
        Some(dir) => Some(Outputs::create(dir)?),
        None => None,
    };
    let mut writers = writers;
    let mut results = Vec::with_capacity(plan.num_stages());
    let (mut acc_nme, mut acc_cnn) = (AccuracyMatrix::default(), AccuracyMatrix::default());
    for t in 0..plan.num_stages() {
        log::info!("stage {t}: {} classes", plan.stages[t].len());
        let mut r = run_stage(t, &mut state, &plan, data, cfg)?;
        acc_nme.push(r.task_acc_nme.clone(), r.acc_nme)?;
        acc_cnn.push(r.task_acc_cnn.clone(), r.acc_cnn)?;
        if let Some(w) = writers.as_mut() {
            let table = r.importance.as_ref().expect("stage importance");
            w.stage(t, &r.log, table, &state.store)?;
            let path = w.dir.join(format!("stage_{t:03}.ckpt"));
            Checkpoint::capture(&hash, t, &state.model, table, &state.store)?.write(&path)?;
            r.checkpoint = Some(path);
        }
        log::info!("stage {t}: nme {:.2}%, cnn {:.2}%", r.acc_nme, r.acc_cnn);
        results.push(r);
    }
    let two = plan.num_stages() >= 2;
    let summary = Summary {
        config_hash: hash,
        mode: cfg.mode,
        stages: plan.num_stages(),
        avg_inc_acc_nme: metrics::avg_incremental_accuracy(&acc_nme.seen)?,
        avg_inc_acc_cnn: metrics::avg_incremental_accuracy(&acc_cnn.seen)?,
        avg_acc_nme: metrics::average_accuracy(&acc_nme)?,
        avg_acc_cnn: metrics::average_accuracy(&acc_cnn)?,
        bwt_nme: if two { Some(metrics::backward_transfer(&acc_nme)?) } else { None },
        bwt_cnn: if two { Some(metrics::backward_transfer(&acc_cnn)?) } else { None },
        seen_acc_nme: acc_nme.seen.clone(),
        seen_acc_cnn: acc_cnn.seen.clone(),
        accuracy_nme: acc_nme,
        accuracy_cnn: acc_cnn,
        stage_results: results.clone(),
    };
    if let Some(w) = writers {
        w.finish(&summary)?;
    }
    Ok(ExperimentResult {
        summary,
        stages: results,
        model: state.model,
        store: state.store,
        plan,
    })
}

struct Outputs {
    dir: PathBuf,
    metrics: BufWriter<File>,
    importance: BufWriter<File>,
    exemplars: BufWriter<File>,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str, header: &str| -> Result<BufWriter<File>> {
            let p = dir.join(name);
            let mut w = BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?);
            writeln!(w, "{header}").map_err(|e| Error::io(&p, e))?;
            Ok(w)
        };
        Ok(Outputs {
            dir: dir.to_path_buf(),
            metrics: open("metrics.csv", "stage,epoch,iter,cls,disc,lambda_t,total")?,
            importance: open("importance.csv", "stage,layer,channel,raw,normalized")?,
            exemplars: open("exemplars.csv", "stage,class,rank,dataset_index")?,
        })
    }

    fn stage(&mut self, t: usize, log: &[LogRow], table: &ImportanceTable, store: &ExemplarStore) -> Result<()> {
        let io = |e| Error::io(&self.dir, e);
        for r in log {
            let l = &r.loss;
            writeln!(
                self.metrics,
                "{},{},{},{},{},{},{}",
                r.stage, r.epoch, r.iter, l.cls, l.disc, l.lambda_t, l.total
            )
            .map_err(io)?;
        }
        table.write_csv(&mut self.importance, false).map_err(io)?;
        store.write_csv(&mut self.exemplars, t, false).map_err(io)?;
        Ok(())
    }

    fn finish(mut self, summary: &Summary) -> Result<()> {
        for w in [&mut self.metrics, &mut self.importance, &mut self.exemplars] {
            w.flush().map_err(|e| Error::io(&self.dir, e))?;
        }
        let p = self.dir.join("summary.json");
        let mut text = serde_json::to_string_pretty(summary)?;
        text.push('\n');
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 10, 0.1), 0.1);
        assert!(cosine_lr(10, 10, 0.1).abs() < 1e-17);
        assert!((cosine_lr(5, 10, 0.1) - 0.05).abs() < 1e-17);
    }

    #[test]
    fn sgd_skips_weight_decay_on_head() {
        let cfg = crate::network::NetworkConfig {
            channels: vec![2],
            proxies_per_class: 1,
            ..Default::default()
        };
        let mut m = Model::new(&cfg, 1, 2, &mut rng::rng(0)).unwrap();
        let before = m.clone();
        let zeros: Vec<Tensor> = m.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Sgd::new(0.9, 0.5).step(&mut m, &zeros, 0.1);
        assert_eq!(m.head, before.head);
        assert_ne!(m.backbone.blocks[0].kernel, before.backbone.blocks[0].kernel);
    }

    pub(crate) fn tiny(mode: &str, stages: usize) -> (ExperimentConfig, Dataset) {
        let text = format!(
            r#"{{
            "dataset": {{"synthetic": {{"num_classes": 4, "train_per_class": 8, "test_per_class": 3, "image_size": 8, "seed": 1}}}},
            "plan": {{"stages": {stages}, "initial_half": {}}},
            "network": {{"channels": [3, 4], "proxies_per_class": 2}},
            "train": {{"epochs": 2, "batch_size": 8, "seed": 3}},
            "memory": {{"budget": {{"per_class": 3}}}},
            "mode": "{mode}"
        }}"#,
            stages > 1
        );
        let cfg = ExperimentConfig::from_json(&text).unwrap();
        let data = cfg.load_dataset().unwrap();
        (cfg, data)
    }

    #[test]
    fn first_stage_has_no_discrepancy() {
        let (cfg, data) = tiny("afc", 2);
        let r = run_experiment(&cfg, &data, None).unwrap();
        assert!(r.stages[0].log.iter().all(|l| l.loss.disc == 0.0 && l.loss.total == l.loss.cls));
        assert!(r.stages[1].log.iter().any(|l| l.loss.disc > 0.0));
        for s in &r.stages {
            assert_eq!(s.backward_passes, s.optimizer_steps);
            assert_eq!(s.importance_estimates, 1);
            let dev = s.importance.as_ref().unwrap().max_mean_deviation().unwrap();
            assert!(dev < 1e-9);
        }
        assert!(r.stages[0].teacher_digest.is_none());
        assert!(r.stages[1].teacher_digest.is_some());
    }

    #[test]
    fn uniform_mode_stores_ones() {
        let (cfg, data) = tiny("uniform", 2);
        let r = run_experiment(&cfg, &data, None).unwrap();
        for s in &r.stages {
            assert!(s.importance.as_ref().unwrap().weights().iter().flatten().all(|&v| v == 1.0));
            assert_eq!(s.importance_estimates, 0);
        }
    }

    #[test]
    fn zero_lambda_matches_finetune() {
        let (mut cfg, data) = tiny("afc", 2);
        cfg.loss.lambda_disc = 0.0;
        let a = run_experiment(&cfg, &data, None).unwrap();
        let (ft, _) = tiny("finetune", 2);
        let b = run_experiment(&ft, &data, None).unwrap();
        for (x, y) in a.stages.iter().zip(&b.stages) {
            assert_eq!(x.log, y.log);
        }
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn single_stage_summary_equals_stage_accuracy() {
        let (cfg, data) = tiny("afc", 1);
        let r = run_experiment(&cfg, &data, None).unwrap();
        assert_eq!(r.summary.avg_inc_acc_cnn, r.stages[0].acc_cnn);
        assert_eq!(r.summary.avg_inc_acc_nme, r.stages[0].acc_nme);
        assert!(r.summary.bwt_cnn.is_none());
    }

    #[test]
    fn outputs_are_written_and_reproducible() {
        let (cfg, data) = tiny("afc", 2);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        run_experiment(&cfg, &data, Some(d1.path())).unwrap();
        run_experiment(&cfg, &data, Some(d2.path())).unwrap();
        for f in ["summary.json", "metrics.csv", "importance.csv", "exemplars.csv", "stage_000.ckpt", "stage_001.ckpt"] {
            let a = fs::read(d1.path().join(f)).unwrap();
            assert_eq!(a, fs::read(d2.path().join(f)).unwrap(), "{f}");
        }
        let ck = Checkpoint::read(d1.path().join("stage_001.ckpt")).unwrap();
        assert_eq!(ck.config_hash_hex(), cfg.hash());
        assert_eq!(ck.n_t, 4);
    }
}
