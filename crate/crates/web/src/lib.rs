//! wasm-bindgen exports for the static demo page in `www/`.
//!
//! Every export takes and returns plain strings or numbers so the page
//! needs no bundler; errors surface as JavaScript exceptions.

use afc::boundslab::{self, PairKind};
use afc::config::{BaselineMode, ExperimentConfig};
use afc::error::Error;
use afc::losses;
use afc::trainer::run_experiment;
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Small enough to train in a browser tab in a few seconds.
pub const DEMO_CONFIG: &str = r#"{
    "dataset": {"synthetic": {"num_classes": 8, "train_per_class": 20, "test_per_class": 10, "image_size": 8, "noise": 0.7}},
    "plan": {"stages": 3},
    "network": {"channels": [6, 12], "proxies_per_class": 2, "eta_init": 10.0},
    "train": {"epochs": 8, "batch_size": 16, "lr": 0.05},
    "memory": {"budget": {"per_class": 2}},
    "loss": {"include_true_class": true}
}"#;

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn demo_config() -> String {
    DEMO_CONFIG.to_string()
}

/// Runs a full incremental experiment and returns the per-stage accuracies.
pub fn experiment(config_json: &str, mode: &str, seed: u64) -> Result<String, Error> {
    let mut cfg = ExperimentConfig::from_json(config_json)?;
    cfg.mode = mode.parse::<BaselineMode>()?;
    cfg.train.seed = seed;
    let data = cfg.load_dataset()?;
    let s = run_experiment(&cfg, &data, None)?.summary;
    Ok(json!({
        "mode": s.mode.to_string(),
        "config_hash": s.config_hash,
        "avg_inc_acc_nme": s.avg_inc_acc_nme,
        "avg_inc_acc_cnn": s.avg_inc_acc_cnn,
        "seen_acc_nme": s.seen_acc_nme,
        "seen_acc_cnn": s.seen_acc_cnn,
        "bwt_nme": s.bwt_nme,
    })
    .to_string())
}

#[wasm_bindgen]
pub fn run(config_json: &str, mode: &str, seed: u64) -> Result<String, JsError> {
    experiment(config_json, mode, seed).map_err(js)
}

/// Weight of the discrepancy term after `n_prev` of `n_t` classes.
#[wasm_bindgen]
pub fn lambda_t(n_t: usize, n_prev: usize) -> Result<f64, JsError> {
    losses::lambda_t(n_t, n_prev).map_err(js)
}

pub fn chain(kind: &str, trials: usize, seed: u64) -> Result<String, Error> {
    let kind = match kind {
        "random" => PairKind::Random,
        "aligned" => PairKind::Aligned,
        "orthogonal" => PairKind::Orthogonal,
        "constant" => PairKind::ConstantNorms,
        k => return Err(Error::Config(format!("unknown pair kind {k:?}"))),
    };
    let r = boundslab::check_cs_chain(&boundslab::cs_trials(kind, trials, 16, 8, seed))?;
    Ok(json!({
        "trials": r.trials,
        "violations": r.violations,
        "min_slack": r.min_slack,
        "max_slack": r.max_slack,
        "passed": r.passed,
        "links": r.links.iter().take(50).collect::<Vec<_>>(),
    })
    .to_string())
}

/// Checks the Cauchy–Schwarz chain on `trials` random distributions.
#[wasm_bindgen]
pub fn bound_chain(kind: &str, trials: usize, seed: u64) -> Result<String, JsError> {
    chain(kind, trials, seed).map_err(js)
}
