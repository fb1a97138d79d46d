//! One-parameter sweeps over an experiment config.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use nmtlab_core::objectives::{ObjectiveKind, TauPolicy};

use crate::config::ExperimentConfig;
use crate::manifest::{now, to_json, write_atomic, RunManifest, BUILD_ID, MANIFEST_FILE};
use crate::pipeline::{eval_report_path, run_experiment, ObjectiveReport};

pub const SWEEP_KEYS: [&str; 9] = [
    "alpha",
    "beta",
    "tau",
    "tau_hi",
    "tau_lo",
    "trunc_fraction",
    "rate",
    "epochs",
    "seed",
];

pub const SWEEP_CSV: &str = "sweep.csv";

/// Returns `cfg` with `key` set to `value`.
pub fn apply_override(cfg: &ExperimentConfig, key: &str, value: f64) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    let whole = |v: f64| -> Result<u64> {
        ensure!(v >= 0.0 && v.fract() == 0.0, "{key} needs a non-negative integer, got {v}");
        Ok(v as u64)
    };
    let mut touched = 0;
    match key {
        "alpha" | "beta" => {
            for o in &mut c.objectives {
                if key == "alpha" {
                    o.schedule.alpha = value;
                } else {
                    o.schedule.beta = value;
                }
            }
            touched = c.objectives.len();
        }
        "tau" | "tau_hi" | "tau_lo" => {
            for o in c.objectives.iter_mut().filter(|o| o.kind == ObjectiveKind::SelfCorrect) {
                match (&mut o.schedule.tau, key) {
                    (TauPolicy::Fixed { tau }, "tau") => *tau = value,
                    (TauPolicy::Dynamic { hi, .. }, "tau_hi") => *hi = value,
                    (TauPolicy::Dynamic { lo, .. }, "tau_lo") => *lo = value,
                    _ => continue,
                }
                touched += 1;
            }
        }
        "trunc_fraction" => {
            for o in c
                .objectives
                .iter_mut()
                .filter(|o| matches!(o.kind, ObjectiveKind::LossTrunc | ObjectiveKind::El2nTrunc))
            {
                o.trunc_fraction = value;
                touched += 1;
            }
        }
        "rate" => {
            c.noise.rate = value;
            touched = 1;
        }
        "epochs" => {
            c.train.epochs = whole(value)? as usize;
            touched = 1;
        }
        "seed" => {
            c.seed = whole(value)?;
            touched = 1;
        }
        _ => bail!("unknown sweep key {key:?}; valid keys: {}", SWEEP_KEYS.join(", ")),
    }
    ensure!(touched > 0, "no configured objective uses {key}");
    c.validate().with_context(|| format!("{key} = {value}"))?;
    Ok(c)
}

/// One row of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub objective: String,
    pub test_bleu: f64,
    pub test_token_accuracy: f64,
    pub clean_subset_bleu: Option<f64>,
    pub noisy_subset_bleu: Option<f64>,
    pub p_value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub build_id: String,
    pub key: String,
    pub values: Vec<f64>,
    /// Run directories, relative to the sweep directory.
    pub runs: Vec<String>,
    pub artifacts: Vec<String>,
    pub created: u64,
    pub finished: u64,
}

pub fn run_dir_name(key: &str, value: f64) -> String {
    format!("{key}={value}")
}

/// Mean BLEU over the noisy subsets of a report, weighted by sentence count.
fn noisy_bleu(r: &ObjectiveReport) -> Option<f64> {
    let noisy: Vec<_> = r.train_subsets.subsets.iter().filter(|(k, _)| *k != "clean").collect();
    let n: usize = noisy.iter().map(|(_, m)| m.sentences).sum();
    (n > 0).then(|| noisy.iter().map(|(_, m)| m.bleu * m.sentences as f64).sum::<f64>() / n as f64)
}

/// Runs one experiment per value. Every run keeps the config's root seed,
/// so runs differ only in the swept parameter, except when sweeping `seed`.
pub fn sweep(
    cfg: &ExperimentConfig,
    key: &str,
    values: &[f64],
    out: &Path,
    force: bool,
) -> Result<(SweepManifest, Vec<RunManifest>)> {
    ensure!(!values.is_empty(), "sweep needs at least one value");
    let configs = values
        .iter()
        .map(|&v| apply_override(cfg, key, v))
        .collect::<Result<Vec<_>>>()?;
    let top = out.join(MANIFEST_FILE);
    ensure!(
        force || !top.exists(),
        "{} already holds a sweep; pass --force to overwrite",
        out.display()
    );
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let created = now();

    let mut runs = Vec::new();
    let mut manifests = Vec::new();
    let mut rows = Vec::new();
    for (&value, c) in values.iter().zip(&configs) {
        let name = run_dir_name(key, value);
        let dir = out.join(&name);
        let m = run_experiment(c, &dir, force).with_context(|| format!("sweep run {name}"))?;
        for o in &c.objectives {
            let path = dir.join(eval_report_path(&o.label()));
            if !path.exists() {
                continue;
            }
            let r = ObjectiveReport::load(&path)?;
            rows.push(SweepRow {
                value,
                objective: r.objective.clone(),
                test_bleu: r.test.bleu,
                test_token_accuracy: r.test.token_accuracy,
                clean_subset_bleu: r.train_subsets.subsets.get("clean").map(|m| m.bleu),
                noisy_subset_bleu: noisy_bleu(&r),
                p_value: r.significance.as_ref().map(|s| s.p_value),
            });
        }
        runs.push(name);
        manifests.push(m);
    }

    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    let mut csv = format!(
        "{key},objective,test_bleu,test_token_accuracy,clean_subset_bleu,noisy_subset_bleu,p_value\n"
    );
    for r in &rows {
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.value,
            r.objective,
            r.test_bleu,
            r.test_token_accuracy,
            opt(r.clean_subset_bleu),
            opt(r.noisy_subset_bleu),
            opt(r.p_value)
        )
        .expect("writing to a String");
    }
    write_atomic(&out.join(SWEEP_CSV), csv.as_bytes())?;
    let sm = SweepManifest {
        build_id: BUILD_ID.to_owned(),
        key: key.to_owned(),
        values: values.to_vec(),
        runs,
        artifacts: vec![SWEEP_CSV.to_owned()],
        created,
        finished: now(),
    };
    write_atomic(&top, &to_json(&sm)?)?;
    Ok((sm, manifests))
}
