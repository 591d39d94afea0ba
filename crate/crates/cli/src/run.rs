use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use keyward::adversary::{attack_experiment, AttackMode};
use keyward::error::{Error, Result};
use keyward::experiments::{
    collab_experiment, key_stats_ladder, loss_compare, shared_class_sim, softmax_oracle_experiment, strictly_decreasing,
};
use keyward::gradcheck::gradient_suite;
use keyward::keys::{write_keys, ClassKey, ParticipantId};
use keyward::protocol::RunLog;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Experiment, ExperimentConfig};

#[derive(Debug, Serialize)]
pub struct Summary {
    pub experiment: String,
    pub seed: u64,
    pub headline_name: String,
    pub headline_value: f64,
    pub runtime_s: f64,
    pub details: Value,
}

fn positive(name: &str, v: usize) -> std::result::Result<(), String> {
    if v == 0 {
        return Err(format!("{name} must be positive"));
    }
    Ok(())
}

/// Checks the selected section before anything runs.
pub fn validate(cfg: &ExperimentConfig) -> std::result::Result<(), String> {
    let exp = cfg.experiment.expect("resolved");
    let err = |section: &str, e: Error| format!("{section}: {e}");
    match exp {
        Experiment::Collab => {
            let c = cfg.collab.as_ref().expect("resolved");
            positive("collab.n_participants", c.n_participants)?;
            c.framework.validate().map_err(|e| err("collab.framework", e))?;
        }
        Experiment::Attack => {
            let c = cfg.attack.as_ref().expect("resolved");
            positive("attack.n_participants", c.n_participants)?;
            positive("attack.n_eval_samples", c.n_eval_samples)?;
            if c.attackers.is_empty() {
                return Err("attack.attackers: at least one attacker is required".into());
            }
            if let Some(&a) = c.attackers.iter().find(|&&a| a as usize >= c.n_participants) {
                return Err(format!("attack.attackers: {a} is not a participant id (0..{})", c.n_participants));
            }
            if let AttackMode::DeltaKey { delta } = c.mode {
                if !(0.0..=2.0).contains(&delta) {
                    return Err(format!("attack.mode.delta: must lie in [0, 2], got {delta}"));
                }
            }
            if !(c.gen_lr > 0.0 && c.gen_lr.is_finite()) {
                return Err("attack.gen_lr must be positive".into());
            }
            c.framework.validate().map_err(|e| err("attack.framework", e))?;
        }
        Experiment::KeyStats => {
            let c = cfg.key_stats.as_ref().expect("resolved");
            if c.n_vectors < 2 {
                return Err("key_stats.n_vectors must be at least 2".into());
            }
            positive("key_stats.n_repeats", c.n_repeats)?;
            if c.d_keys.is_empty() || c.d_keys.iter().any(|&d| d < 2) {
                return Err("key_stats.d_keys must be non-empty with every entry >= 2".into());
            }
        }
        Experiment::SoftmaxOracle => {
            let c = cfg.softmax_oracle.as_ref().expect("resolved");
            positive("softmax_oracle.n_samples", c.n_samples)?;
            if c.d_keys.is_empty() || c.d_keys.iter().any(|&d| d < 2) {
                return Err("softmax_oracle.d_keys must be non-empty with every entry >= 2".into());
            }
        }
        Experiment::SharedClass => {
            let c = cfg.shared_class.as_ref().expect("resolved");
            if c.d_key < 2 {
                return Err("shared_class.d_key must be at least 2".into());
            }
            positive("shared_class.n_trials", c.n_trials)?;
            if !(c.step > 0.0 && c.step.is_finite()) {
                return Err("shared_class.step must be positive".into());
            }
        }
        Experiment::GradCheck => positive("grad_check.n_instances", cfg.grad_check.as_ref().expect("resolved").n_instances)?,
        Experiment::LossCompare => {
            let c = cfg.loss_compare.as_ref().expect("resolved");
            positive("loss_compare.epochs", c.epochs)?;
            c.key_sgd.validate().map_err(|e| err("loss_compare.key_sgd", e))?;
            c.ce_sgd.validate().map_err(|e| err("loss_compare.ce_sgd", e))?;
        }
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Io(e.into()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_log(dir: &Path, log: &RunLog) -> Result<()> {
    let mut w = create(&dir.join("metrics.csv"))?;
    log.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

/// One `.keys` file per owner.
fn write_key_files(dir: &Path, keys: &[ClassKey]) -> Result<()> {
    if keys.is_empty() {
        return Ok(());
    }
    let dir = dir.join("keys");
    fs::create_dir_all(&dir)?;
    let mut by_owner: BTreeMap<ParticipantId, Vec<&ClassKey>> = BTreeMap::new();
    for k in keys {
        by_owner.entry(k.owner()).or_default().push(k);
    }
    for (owner, ks) in by_owner {
        let mut w = create(&dir.join(format!("participant_{}.keys", owner.0)))?;
        write_keys(&mut w, ks)?;
        w.flush()?;
    }
    Ok(())
}

/// Writes a CSV with `header` and one line per row.
fn write_table(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "{header}")?;
    for r in rows {
        writeln!(w, "{r}")?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the resolved experiment and writes `config.resolved.json` (first, so
/// it survives a failed run), the metrics, key and sample files and
/// `summary.json`.
pub fn run(cfg: &ExperimentConfig) -> Result<Summary> {
    let exp = cfg.experiment.expect("resolved");
    let dir = cfg.out_dir.clone().expect("resolved");
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("config.resolved.json"), cfg)?;
    let start = Instant::now();

    let (seed, headline_name, headline_value, details) = match exp {
        Experiment::Collab => {
            let c = cfg.collab.as_ref().expect("resolved");
            let (train, test) = cfg.data.as_ref().expect("resolved").load()?;
            let r = collab_experiment(c, &train, &test)?;
            write_log(&dir, &r.log)?;
            write_key_files(&dir, &r.published_keys)?;
            let details = json!({
                "rounds_to_target": r.rounds_to_target,
                "target_mpa": c.target_mpa,
                "centralized_accuracy": r.centralized_accuracy,
            });
            (c.framework.seed, "final_mpa", r.final_mpa, details)
        }
        Experiment::Attack => {
            let c = cfg.attack.as_ref().expect("resolved");
            let data = cfg.data.as_ref().expect("resolved");
            let (train, test) = data.load()?;
            let r = attack_experiment(c, &train, &test)?;
            write_log(&dir, &r.log)?;
            write_key_files(&dir, &r.published_keys)?;
            r.write_samples(&dir.join("samples"), data.image_shape())?;
            write_table(
                &dir.join("attack_scores.csv"),
                "epoch,attacker,target,score",
                r.epochs.iter().map(|e| format!("{},{},{},{}", e.epoch, e.attacker, e.target, e.score)),
            )?;
            let details = json!({
                "regime": r.regime,
                "per_attacker": r.per_attacker.iter().map(|(a, t, s)| json!({"attacker": a.0, "target": t.0, "score": s})).collect::<Vec<_>>(),
                "key_alignment": r.key_alignment.iter().map(|(a, d)| json!({"attacker": a.0, "dot": d})).collect::<Vec<_>>(),
                "oracle_accuracy": r.oracle_accuracy,
                "final_mpa": r.final_mpa,
                "final_honest_mpa": r.final_honest_mpa,
            });
            (c.framework.seed, "oracle_score", r.oracle_score, details)
        }
        Experiment::KeyStats => {
            let c = cfg.key_stats.as_ref().expect("resolved");
            let reports = key_stats_ladder(c)?;
            write_table(
                &dir.join("metrics.csv"),
                "distribution,d_key,n_vectors,n_repeats,max_of_max_dot",
                reports.iter().map(|r| {
                    let dist = serde_json::to_value(r.distribution).expect("serializable");
                    format!("{},{},{},{},{}", dist.as_str().unwrap_or("?"), r.d_key, r.n_vectors, r.n_repeats, r.max_of_max_dot)
                }),
            )?;
            let top = reports.iter().map(|r| r.d_key).max().unwrap_or(0);
            let largest =
                reports.iter().filter(|r| r.d_key == top).map(|r| r.max_of_max_dot).fold(f64::NEG_INFINITY, f64::max);
            let details = json!({
                "strictly_decreasing": strictly_decreasing(&reports),
                "ladder": reports.iter().map(|r| json!({"distribution": r.distribution, "d_key": r.d_key, "max_of_max_dot": r.max_of_max_dot})).collect::<Vec<_>>(),
            });
            (c.seed, "max_of_max_dot_at_largest_d", largest, details)
        }
        Experiment::SoftmaxOracle => {
            let c = cfg.softmax_oracle.as_ref().expect("resolved");
            let rows = softmax_oracle_experiment(c)?;
            let rel = |e: &keyward::model::McEstimate| (e.estimate - e.analytic).abs() / e.analytic;
            write_table(
                &dir.join("metrics.csv"),
                "d_key,n_samples,estimate,analytic,rel_error",
                rows.iter().map(|(d, e)| format!("{d},{},{},{},{}", e.n_samples, e.estimate, e.analytic, rel(e))),
            )?;
            let mean = rows.iter().map(|(_, e)| e.estimate).sum::<f64>() / rows.len().max(1) as f64;
            let details = json!({
                "analytic": rows.first().map(|(_, e)| e.analytic),
                "max_rel_error": rows.iter().map(|(_, e)| rel(e)).fold(0.0, f64::max),
            });
            (c.seed, "mc_estimate", mean, details)
        }
        Experiment::SharedClass => {
            let c = cfg.shared_class.as_ref().expect("resolved");
            let r = shared_class_sim(c)?;
            write_table(
                &dir.join("metrics.csv"),
                "trial,dot_i,dot_j,keys_dot,fresh_max_abs_dot,iters",
                r.trials.iter().enumerate().map(|(i, t)| {
                    format!("{i},{},{},{},{},{}", t.dot_i, t.dot_j, t.keys_dot, t.fresh_max_abs_dot, t.iters)
                }),
            )?;
            let details = json!({
                "mean_dot_i": r.mean_dot_i,
                "mean_dot_j": r.mean_dot_j,
                "mean_fresh_max_abs_dot": r.mean_fresh_max_abs_dot,
                "fresh_max_abs_dot": r.fresh_max_abs_dot,
            });
            (c.seed, "mean_converged_dot", 0.5 * (r.mean_dot_i + r.mean_dot_j), details)
        }
        Experiment::GradCheck => {
            let c = cfg.grad_check.as_ref().expect("resolved");
            let checks = gradient_suite(c.n_instances, c.seed)?;
            write_table(
                &dir.join("metrics.csv"),
                "name,n_coords,max_rel_error,passed",
                checks.iter().map(|g| format!("{},{},{},{}", g.name, g.n_coords, g.max_rel_error, g.passed())),
            )?;
            let worst = checks.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
            let details = json!({
                "n_checks": checks.len(),
                "n_failed": checks.iter().filter(|g| !g.passed()).count(),
            });
            (c.seed, "max_rel_error", worst, details)
        }
        Experiment::LossCompare => {
            let c = cfg.loss_compare.as_ref().expect("resolved");
            let (train, test) = cfg.data.as_ref().expect("resolved").load()?;
            let r = loss_compare(c, &train, &test)?;
            write_table(
                &dir.join("metrics.csv"),
                "epoch,key_accuracy,ce_accuracy",
                r.curve.iter().enumerate().map(|(i, (k, ce))| format!("{},{k},{ce}", i + 1)),
            )?;
            let details = json!({"key_accuracy": r.key_accuracy, "ce_accuracy": r.ce_accuracy});
            (c.seed, "accuracy_gap", r.gap(), details)
        }
    };

    let summary = Summary {
        experiment: exp.name().to_string(),
        seed,
        headline_name: headline_name.to_string(),
        headline_value,
        runtime_s: start.elapsed().as_secs_f64(),
        details,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}
