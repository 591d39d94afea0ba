//! End-to-end acceptance checks. All criteria run sequentially inside one
//! test so their wall-clock bounds are not distorted by parallel tests; each
//! prints one PASS/FAIL line to stderr.

use std::io::Write;
use std::time::{Duration, Instant};

use keyward::adversary::{attack_experiment_with, AttackConfig, AttackMode};
use keyward::data::{synth_blobs, train_oracle, BlobsConfig, Dataset, OracleClassifier, OracleConfig};
use keyward::experiments::*;
use keyward::gradcheck::gradient_suite;
use keyward::keys::{generate_key, ClassLabel, KeyRing, ParticipantId};
use keyward::model::{EmbeddingConfig, KeyProtectedClassifier};
use keyward::protocol::{
    download, run_training, run_turn, train_centralized, FrameworkConfig, LocalModel, ParamServerState, Participant,
};
use keyward::rng::seeded;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

struct Blobs {
    train: Dataset,
    test: Dataset,
    oracle: OracleClassifier,
}

fn blobs() -> Blobs {
    let (train, test) = synth_blobs(&BlobsConfig::default()).unwrap();
    let oracle = train_oracle(&train, &test, &OracleConfig::default()).unwrap();
    Blobs { train, test, oracle }
}

fn c1_softmax_oracle() -> Outcome {
    let rows = softmax_oracle_experiment(&SoftmaxOracleConfig::default()).unwrap();
    let target = 0.5f64.exp();
    let errs: Vec<String> = rows.iter().map(|(d, e)| format!("d={d}: {:.5}", e.estimate)).collect();
    let pass = rows.iter().all(|(_, e)| (e.estimate - target).abs() / target < 0.02);
    outcome(pass, format!("{} (target {target:.5} +-2%)", errs.join(", ")))
}

fn c2_key_correlation() -> Outcome {
    let reports = key_stats_ladder(&KeyStatsConfig::default()).unwrap();
    let at = |d: usize| reports.iter().filter(|r| r.d_key == d).map(|r| r.max_of_max_dot).collect::<Vec<_>>();
    let low = at(2);
    let high = at(16384);
    let pass = strictly_decreasing(&reports) && low.iter().all(|&v| v > 0.999) && high.iter().all(|&v| v < 0.1);
    outcome(
        pass,
        format!("strictly decreasing: {}, d=2: {low:.4?}, d=16384: {high:.4?}", strictly_decreasing(&reports)),
    )
}

fn c3_shared_class() -> Outcome {
    let r = shared_class_sim(&SharedClassConfig::default()).unwrap();
    let ok = |v: f64| (0.68..=0.72).contains(&v);
    let pass = ok(r.mean_dot_i) && ok(r.mean_dot_j) && r.mean_fresh_max_abs_dot < 0.15;
    outcome(
        pass,
        format!(
            "mean dots {:.4} / {:.4}, fresh-key max |dot| {:.4} (mean over trials; largest single draw {:.4})",
            r.mean_dot_i, r.mean_dot_j, r.mean_fresh_max_abs_dot, r.fresh_max_abs_dot
        ),
    )
}

fn c4_gradients() -> Outcome {
    let checks = gradient_suite(50, 2024).unwrap();
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let failed = checks.iter().filter(|c| !c.passed()).count();
    outcome(failed == 0, format!("{} checks, {failed} failed, worst rel error {worst:.2e}", checks.len()))
}

fn c5_collab(b: &Blobs) -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    for n in [2, 3, 5] {
        let start = Instant::now();
        let cfg = CollabConfig { n_participants: n, ..CollabConfig::default() };
        let r = collab_experiment(&cfg, &b.train, &b.test).unwrap();
        let central = r.centralized_accuracy.unwrap();
        let took = start.elapsed();
        let ok = r.rounds_to_target.is_some_and(|k| k <= 50)
            && (r.final_mpa - central).abs() <= 0.03
            && took < Duration::from_secs(300);
        pass &= ok;
        lines.push(format!(
            "n={n}: MPA {:.3} (>=0.90 at round {:?}), centralized {central:.3}, {:.1}s",
            r.final_mpa,
            r.rounds_to_target,
            took.as_secs_f64()
        ));
    }
    outcome(pass, lines.join("; "))
}

fn c6_fixed_layer_law() -> Outcome {
    let count = |d_key| {
        let cfg = EmbeddingConfig::with_fixed_layer(32, 64, d_key);
        KeyProtectedClassifier::new(&cfg, 0).unwrap().net().trainable_count()
    };
    let (small, large) = (count(128), count(16384));
    let expected = 2 * (16384 - 128);
    outcome(large - small == expected, format!("trainable {small} -> {large}, difference {} (expected {expected})", large - small))
}

fn c7_exact_key(b: &Blobs) -> Outcome {
    let mut keyed = AttackConfig { mode: AttackMode::ExactKey, ..AttackConfig::default() };
    keyed.framework.n_epochs = 100;
    let mut vanilla = AttackConfig { mode: AttackMode::Vanilla, ..keyed.clone() };
    vanilla.framework.sgd.lr = 0.01;
    let k = attack_experiment_with(&keyed, &b.train, &b.test, &b.oracle).unwrap();
    let v = attack_experiment_with(&vanilla, &b.train, &b.test, &b.oracle).unwrap();
    outcome(
        k.oracle_score >= 0.8 && v.oracle_score >= 0.8,
        format!("keyed (d_key=128) {:.3}, vanilla {:.3} (>= 0.8)", k.oracle_score, v.oracle_score),
    )
}

fn c8_random_key(b: &Blobs) -> Outcome {
    let mut scores = Vec::new();
    let mut mpas = Vec::new();
    for seed in 0..5 {
        let mut cfg = AttackConfig { mode: AttackMode::RandomKey, ..AttackConfig::default() };
        cfg.model.d_key = 16384;
        cfg.model.fixed_layer = true;
        cfg.framework.n_epochs = 30;
        cfg.framework.seed = seed;
        let r = attack_experiment_with(&cfg, &b.train, &b.test, &b.oracle).unwrap();
        scores.push(r.oracle_score);
        mpas.push(r.final_honest_mpa);
    }
    outcome(
        scores.iter().all(|&s| s < 0.05) && mpas.iter().all(|&m| m >= 0.9),
        format!("scores {scores:.3?} (< 0.05), honest MPA {mpas:.3?} (>= 0.90)"),
    )
}

/// Key dimension of the δ sweep (with the fixed layer).
const SWEEP_D_KEY: usize = 4096;

fn c9_delta_sweep(b: &Blobs) -> Outcome {
    let mut cfg = AttackConfig::default();
    cfg.model.d_key = SWEEP_D_KEY;
    cfg.model.fixed_layer = true;
    cfg.framework.n_epochs = 100;
    let pts = delta_sweep(&cfg, &[0.1, 0.5, 1.0, 1.3], &[0, 1, 2, 3, 4], &b.train, &b.test, &b.oracle).unwrap();
    let monotone = pts.windows(2).all(|w| w[1].score <= w[0].score);
    let first = pts[0].score;
    let last = pts[pts.len() - 1].score;
    let curve: Vec<String> = pts.iter().map(|p| format!("{}: {:.3}", p.delta, p.score)).collect();
    let star = crossover(&pts, 0.5).map_or("none".to_string(), |d| format!("{d:.2}"));
    outcome(
        monotone && first >= 0.5 && last < 0.1,
        format!("d_key={SWEEP_D_KEY}, mean of 5 seeds [{}], non-increasing: {monotone}, crossover(0.5) at delta = {star}", curve.join(", ")),
    )
}

fn c10_loss_compare() -> Outcome {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist");
    let (train, test) = DataSource::mnist(dir).load().unwrap();
    let r = loss_compare(&LossCompareConfig::default(), &train, &test).unwrap();
    outcome(
        r.gap() <= 0.03,
        format!("key regression {:.3}, cross-entropy {:.3}, gap {:.3} (<= 0.03)", r.key_accuracy, r.ce_accuracy, r.gap()),
    )
}

fn c11_protocol() -> Outcome {
    let (train, test) = synth_blobs(&BlobsConfig::default()).unwrap();
    let emb = EmbeddingConfig { hidden: vec![64], ..EmbeddingConfig::new(train.dim(), 64) };
    let clf = KeyProtectedClassifier::new(&emb, 1).unwrap();
    let owner = ParticipantId(0);
    let mut rng = seeded(2);
    let keys = KeyRing::new(owner, (0..10).map(|c| generate_key(64, ClassLabel(c), owner, &mut rng).unwrap())).unwrap();
    let cfg = FrameworkConfig { n_epochs: 5, seed: 3, ..FrameworkConfig::default() };

    let p = Participant::honest(owner, train.clone(), LocalModel::Keyed { clf: clf.clone(), keys: keys.clone() });
    let (_, fw) = run_training(vec![p], test, &cfg).unwrap();
    let mut central = LocalModel::Keyed { clf: clf.clone(), keys: keys.clone() };
    train_centralized(&mut central, &train, &cfg).unwrap();
    let identical = fw.server().params().as_slice() == central.params().as_slice();

    let other = KeyProtectedClassifier::new(&emb, 9).unwrap();
    let mut ps = ParamServerState::new(other.net().params().clone());
    let mut p = Participant::honest(owner, train, LocalModel::Keyed { clf, keys });
    let before = p.model().params().clone();
    download(&ps, &mut p, 0.0, &mut seeded(0)).unwrap();
    let download_noop = p.model().params() == &before;
    let server_before = ps.params().clone();
    let zero = FrameworkConfig { theta_d: 0.0, theta_u: 0.0, ..cfg };
    run_turn(&mut ps, &mut p, &zero, 1, &mut seeded(0)).unwrap();
    let upload_noop = ps.params() == &server_before && ps.version() == 1;
    outcome(
        identical && download_noop && upload_noop,
        format!("bit-identical to centralized: {identical}, theta_d=0 no-op: {download_noop}, theta_u=0 no-op: {upload_noop}"),
    )
}

#[test]
fn acceptance() {
    let mut failed = Vec::new();
    let mut report = |id: usize, name: &str, limit: Option<u64>, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = f();
        let took = start.elapsed();
        let in_time = limit.is_none_or(|s| took < Duration::from_secs(s));
        let pass = o.pass && in_time;
        let bound = limit.map_or(String::new(), |s| format!(" (limit {s}s)"));
        let line = format!(
            "[{}] criterion {id:>2} {name}: {} [{:.1}s{bound}]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64()
        );
        writeln!(std::io::stderr(), "{line}").unwrap();
        if !pass {
            failed.push(id);
        }
    };

    report(1, "generalized-softmax Monte Carlo", Some(10), &mut c1_softmax_oracle);
    report(2, "key-correlation curve", Some(120), &mut c2_key_correlation);
    report(3, "shared-class geometry", Some(60), &mut c3_shared_class);
    report(4, "gradient suite", Some(30), &mut c4_gradients);
    let b = blobs();
    report(5, "collaborative learning", Some(900), &mut || c5_collab(&b));
    report(6, "fixed-layer parameter law", None, &mut c6_fixed_layer_law);
    report(7, "exact-key attack", Some(300), &mut || c7_exact_key(&b));
    report(8, "random-key attack", Some(600), &mut || c8_random_key(&b));
    report(9, "delta-key sweep", None, &mut || c9_delta_sweep(&b));
    report(10, "regression vs cross-entropy", Some(600), &mut c10_loss_compare);
    report(11, "protocol equivalences", Some(30), &mut c11_protocol);

    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
