use keyward::data::BlobsConfig;
use keyward::experiments::*;
use keyward::keys::KeyDistribution;

#[test]
fn orthogonal_keys_converge_to_the_bisector() {
    let mut phi = vec![0.6, -0.8, 0.0];
    converge_shared(&mut phi, &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], 0.1, 1e-12, 100_000);
    let half = std::f64::consts::FRAC_1_SQRT_2;
    assert!((phi[0] - half).abs() < 1e-9 && (phi[1] - half).abs() < 1e-9, "{phi:?}");
}

#[test]
fn identical_keys_converge_onto_the_key() {
    let mut phi = vec![0.0, 0.0, 1.0];
    let psi = [0.0, 1.0, 0.0];
    converge_shared(&mut phi, &psi, &psi, 0.1, 1e-12, 100_000);
    assert!((phi[1] - 1.0).abs() < 1e-9, "{phi:?}");
}

#[test]
fn shared_class_sim_at_high_dimension() {
    let r = shared_class_sim(&SharedClassConfig { d_key: 16384, n_trials: 4, ..SharedClassConfig::default() }).unwrap();
    for t in &r.trials {
        let expected = ((1.0 + t.keys_dot) / 2.0).sqrt();
        assert!((t.dot_i - expected).abs() < 1e-6 && (t.dot_j - expected).abs() < 1e-6);
    }
    assert!(r.fresh_max_abs_dot < 0.1, "{}", r.fresh_max_abs_dot);
}

#[test]
fn shared_class_sim_validates() {
    assert!(shared_class_sim(&SharedClassConfig { d_key: 1, ..SharedClassConfig::default() }).is_err());
    assert!(shared_class_sim(&SharedClassConfig { n_trials: 0, ..SharedClassConfig::default() }).is_err());
}

#[test]
fn small_key_ladder_decreases() {
    let cfg = KeyStatsConfig {
        d_keys: vec![2, 16, 128, 1024],
        n_vectors: 50,
        n_repeats: 10,
        distributions: vec![KeyDistribution::Gaussian],
        seed: 3,
    };
    let r = key_stats_ladder(&cfg).unwrap();
    assert_eq!(r.len(), 4);
    assert!(strictly_decreasing(&r));
    assert!(r[0].max_of_max_dot > 0.99);
}

#[test]
fn softmax_oracle_handles_zero_phi() {
    let r = softmax_oracle_experiment(&SoftmaxOracleConfig { d_keys: vec![8], n_samples: 100, phi_norm: 0.0, seed: 0 })
        .unwrap();
    assert_eq!(r[0].1.estimate, 1.0);
    assert_eq!(r[0].1.analytic, 1.0);
}

#[test]
fn collab_runs_and_compares_with_centralized() {
    let (train, test) =
        DataSource::Blobs(BlobsConfig { n_classes: 4, per_class: 30, data_dim: 8, ..BlobsConfig::default() })
            .load()
            .unwrap();
    let mut cfg = CollabConfig { n_participants: 2, ..CollabConfig::default() };
    cfg.framework.n_epochs = 15;
    cfg.model.hidden = vec![16];
    cfg.model.d_key = 32;
    let r = collab_experiment(&cfg, &train, &test).unwrap();
    assert_eq!(r.log.epochs.len(), 15);
    assert!(r.final_mpa > 0.9, "{}", r.final_mpa);
    assert!(r.rounds_to_target.is_some());
    assert!(r.centralized_accuracy.unwrap() > 0.9);
    assert_eq!(r.published_keys.len(), 4);
}

#[test]
fn loss_compare_on_blobs() {
    let (train, test) = synth_small();
    let cfg = LossCompareConfig { hidden: vec![16], d_emb: 16, epochs: 10, ..LossCompareConfig::default() };
    let r = loss_compare(&cfg, &train, &test).unwrap();
    assert_eq!(r.curve.len(), 10);
    assert!(r.key_accuracy > 0.9 && r.ce_accuracy > 0.9, "{r:?}");
}

fn synth_small() -> (keyward::data::Dataset, keyward::data::Dataset) {
    keyward::data::synth_blobs(&BlobsConfig { n_classes: 5, per_class: 40, data_dim: 16, ..BlobsConfig::default() }).unwrap()
}

#[test]
fn crossover_interpolates() {
    let pt = |delta, score| DeltaSweepPoint { delta, score, per_seed: vec![score] };
    let pts = [pt(0.1, 0.9), pt(0.5, 0.7), pt(1.0, 0.3), pt(1.3, 0.0)];
    assert!((crossover(&pts, 0.5).unwrap() - 0.75).abs() < 1e-12);
    assert_eq!(crossover(&pts[..2], 0.5), None);
    assert_eq!(crossover(&[pt(0.1, 0.2)], 0.5), Some(0.1));
}

#[test]
fn data_source_config_round_trips() {
    let src = DataSource::mnist("data/mnist");
    let text = serde_json::to_string(&src).unwrap();
    assert!(text.contains("\"kind\":\"mnist\""));
    let back: DataSource = serde_json::from_str(&text).unwrap();
    assert_eq!(back, src);
    let blobs: DataSource = serde_json::from_str(r#"{"kind": "blobs", "spread": 0.3}"#).unwrap();
    assert_eq!(blobs, DataSource::Blobs(BlobsConfig { spread: 0.3, ..BlobsConfig::default() }));
    assert!(serde_json::from_str::<DataSource>(r#"{"kind": "blobs", "sprd": 0.3}"#).is_err());
}
