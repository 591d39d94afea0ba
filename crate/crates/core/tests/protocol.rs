use keyward::adversary::{attack_experiment, AdversaryState, AttackConfig, AttackMode, GeneratorNet, FAKE_CLASS_BASE};
use keyward::data::{partition, synth_blobs, BlobsConfig, Dataset, OracleConfig, PartitionPlan};
use keyward::error::Error;
use keyward::keys::{generate_key, ClassKey, ClassLabel, KeyRing, ParticipantId};
use keyward::model::{key_regression_loss, predict_batch, EmbeddingConfig, KeyProtectedClassifier};
use keyward::protocol::{
    download, run_training, run_turn, train_centralized, Framework, FrameworkConfig, LocalModel, ParamServerState,
    Participant,
};
use keyward::rng::seeded;

fn blobs(n_classes: usize, per_class: usize) -> (Dataset, Dataset) {
    synth_blobs(&BlobsConfig { n_classes, per_class, data_dim: 8, ..BlobsConfig::default() }).unwrap()
}

fn emb(fixed: bool) -> EmbeddingConfig {
    if fixed {
        EmbeddingConfig { hidden: vec![16], ..EmbeddingConfig::with_fixed_layer(8, 8, 256) }
    } else {
        EmbeddingConfig { hidden: vec![16], ..EmbeddingConfig::new(8, 16) }
    }
}

fn keys_for(owner: u32, classes: &[u32], d: usize, seed: u64) -> KeyRing {
    let mut rng = seeded(seed);
    let owner = ParticipantId(owner);
    KeyRing::new(owner, classes.iter().map(|&c| generate_key(d, ClassLabel(c), owner, &mut rng).unwrap())).unwrap()
}

fn honest(id: u32, data: Dataset, clf: &KeyProtectedClassifier, classes: &[u32]) -> Participant {
    let keys = keys_for(id, classes, clf.d_key(), 100 + id as u64);
    Participant::honest(ParticipantId(id), data, LocalModel::Keyed { clf: clf.clone(), keys })
}

fn cfg(n_epochs: usize) -> FrameworkConfig {
    FrameworkConfig { n_epochs, seed: 5, ..FrameworkConfig::default() }
}

#[test]
fn single_participant_matches_centralized_bit_for_bit() {
    let (train, test) = blobs(3, 20);
    let clf = KeyProtectedClassifier::new(&emb(false), 1).unwrap();
    let p = honest(0, train.clone(), &clf, &[0, 1, 2]);
    let LocalModel::Keyed { keys, .. } = p.model().clone() else { unreachable!() };
    let (_, fw) = run_training(vec![p], test, &cfg(4)).unwrap();

    let mut central = LocalModel::Keyed { clf, keys };
    train_centralized(&mut central, &train, &cfg(4)).unwrap();
    assert_eq!(fw.server().params().as_slice(), central.params().as_slice());
    assert_eq!(fw.participants()[0].model().params().as_slice(), central.params().as_slice());
}

#[test]
fn zero_fractions_are_no_ops() {
    let (train, _) = blobs(2, 10);
    let clf = KeyProtectedClassifier::new(&emb(false), 2).unwrap();
    let other = KeyProtectedClassifier::new(&emb(false), 3).unwrap();
    let mut ps = ParamServerState::new(other.net().params().clone());
    let mut p = honest(0, train, &clf, &[0, 1]);
    let before = p.model().params().clone();
    download(&ps, &mut p, 0.0, &mut seeded(0)).unwrap();
    assert_eq!(p.model().params(), &before);

    let server_before = ps.params().clone();
    let c = FrameworkConfig { theta_d: 0.0, theta_u: 0.0, ..cfg(1) };
    run_turn(&mut ps, &mut p, &c, 1, &mut seeded(0)).unwrap();
    assert_eq!(ps.params(), &server_before);
    assert_eq!(ps.version(), 1);
    assert_ne!(p.model().params(), &before, "local training still happens");
}

#[test]
fn round_robin_versions_and_additivity() {
    let (train, test) = blobs(4, 10);
    let plan = PartitionPlan::contiguous(&train.classes().into_iter().collect::<Vec<_>>(), 2);
    let parts = partition(&train, &plan, &mut seeded(0)).unwrap();
    let clf = KeyProtectedClassifier::new(&emb(false), 4).unwrap();
    let ps: Vec<Participant> = parts
        .iter()
        .map(|(p, d)| {
            let cs: Vec<u32> = plan.assignments[p].iter().map(|c| c.0).collect();
            honest(p.0, d.clone(), &clf, &cs)
        })
        .collect();
    let (log, fw) = run_training(ps, test, &cfg(3)).unwrap();
    assert_eq!(fw.server().version(), 6);
    assert_eq!(log.turns.len(), 6);
    assert!(fw.server().params().is_finite());
}

#[test]
fn identical_configs_give_identical_logs() {
    let run = || {
        let (train, test) = blobs(4, 15);
        let clf = KeyProtectedClassifier::new(&emb(true), 9).unwrap();
        let a = train.filter_classes(&[ClassLabel(0), ClassLabel(1)].into());
        let b = train.filter_classes(&[ClassLabel(2), ClassLabel(3)].into());
        let ps = vec![honest(0, a, &clf, &[0, 1]), honest(1, b, &clf, &[2, 3])];
        let c = FrameworkConfig { theta_d: 0.7, theta_u: 0.4, ..cfg(3) };
        let (log, fw) = run_training(ps, test, &c).unwrap();
        (log, fw.server().params().clone())
    };
    let (l1, p1) = run();
    let (l2, p2) = run();
    assert_eq!(l1, l2);
    assert_eq!(p1, p2);
}

#[test]
fn frozen_layer_is_shared_and_never_trained() {
    let (train, test) = blobs(2, 10);
    let clf = KeyProtectedClassifier::new(&emb(true), 4).unwrap();
    let digest = clf.net().frozen_digest();
    let a = train.filter_classes(&[ClassLabel(0)].into());
    let b = train.filter_classes(&[ClassLabel(1)].into());
    let (_, fw) = run_training(vec![honest(0, a, &clf, &[0]), honest(1, b, &clf, &[1])], test, &cfg(2)).unwrap();
    for p in fw.participants() {
        assert_eq!(p.model().net().frozen_digest(), digest);
    }
}

#[test]
fn mismatched_frozen_layer_is_rejected() {
    let (train, test) = blobs(2, 10);
    let a = train.filter_classes(&[ClassLabel(0)].into());
    let b = train.filter_classes(&[ClassLabel(1)].into());
    let c1 = KeyProtectedClassifier::new(&emb(true), 4).unwrap();
    let c2 = KeyProtectedClassifier::new(&emb(true), 5).unwrap();
    let err = Framework::new(cfg(1), vec![honest(0, a, &c1, &[0]), honest(1, b, &c2, &[1])], test).err().expect("setup must fail");
    assert!(matches!(err, Error::Setup(_)), "{err}");
}

#[test]
fn a_participant_cannot_train_on_foreign_keys() {
    let (train, _) = blobs(2, 10);
    let clf = KeyProtectedClassifier::new(&emb(false), 4).unwrap();
    let mine = keys_for(0, &[0], 16, 1);
    let err = key_regression_loss(&clf, train.samples(), train.labels(), &mine, 0.0).unwrap_err();
    assert!(matches!(err, Error::Access(_)), "{err}");

    let theirs = keys_for(1, &[0, 1], 16, 2);
    let p = Participant::honest(ParticipantId(0), train, LocalModel::Keyed { clf, keys: theirs });
    let (_, test) = blobs(2, 10);
    let err = Framework::new(cfg(1), vec![p], test).err().expect("setup must fail");
    assert!(matches!(err, Error::Access(_)), "{err}");
}

#[test]
fn shared_class_trains_and_resolves_through_either_key() {
    let (train, test) = blobs(3, 40);
    let classes: Vec<ClassLabel> = (0..3).map(ClassLabel).collect();
    let plan = PartitionPlan::new([
        (ParticipantId(0), vec![ClassLabel(0), ClassLabel(1)]),
        (ParticipantId(1), vec![ClassLabel(1), ClassLabel(2)]),
    ])
    .shared();
    let parts = partition(&train, &plan, &mut seeded(0)).unwrap();
    let n1: Vec<usize> = parts.values().map(|d| d.indices_of(ClassLabel(1)).len()).collect();
    assert!(n1[0].abs_diff(n1[1]) <= 1);

    let clf = KeyProtectedClassifier::new(&emb(false), 6).unwrap();
    let ps = vec![honest(0, parts[&ParticipantId(0)].clone(), &clf, &[0, 1]), honest(1, parts[&ParticipantId(1)].clone(), &clf, &[1, 2])];
    let (log, fw) = run_training(ps, test.clone(), &cfg(25)).unwrap();
    assert!(log.final_mpa().unwrap() > 0.9, "{:?}", log.final_mpa());

    let keys: Vec<ClassKey> = fw.published_keys();
    assert_eq!(keys.iter().filter(|k| k.class_label() == ClassLabel(1)).count(), 2);
    let LocalModel::Keyed { clf, .. } = fw.participants()[0].model() else { unreachable!() };
    let pred = predict_batch(clf, test.samples(), &keys).unwrap();
    let acc = pred.iter().zip(test.labels()).filter(|(a, b)| a == b).count() as f64 / test.len() as f64;
    assert!(acc > 0.9, "{acc}");
    assert!(pred.iter().all(|c| classes.contains(c)));
}

#[test]
fn five_participants_all_attacking() {
    let (train, test) = synth_blobs(&BlobsConfig { per_class: 40, ..BlobsConfig::default() }).unwrap();
    let mut cfg = AttackConfig {
        mode: AttackMode::RandomKey,
        n_participants: 5,
        attackers: vec![0, 1, 2, 3, 4],
        gen_steps_per_turn: 5,
        oracle: OracleConfig { epochs: 10, ..OracleConfig::default() },
        ..AttackConfig::default()
    };
    cfg.framework.n_epochs = 3;
    let r = attack_experiment(&cfg, &train, &test).unwrap();
    assert_eq!(r.per_attacker.len(), 5);
    assert_eq!(r.log.turns.len(), 15);
    assert!(r.log.turns.iter().all(|t| t.gen_loss.is_some()));
    assert!(r.epochs.iter().all(|e| (0.0..=1.0).contains(&e.score)));
}

#[test]
fn attacker_with_no_fakes_trains_like_an_honest_participant() {
    let (train, test) = blobs(4, 15);
    let a = train.filter_classes(&[ClassLabel(0), ClassLabel(1)].into());
    let b = train.filter_classes(&[ClassLabel(2), ClassLabel(3)].into());
    let clf = KeyProtectedClassifier::new(&emb(false), 3).unwrap();
    let run = |attacking: bool| {
        let p1 = if attacking {
            let mut ring = keys_for(1, &[2, 3], 16, 101);
            let fake = generate_key(16, ClassLabel(FAKE_CLASS_BASE + 1), ParticipantId(1), &mut seeded(7)).unwrap();
            ring.insert(fake.clone()).unwrap();
            let psi = generate_key(16, ClassLabel(0), ParticipantId(1), &mut seeded(8)).unwrap();
            let gen = GeneratorNet::new(4, 8, 8, 0).unwrap();
            let mut adv = AdversaryState::keyed(gen, AttackMode::RandomKey, psi, fake).unwrap();
            adv.m_samples = 0;
            Participant::attacker(ParticipantId(1), b.clone(), LocalModel::Keyed { clf: clf.clone(), keys: ring }, adv)
        } else {
            honest(1, b.clone(), &clf, &[2, 3])
        };
        let (_, fw) = run_training(vec![honest(0, a.clone(), &clf, &[0, 1]), p1], test.clone(), &cfg(3)).unwrap();
        fw.server().params().clone()
    };
    assert_eq!(run(true), run(false));
}
