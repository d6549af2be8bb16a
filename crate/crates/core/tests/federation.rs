use fedpeft::data::{dirichlet_partition, make_synthetic, AugmentConfig, Dataset, Generator, PartitionAssignment, SyntheticTaskSpec};
use fedpeft::federation::{
    aggregate, client_update, evaluate, run_training, sample_clients, stream_seed, ClientUpdate, FederationConfig,
    LocalTraining, RunOptions, EVAL_BATCH_SIZE,
};
use fedpeft::model::{build_model, GlobalModel, MlpSpec, ModelSpec};
use fedpeft::peft::{apply_mode, TuningMode};
use fedpeft::privacy::DpConfig;
use fedpeft::tensor::SgdConfig;
use fedpeft::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn blobs(samples_per_class: usize, seed: u64) -> Dataset {
    make_synthetic(
        &SyntheticTaskSpec {
            num_classes: 3,
            samples_per_class,
            generator: Generator::Blobs {
                dim: 6,
                separation: 1.5,
                noise: 1.0,
            },
            shift: 0.0,
            task_seed: 4,
        },
        seed,
    )
    .unwrap()
}

fn mlp() -> ModelSpec {
    ModelSpec::Mlp(MlpSpec {
        input_dim: 6,
        hidden_dims: vec![8],
        num_classes: 3,
    })
}

fn local(lr: f64, batch: usize) -> LocalTraining {
    LocalTraining {
        sgd: SgdConfig {
            learning_rate: lr,
            weight_decay: 1e-4,
            batch_size: batch,
        },
        dp: DpConfig::default(),
        augment: AugmentConfig::default(),
    }
}

fn fed(n: usize, m: usize, t: usize, e: usize, lr: f64, batch: usize) -> FederationConfig {
    FederationConfig {
        num_clients: n,
        clients_per_round: m,
        rounds: t,
        local_epochs: e,
        seed: 17,
        local: local(lr, batch),
    }
}

fn bit_equal(a: &GlobalModel<f64>, b: &GlobalModel<f64>) -> bool {
    a.weights().iter().zip(b.weights()).all(|(x, y)| x.bit_eq(y))
}

#[test]
fn sampling_all_and_deterministic() {
    let ids: Vec<usize> = (0..10).collect();
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        assert_eq!(sample_clients(&ids, 10, &mut rng).unwrap(), ids);
    }
    let pick = |seed| sample_clients(&ids, 1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    assert_eq!(pick(3), pick(3));
    assert!(matches!(
        sample_clients(&ids, 11, &mut ChaCha8Rng::seed_from_u64(0)),
        Err(Error::Config(_))
    ));
}

#[test]
fn sampling_frequency_is_uniform() {
    // Binomial(10_000, 1/8): std of the rate is 0.0033, so 0.01 is three sigma.
    let ids: Vec<usize> = (0..64).collect();
    let mut counts = [0usize; 64];
    for round in 0..10_000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(5, round, u64::MAX));
        for c in sample_clients(&ids, 8, &mut rng).unwrap() {
            counts[c] += 1;
        }
    }
    for (c, &k) in counts.iter().enumerate() {
        let rate = k as f64 / 10_000.0;
        assert!((rate - 0.125).abs() <= 0.01, "client {c}: {rate}");
    }
}

#[test]
fn client_update_with_zero_lr_returns_theta() {
    let data = blobs(10, 1);
    let m = build_model::<f64>(&mlp(), 2).unwrap();
    let theta = m.snapshot_transmitted();
    let shard: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (u, _) = client_update(&m, &theta, &data, &shard, 0, 3, &local(0.0, 4), &mut rng)
        .unwrap()
        .unwrap();
    assert_eq!(u.theta, theta);
    assert_eq!(u.num_samples, shard.len());
}

#[test]
fn client_update_matches_hand_stepped_sgd() {
    let data = blobs(1, 3);
    let m = build_model::<f64>(&mlp(), 4).unwrap();
    let theta = m.snapshot_transmitted();
    let (lr, wd) = (0.1, 1e-4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (u, stats) = client_update(&m, &theta, &data, &[0], 0, 1, &local(lr, 1), &mut rng)
        .unwrap()
        .unwrap();

    let x = m.prepare_input(&[data.sample(0)]).unwrap();
    let (loss, grads) = m.loss_and_gradients(&x, &[data.label(0)]).unwrap();
    let expected: Vec<f64> = m
        .weights()
        .iter()
        .zip(&grads)
        .flat_map(|(w, g)| {
            let g = g.as_ref().unwrap();
            w.data().iter().zip(g).map(|(&p, &d)| p - lr * (d + wd * p)).collect::<Vec<_>>()
        })
        .collect();
    assert_eq!(u.theta.len(), expected.len());
    for (a, b) in u.theta.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-15);
    }
    assert_eq!(stats.mean_loss(), loss);
}

#[test]
fn client_update_is_reproducible() {
    let data = blobs(10, 5);
    let m = build_model::<f64>(&mlp(), 6).unwrap();
    let theta = m.snapshot_transmitted();
    let shard: Vec<usize> = (0..data.len()).step_by(2).collect();
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(1, 2, 3));
        client_update(&m, &theta, &data, &shard, 3, 2, &local(0.05, 4), &mut rng)
            .unwrap()
            .unwrap()
            .0
    };
    assert_eq!(run(), run());
}

#[test]
fn empty_shard_is_skipped() {
    let data = blobs(2, 5);
    let m = build_model::<f64>(&mlp(), 6).unwrap();
    let theta = m.snapshot_transmitted();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(client_update(&m, &theta, &data, &[], 0, 1, &local(0.1, 4), &mut rng)
        .unwrap()
        .is_none());
}

#[test]
fn zero_lr_single_round_keeps_server_model() {
    let data = blobs(5, 7);
    let eval = blobs(5, 8);
    let p = dirichlet_partition(data.labels(), 1, 1.0, 0).unwrap();
    let mut m = build_model::<f64>(&mlp(), 9).unwrap();
    let before = m.clone();
    let initial = evaluate(&m, &eval, EVAL_BATCH_SIZE).unwrap();
    let recs = run_training(&mut m, &data, &p, &fed(1, 1, 1, 1, 0.0, 4), &eval, &RunOptions::default(), |_| Ok(())).unwrap();
    assert!(bit_equal(&m, &before));
    assert_eq!(recs[0].server_accuracy, initial.accuracy);
    assert_eq!(recs[0].server_loss, initial.loss);
}

#[test]
fn head_mode_freezes_backbone_across_rounds() {
    let data = blobs(20, 10);
    let eval = blobs(5, 11);
    let p = dirichlet_partition(data.labels(), 6, 0.5, 1).unwrap();
    let base = build_model::<f64>(&mlp(), 12).unwrap();
    let mut m = apply_mode(base.clone(), TuningMode::Head, 12).unwrap();
    let mut cfg = fed(6, 3, 4, 2, 0.1, 8);
    cfg.local.dp = DpConfig {
        enabled: true,
        ..DpConfig::default()
    };
    run_training(&mut m, &data, &p, &cfg, &eval, &RunOptions::default(), |_| Ok(())).unwrap();
    let mut changed = false;
    for ((e, a), b) in m.registry().entries().iter().zip(m.weights()).zip(base.weights()) {
        if e.transmitted {
            changed |= !a.bit_eq(b);
        } else {
            assert!(a.bit_eq(b), "{}", e.name);
        }
    }
    assert!(changed);
}

#[test]
fn identical_shards_equal_one_centralized_step() {
    let one = blobs(1, 13).subset(&[0]);
    let data = one.subset(&[0, 0, 0, 0]);
    let p = PartitionAssignment::from_owner(vec![0, 1, 2, 3], 4).unwrap();
    let mut fed_model = build_model::<f64>(&mlp(), 14).unwrap();
    let mut central = fed_model.clone();
    let cfg = fed(4, 4, 1, 1, 0.2, 1);
    run_training(&mut fed_model, &data, &p, &cfg, &one, &RunOptions::default(), |_| Ok(())).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    fedpeft::federation::train_step(&mut central, &one, &[0], &cfg.local, &mut rng).unwrap();
    for (a, b) in fed_model.weights().iter().zip(central.weights()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn thread_count_does_not_change_history() {
    let data = blobs(30, 15);
    let eval = blobs(10, 16);
    let p = dirichlet_partition(data.labels(), 8, 0.3, 2).unwrap();
    let cfg = fed(8, 4, 3, 2, 0.05, 5);
    let run = |threads| {
        let mut m = build_model::<f64>(&mlp(), 17).unwrap();
        let recs = run_training(&mut m, &data, &p, &cfg, &eval, &RunOptions { threads }, |_| Ok(())).unwrap();
        (recs, m)
    };
    let (r1, m1) = run(1);
    let (r3, m3) = run(3);
    assert_eq!(r1, r3);
    assert!(bit_equal(&m1, &m3));
}

#[test]
fn disabled_dp_is_the_plain_trajectory() {
    let data = blobs(10, 18);
    let eval = blobs(5, 19);
    let p = dirichlet_partition(data.labels(), 3, 1.0, 3).unwrap();
    let plain = fed(3, 2, 2, 1, 0.05, 4);
    let mut off = plain.clone();
    off.local.dp = DpConfig {
        enabled: false,
        epsilon: 0.1,
        delta: 1e-6,
        clip_norm: 0.01,
        per_sample: true,
    };
    let run = |cfg: &FederationConfig| {
        let mut m = build_model::<f64>(&mlp(), 20).unwrap();
        run_training(&mut m, &data, &p, cfg, &eval, &RunOptions::default(), |_| Ok(())).unwrap();
        m
    };
    assert!(bit_equal(&run(&plain), &run(&off)));

    let mut on = plain.clone();
    on.local.dp.enabled = true;
    on.local.dp.per_sample = true;
    assert!(bit_equal(&run(&on), &run(&on)));
    assert!(!bit_equal(&run(&on), &run(&plain)));
}

#[test]
fn observer_error_aborts_with_history_so_far() {
    let data = blobs(10, 21);
    let eval = blobs(5, 22);
    let p = dirichlet_partition(data.labels(), 2, 1.0, 4).unwrap();
    let mut m = build_model::<f64>(&mlp(), 23).unwrap();
    let mut seen = Vec::new();
    let r = run_training(&mut m, &data, &p, &fed(2, 2, 5, 1, 0.05, 4), &eval, &RunOptions::default(), |rec| {
        seen.push(rec.round);
        if rec.round == 2 {
            Err(Error::Divergence("stop".into()))
        } else {
            Ok(())
        }
    });
    assert!(matches!(r, Err(Error::Divergence(_))));
    assert_eq!(seen, [0, 1, 2]);
}

#[test]
fn aggregation_weighted_example() {
    let u = |id, v: f64, n| ClientUpdate {
        client_id: id,
        theta: vec![v; 3],
        num_samples: n,
    };
    assert_eq!(aggregate(&[u(1, 4.0, 3), u(0, 0.0, 1)]).unwrap(), vec![3.0; 3]);
}
