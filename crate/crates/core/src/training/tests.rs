use super::*;
use crate::dataio::{build_dataset, DataConfig, Dataset, ShapeKind};
use crate::network::{Checkpoint, ModelConfig, ENCODER_PREFIXES};

fn small_model() -> ModelConfig {
    ModelConfig {
        embed_dim: 32,
        encoder_depth: 2,
        decoder_depth: 1,
        heads: 4,
        mlp_ratio: 2,
        patch_count: 8,
        patch_size: 16,
        embed_hidden: [32, 64],
        pe_hidden: 32,
        num_classes: 3,
        ..ModelConfig::desk()
    }
}

fn small_data(per_class: usize) -> Dataset {
    build_dataset(&DataConfig {
        classes: vec![ShapeKind::Sphere, ShapeKind::Box, ShapeKind::Torus],
        samples_per_class: per_class,
        points: 256,
        ..DataConfig::default()
    })
    .unwrap()
}

fn small_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        ..TrainConfig::desk()
    }
}

#[test]
fn pretraining_makes_progress() {
    let data = small_data(20);
    let out = pretrain(&data, &small_model(), &small_train(6), None, None).unwrap();
    let first = out.metrics.first().unwrap().l_all;
    let last = out.metrics.last().unwrap().l_all;
    assert!(last < first, "l_all went from {first} to {last}");
    assert!(out.checkpoint.params.all_finite());
}

#[test]
fn metrics_identity_and_schedule_columns() {
    let data = small_data(5);
    let train = small_train(3);
    let out = pretrain(&data, &small_model(), &train, None, None).unwrap();
    let steps = steps_per_epoch(data.train.len(), train.batch_size);
    for (e, row) in out.metrics.iter().enumerate() {
        assert!((row.l_all - (row.l_p + row.alpha * row.l_n)).abs() <= 1e-12);
        assert_eq!(row.epoch, e);
        assert_eq!(row.step, (e + 1) * steps);
        assert_eq!(row.lr, cosine_lr(e, 3, train.lr_init));
        assert!(row.alpha > 0.0 && row.alpha < train.alpha_final);
    }
}

#[test]
fn zero_alpha_reports_normals_but_ignores_them() {
    let data = small_data(5);
    let train = TrainConfig {
        alpha_final: 0.0,
        ..small_train(2)
    };
    let out = pretrain(&data, &small_model(), &train, None, None).unwrap();
    for row in &out.metrics {
        assert_eq!(row.l_all, row.l_p);
        assert!(row.l_n > 0.0);
    }
}

#[test]
fn pretraining_is_deterministic_on_disk() {
    let data = small_data(5);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        pretrain(&data, &small_model(), &small_train(2), Some(d.path()), None).unwrap();
    }
    for f in ["metrics.csv", "checkpoint.bin"] {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
    let rows = read_metrics(&dirs[0].path().join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    let ck = Checkpoint::load(&dirs[0].path().join("checkpoint.bin")).unwrap();
    assert_eq!(ck.meta_u64("epoch").unwrap(), 2);
    assert_eq!(ck.optimizer.len(), 2 * ck.params.len());
}

#[test]
fn different_seeds_differ() {
    let data = small_data(5);
    let a = pretrain(&data, &small_model(), &small_train(1), None, None).unwrap();
    let train = TrainConfig {
        seed: 1,
        ..small_train(1)
    };
    let b = pretrain(&data, &small_model(), &train, None, None).unwrap();
    assert_ne!(a.metrics[0].l_p, b.metrics[0].l_p);
}

#[test]
fn empty_train_split_is_rejected() {
    let mut data = small_data(5);
    data.train.clear();
    assert!(pretrain(&data, &small_model(), &small_train(1), None, None).is_err());
}

#[test]
fn metrics_rows_round_trip_through_csv() {
    let row = MetricsRow {
        epoch: 3,
        step: 40,
        lr: 0.1 + 0.2,
        alpha: 1.0 / 3.0,
        l_p: 2.5e-3,
        l_n: 0.75,
        l_all: 2.5e-3 + 0.75 / 3.0,
        wall_time: 0.0,
    };
    assert_eq!(MetricsRow::parse(&row.csv()).unwrap(), row);
    assert!(MetricsRow::parse("1,2,3").is_err());
}

fn encoder_checksum(store: &crate::network::ParamStore) -> Vec<u64> {
    store
        .matching(&ENCODER_PREFIXES)
        .into_iter()
        .flat_map(|i| store.values()[i].data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect()
}

#[test]
fn frozen_protocols_leave_the_encoder_untouched() {
    let data = small_data(8);
    let model = small_model();
    let ck = pretrain(&data, &model, &small_train(1), None, None).unwrap().checkpoint;
    let before = encoder_checksum(&ck.params);
    for protocol in [Protocol::LinearFrozen, Protocol::NonlinearFrozen] {
        let out = finetune(Some(&ck), &model, &data, protocol, &small_train(2)).unwrap();
        assert_eq!(encoder_checksum(&out.checkpoint.params), before, "{protocol}");
        assert!((0.0..=1.0).contains(&out.accuracy));
    }
    let out = finetune(Some(&ck), &model, &data, Protocol::TransferAll, &small_train(1)).unwrap();
    assert_ne!(encoder_checksum(&out.checkpoint.params), before);
}

#[test]
fn random_labels_give_chance_accuracy() {
    use rand::{Rng, SeedableRng};
    let mut data = build_dataset(&DataConfig {
        classes: ShapeKind::ALL.to_vec(),
        samples_per_class: 60,
        points: 256,
        ..DataConfig::default()
    })
    .unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for s in data.train.iter_mut().chain(data.test.iter_mut()) {
        s.label = rng.gen_range(0..5);
    }
    let model = ModelConfig {
        num_classes: 5,
        ..small_model()
    };
    let out = finetune(None, &model, &data, Protocol::LinearFrozen, &small_train(10)).unwrap();
    // 60 test samples: chance 0.2, standard error about 0.052.
    assert!((out.accuracy - 0.2).abs() < 4.0 * (0.2f64 * 0.8 / 60.0).sqrt(), "accuracy {}", out.accuracy);
}

#[test]
fn class_count_and_architecture_mismatches_are_rejected() {
    let data = small_data(5);
    let wrong = ModelConfig {
        num_classes: 4,
        ..small_model()
    };
    let err = finetune(None, &wrong, &data, Protocol::LinearFrozen, &small_train(1)).unwrap_err();
    assert!(matches!(err, crate::Error::InvalidArgument(_)));

    let ck = Checkpoint::new(
        ModelConfig {
            embed_dim: 64,
            heads: 4,
            ..small_model()
        },
        crate::network::Stage::Pretrain,
        crate::network::ParamStore::new(),
    );
    let err = finetune(Some(&ck), &small_model(), &data, Protocol::LinearFrozen, &small_train(1)).unwrap_err();
    assert!(matches!(err, crate::Error::InvalidArgument(_)));
}

#[test]
fn one_way_fewshot_is_always_right() {
    let data = small_data(6);
    let cfg = FewshotConfig {
        n_way: 1,
        m_shot: 2,
        query_per_class: 3,
        trials: 3,
        protocol: Protocol::LinearFrozen,
    };
    let out = fewshot_eval(None, &small_model(), &data, &cfg, &small_train(1)).unwrap();
    assert_eq!(out.accuracies, vec![1.0; 3]);
    assert_eq!(out.std, 0.0);
    assert_eq!(out.to_string(), "100.00±0.00");
}

#[test]
fn fewshot_needs_enough_samples() {
    let data = small_data(5);
    let cfg = FewshotConfig {
        n_way: 2,
        m_shot: 4,
        query_per_class: 2,
        trials: 1,
        protocol: Protocol::LinearFrozen,
    };
    let err = fewshot_eval(None, &small_model(), &data, &cfg, &small_train(1)).unwrap_err();
    assert!(matches!(err, crate::Error::InvalidArgument(_)));
    let cfg = FewshotConfig { n_way: 4, m_shot: 1, ..cfg };
    assert!(fewshot_eval(None, &small_model(), &data, &cfg, &small_train(1)).is_err());
}

#[test]
fn fewshot_statistics() {
    let data = small_data(6);
    let cfg = FewshotConfig {
        n_way: 3,
        m_shot: 2,
        query_per_class: 2,
        trials: 3,
        protocol: Protocol::LinearFrozen,
    };
    let out = fewshot_eval(None, &small_model(), &data, &cfg, &small_train(2)).unwrap();
    let mean = out.accuracies.iter().sum::<f64>() / 3.0;
    assert!((out.mean - mean).abs() < 1e-15);
    let var = out.accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 3.0;
    assert!((out.std - var.sqrt()).abs() < 1e-15);
    let again = fewshot_eval(None, &small_model(), &data, &cfg, &small_train(2)).unwrap();
    assert_eq!(out, again);
}

#[test]
fn probing_is_deterministic_and_keeps_the_encoder() {
    let data = small_data(5);
    let model = small_model();
    let ck = pretrain(&data, &model, &small_train(1), None, None).unwrap().checkpoint;
    let a = probe_decoder(Some(&ck), &model, &data, &small_train(2)).unwrap();
    let b = probe_decoder(Some(&ck), &model, &data, &small_train(2)).unwrap();
    assert_eq!(a, b);
    assert!(a.l_p > 0.0 && a.l_n > 0.0);
    for row in &a.metrics {
        assert!((row.alpha - small_train(2).alpha_final).abs() < 1e-15);
    }
}

#[test]
fn evaluation_is_repeatable() {
    let data = small_data(5);
    let model = small_model();
    let ck = pretrain(&data, &model, &small_train(1), None, None).unwrap().checkpoint;
    let net = crate::network::MaskSurfNet::new(model).unwrap();
    let a = evaluate_reconstruction(&net, &ck.params, &data.test, &small_train(1)).unwrap();
    let b = evaluate_reconstruction(&net, &ck.params, &data.test, &small_train(1)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn tiny_model_gradients_match_finite_differences() {
    for check in model_checks(GRADCHECK_EPS, GRADCHECK_TOL).unwrap() {
        assert!(
            check.report.pass,
            "{}: max rel error {:e}",
            check.name, check.report.max_rel_error
        );
    }
}

#[test]
fn primitive_and_loss_gradients_match_finite_differences() {
    let mut checks = primitive_checks(GRADCHECK_EPS, GRADCHECK_TOL).unwrap();
    checks.extend(loss_checks(GRADCHECK_EPS, GRADCHECK_TOL).unwrap());
    for check in checks {
        assert!(
            check.report.pass,
            "{}: max rel error {:e}",
            check.name, check.report.max_rel_error
        );
    }
}

#[test]
fn stream_purposes_are_independent() {
    use rand::Rng;
    let a: u64 = stream(1, Purpose::Pretrain, 0, 0).gen();
    let b: u64 = stream(1, Purpose::Probe, 0, 0).gen();
    let c: u64 = stream(1, Purpose::Pretrain, 1, 0).gen();
    let d: u64 = stream(1, Purpose::Pretrain, 0, 1).gen();
    assert!(a != b && a != c && a != d);
    let mut order = epoch_order(3, Purpose::Pretrain, 2, 50);
    order.sort();
    assert_eq!(order, (0..50).collect::<Vec<_>>());
}
