use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reve_core::data::{
    write_idx_images, write_idx_labels, AugmentSpec, BlobSpec, DataSpec, IdxSpec,
};
use reve_core::kde::{trapezoid, BandwidthRule};
use reve_core::nn::{Activation, LayerSpec, Model};
use reve_core::reve::{reve_loss, ReveConfig};
use reve_core::runner::{
    density_table, evaluate, export_density, metrics_csv, parse_density_table, train, LoadedRun,
    MetricsRow, ModelSpec, OptimizerSpec, RunConfig, CHECKPOINT_FILE, METRICS_FILE,
};
use reve_core::{Error, Tape, Tensor};

fn dense(units: usize, activation: Activation) -> LayerSpec {
    LayerSpec::Dense { units, activation }
}

fn blobs_config(seed: u64, reve: Option<ReveConfig>) -> RunConfig {
    RunConfig {
        seed,
        epochs: 2,
        batch_size: 32,
        out_dir: "unused".into(),
        data: DataSpec::Blobs(BlobSpec {
            classes: 3,
            informative: 2,
            nuisance: 6,
            noise: 0.5,
            train: 240,
            test: 150,
            seed: 11,
        }),
        model: ModelSpec {
            layers: vec![dense(16, Activation::Relu), dense(8, Activation::Tanh)],
        },
        optimizer: OptimizerSpec {
            lr: 0.05,
            decay: 0.95,
            momentum: 0.9,
            weight_decay: 1e-4,
        },
        reve,
    }
}

fn reve(beta: f64) -> Option<ReveConfig> {
    Some(ReveConfig {
        beta,
        samples: 4,
        ..ReveConfig::default()
    })
}

#[test]
fn identical_runs_write_identical_files() {
    let config = blobs_config(5, reve(1e-2));
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train(&config).unwrap().save(a.path()).unwrap();
    train(&config).unwrap().save(b.path()).unwrap();
    for file in [METRICS_FILE, CHECKPOINT_FILE] {
        assert_eq!(
            fs::read(a.path().join(file)).unwrap(),
            fs::read(b.path().join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn seed_changes_the_run() {
    let a = train(&blobs_config(1, None)).unwrap();
    let b = train(&blobs_config(2, None)).unwrap();
    assert_ne!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
}

#[test]
fn zero_beta_follows_the_plain_cross_entropy_trace() {
    let plain = train(&blobs_config(3, None)).unwrap();
    let gated = train(&blobs_config(
        3,
        Some(ReveConfig {
            beta: 0.0,
            sigma2: 0.7,
            ..ReveConfig::default()
        }),
    ))
    .unwrap();
    assert_eq!(plain.model.named_params(), gated.model.named_params());
    for (p, g) in plain.metrics.iter().zip(&gated.metrics) {
        assert_eq!((p.cross_entropy, p.total), (g.cross_entropy, g.total));
        assert_eq!((p.train_error, p.test_error), (g.train_error, g.test_error));
        assert!(p.omega.is_none() && g.omega.unwrap().is_finite());
    }
}

#[test]
fn metrics_rows_are_ordered_and_finite() {
    let outcome = train(&blobs_config(4, reve(1e-3))).unwrap();
    let text = metrics_csv(&outcome.metrics);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(MetricsRow::HEADER));
    assert_eq!(lines.count(), 2);
    let steps: Vec<usize> = outcome.metrics.iter().map(|m| m.step).collect();
    assert_eq!(steps, [8, 16]);
    for m in &outcome.metrics {
        assert!(m.omega.unwrap().is_finite());
        let sum = m.neg_log_q.unwrap() + m.neg_log_r.unwrap();
        assert!((sum - m.omega.unwrap()).abs() <= 1e-9 * sum.abs().max(1.0));
    }
}

#[test]
fn checkpoint_round_trip_matches_the_logged_error() {
    let config = blobs_config(6, reve(1e-3));
    let outcome = train(&config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    outcome.save(dir.path()).unwrap();
    let (_, test) = config.data.load().unwrap();
    let restored = evaluate(dir.path().join(CHECKPOINT_FILE), &test).unwrap();
    assert_eq!(restored, outcome.final_metrics().unwrap().test_error);
}

#[test]
fn untrained_network_is_at_chance() {
    // lr = 0 leaves the initialization untouched; with noise swamping the
    // class centers the inputs say nothing about the 3 balanced labels
    let mut config = blobs_config(7, None);
    config.optimizer.lr = 0.0;
    config.epochs = 1;
    if let DataSpec::Blobs(spec) = &mut config.data {
        spec.test = 3000;
        spec.noise = 1e3;
    }
    let outcome = train(&config).unwrap();
    let error = outcome.final_metrics().unwrap().test_error;
    assert!((error - 200.0 / 3.0).abs() <= 5.0, "{error}");
}

#[test]
fn permuted_labels_do_not_help() {
    let config = blobs_config(8, None);
    let outcome = train(&config).unwrap();
    let run =
        LoadedRun::from_entries(config.clone(), &outcome.checkpoint_entries().unwrap()).unwrap();
    let (_, test) = config.data.load().unwrap();
    let rotated: Vec<usize> = test.labels().iter().map(|&c| (c + 1) % 3).collect();
    let clean = run.evaluate(&test).unwrap();
    let permuted = run.evaluate(&test.with_labels(rotated).unwrap()).unwrap();
    assert!(permuted >= clean, "{permuted} < {clean}");
}

#[test]
fn exported_densities_are_normalized() {
    let config = blobs_config(9, reve(1e-3));
    let outcome = train(&config).unwrap();
    let run =
        LoadedRun::from_entries(config.clone(), &outcome.checkpoint_entries().unwrap()).unwrap();
    let (_, test) = config.data.load().unwrap();
    let densities = export_density(&run, &test, &[0, 3, 7], BandwidthRule::Silverman).unwrap();
    let columns = parse_density_table(&density_table(&densities)).unwrap();
    assert_eq!(columns.len(), 12);
    assert_eq!(columns[0].0, "grid_y0");
    for pair in columns.chunks(2) {
        let integral = trapezoid(&pair[0].1, &pair[1].1);
        assert!((integral - 1.0).abs() <= 1e-3, "{}: {integral}", pair[1].0);
    }
    assert!(export_density(&run, &test, &[8], BandwidthRule::Silverman).is_err());
}

#[test]
fn config_round_trips_through_toml() {
    let config = blobs_config(10, reve(1e-4));
    let text = config.to_toml().unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), config);
    assert!(RunConfig::from_toml(&text.replace("epochs", "epoch")).is_err());
}

#[test]
fn invalid_config_is_rejected() {
    let mut config = blobs_config(0, None);
    config.optimizer.momentum = 1.0;
    assert!(matches!(train(&config), Err(Error::Config(_))));
    let mut config = blobs_config(0, reve(1e-3));
    config.reve_mut().samples = 0;
    assert!(train(&config).is_err());
}

#[test]
fn exploding_loss_is_reported_with_its_step() {
    let mut config = blobs_config(12, None);
    config.optimizer.lr = 1e200;
    match train(&config) {
        Err(Error::NonFiniteLoss { epoch, step, .. }) => assert!(epoch >= 1 && step >= 2),
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
}

#[test]
fn collapsed_encodings_stay_finite() {
    // every row encodes to the same point and the noise is negligible
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = Model::new(&[3], &[dense(4, Activation::Tanh)], 2, &mut rng).unwrap();
    let mut head = model.head.clone();
    let projection = head.refresh(1e-7).unwrap().projection.clone();
    let config = ReveConfig {
        beta: 1.0,
        sigma2: 1e-30,
        samples: 3,
        ..ReveConfig::default()
    };
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let h = tape.constant(Tensor::new([6, 4], [0.3, -0.1, 0.2, 0.5].repeat(6)).unwrap());
    let loss = reve_loss(
        h,
        &[0, 1, 0, 1, 0, 1],
        &bound,
        &projection,
        &config,
        None,
        &mut rng,
    )
    .unwrap();
    assert!(loss.omega.item().is_finite());
    let grads = tape.backward(loss.omega).unwrap();
    assert!(grads
        .get(bound.weight)
        .unwrap()
        .data()
        .iter()
        .all(|g| g.is_finite()));
}

#[test]
fn idx_images_train_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let path = |name: &str| dir.path().join(name);
    // 6×6 images, class 0 bright on the left, class 1 on the right
    let image = |label: u8, k: usize| -> Vec<u8> {
        (0..36)
            .map(|p| {
                let left = p % 6 < 3;
                let on = left == (label == 0);
                if on {
                    200 + (k % 50) as u8
                } else {
                    (k * 7 % 40) as u8
                }
            })
            .collect()
    };
    for (split, count) in [("train", 64), ("test", 20)] {
        let labels: Vec<u8> = (0..count).map(|k| (k % 2) as u8).collect();
        let pixels: Vec<u8> = labels
            .iter()
            .enumerate()
            .flat_map(|(k, &c)| image(c, k))
            .collect();
        write_idx_images(path(&format!("{split}-images")), count, 6, 6, &pixels).unwrap();
        write_idx_labels(path(&format!("{split}-labels")), &labels).unwrap();
    }
    let mut config = blobs_config(13, reve(1e-3));
    config.epochs = 4;
    config.batch_size = 16;
    config.data = DataSpec::Idx(IdxSpec {
        train_images: path("train-images"),
        train_labels: path("train-labels"),
        test_images: path("test-images"),
        test_labels: path("test-labels"),
        limit: None,
        augment: Some(AugmentSpec {
            pad: 1,
            hflip_prob: 0.0,
        }),
    });
    config.model.layers = vec![
        LayerSpec::Conv2d {
            filters: 2,
            kernel: 3,
            padding: 1,
            activation: Activation::Relu,
        },
        LayerSpec::MaxPool2d { size: 2 },
        LayerSpec::Flatten,
        dense(4, Activation::Tanh),
    ];
    let outcome = train(&config).unwrap();
    outcome.save(dir.path().join("run")).unwrap();
    let (_, test) = config.data.load().unwrap();
    let run = LoadedRun::load(dir.path().join("run").join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(
        run.evaluate(&test).unwrap(),
        outcome.final_metrics().unwrap().test_error
    );
    assert!(outcome.final_metrics().unwrap().test_error <= 10.0);
}

#[test]
fn mismatched_checkpoint_is_an_architecture_error() {
    let config = blobs_config(14, None);
    let outcome = train(&config).unwrap();
    let mut other = config.clone();
    other.model.layers[0] = dense(12, Activation::Relu);
    let err = LoadedRun::from_entries(other, &outcome.checkpoint_entries().unwrap()).unwrap_err();
    assert_eq!(err.kind(), "architecture_mismatch");
}
