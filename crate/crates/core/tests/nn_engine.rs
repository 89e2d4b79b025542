use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stabcal::datagen::{normalize_inputs, split_indices, Dataset, DatasetMeta, Split, TargetSpec, CHANNELS};
use stabcal::nn::{
    build_cnn, build_mlp, check_network, predict, train, GradCheckOptions, Mode, Network, TrainConfig,
};

/// Two targets encoded as the amplitude and decay of a pair of waveforms.
fn synthetic(n: usize, m: usize, seed: u64) -> Dataset<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(n * 2 * m);
    let mut targets = Vec::with_capacity(n * 2);
    for _ in 0..n {
        let (a, b): (f64, f64) = (rng.random(), rng.random());
        inputs.extend((0..m).map(|t| (0.5 + a) * (0.3 * t as f64).sin()));
        inputs.extend((0..m).map(|t| (-(t as f64) / (3.0 + 10.0 * b)).exp()));
        targets.extend([a, b]);
    }
    let spec = |name: &str| TargetSpec {
        name: name.into(),
        base: 2.0,
        lower_factor: 0.5,
        upper_factor: 1.5,
    };
    Dataset {
        inputs,
        targets,
        meta: DatasetMeta {
            targets: vec![spec("a"), spec("b")],
            seed,
            noise_std: 0.0,
            event_id: "synthetic".into(),
            channels: CHANNELS.iter().map(|c| c.to_string()).collect(),
            n,
            m,
            input_stats: None,
            split: None,
        },
    }
}

fn prepared(n: usize, m: usize) -> (Dataset<f64>, Split) {
    let mut ds = synthetic(n, m, 3);
    let split = split_indices(n, (0.8, 0.1, 0.1), 1).unwrap();
    let stats = normalize_inputs(&mut ds, &split.train).unwrap();
    ds.meta.input_stats = Some(stats);
    (ds, split)
}

fn batch(ds: &Dataset<f64>, rows: std::ops::Range<usize>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    rows.map(|i| (ds.input(i).to_vec(), ds.target(i).to_vec())).unzip()
}

#[test]
fn cnn_and_mlp_gradients_match_finite_differences() {
    let (ds, _) = prepared(8, 32);
    let (xs, ts) = batch(&ds, 0..8);
    for seed in 0..2 {
        let nets: [Network<f64>; 2] = [build_cnn(2, 32, 2, seed).unwrap(), build_mlp(2, 32, 2, seed).unwrap()];
        for net in &nets {
            let opts = GradCheckOptions { seed, ..Default::default() };
            let r = check_network(net, &xs, &ts, &opts).unwrap();
            assert!(r.passed(), "seed {seed}: {:?}", &r.failures[..r.failures.len().min(5)]);
            assert!(r.skipped_fraction() < 0.02, "skipped {} of {}", r.skipped, r.checked + r.skipped);
        }
    }
}

#[test]
fn zero_learning_rate_leaves_weights_alone() {
    let (ds, split) = prepared(40, 32);
    let mut net = build_cnn::<f64>(2, 32, 2, 4).unwrap();
    let before = net.params().to_vec();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        epochs: 3,
        ..Default::default()
    };
    let report = train(&mut net, &ds, &split, &cfg).unwrap();
    assert_eq!(net.params(), &before[..]);
    assert_eq!(report.epochs_run, 3);
}

#[test]
fn identical_seeds_give_identical_reports() {
    let (ds, split) = prepared(60, 32);
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 8,
        seed: 11,
        ..Default::default()
    };
    let run = || {
        let mut net = build_cnn::<f32>(2, 32, 2, 7).unwrap();
        let r = train(&mut net, &ds.cast(), &split, &cfg).unwrap();
        (r, net.params().to_vec())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert!(a.train_loss.iter().chain(&a.val_loss).all(|v| v.is_finite()));
    assert!(a.best_epoch >= 1 && a.best_epoch <= cfg.epochs);
}

#[test]
fn training_reduces_validation_loss() {
    let (ds, split) = prepared(300, 32);
    let mut net = build_cnn::<f32>(2, 32, 2, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 30,
        ..Default::default()
    };
    let r = train(&mut net, &ds.cast(), &split, &cfg).unwrap();
    let best = r.normalized_val_loss().iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(best < 0.5, "{best}");
    // dropout is active only for the training loss
    assert!(r.train_loss[0] > r.val_loss[0]);
}

#[test]
fn single_sample_is_memorized() {
    let mut ds = synthetic(1, 32, 5);
    ds.meta.input_stats = Some(stabcal::datagen::InputStats {
        mean: vec![0.0, 0.0],
        std: vec![1.0, 1.0],
        flagged: vec![],
    });
    let split = Split {
        train: vec![0],
        val: vec![0],
        test: vec![],
    };
    let mut net = build_mlp::<f64>(2, 32, 2, 1).unwrap();
    let cfg = TrainConfig {
        epochs: 3000,
        patience: 3000,
        dropout_rate: 0.0,
        ..Default::default()
    };
    let r = train(&mut net, &ds, &split, &cfg).unwrap();
    assert!(r.best_val_loss < 1e-6, "{}", r.best_val_loss);
    assert_eq!(net.mode(), Mode::Eval);
    let pred = predict(&net, ds.input(0), &ds.meta).unwrap();
    for (p, t) in pred.values.iter().zip(ds.target_values(0)) {
        assert!((p - t).abs() < 1e-6, "{p} vs {t}");
    }
}

#[test]
fn predict_requires_stats() {
    let ds = synthetic(1, 32, 0);
    let net = build_cnn::<f64>(2, 32, 2, 0).unwrap();
    assert!(predict(&net, ds.input(0), &ds.meta).is_err());
}
