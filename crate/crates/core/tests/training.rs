mod common;

use std::fs;

use common::small_run_config;
use lmdet::ablate::{ablate, Grid};
use lmdet::checkpoint::{stored_precision, Checkpoint};
use lmdet::data::{Dataset, LandmarkSet};
use lmdet::dataset;
use lmdet::optim::{Adam, GroupRates};
use lmdet::params::{ParamGroup, ParamStore};
use lmdet::train::{dataset_loss, evaluate, evaluate_checkpoint, evaluate_predictions, train, METRICS_FILE, METRICS_HEADER};
use lmdet::{Error, Model, Precision, RunConfig, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_data(cfg: &RunConfig) -> Dataset {
    Dataset::generate(&cfg.data).unwrap()
}

fn probe_batch(cfg: &RunConfig, count: usize) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let shape = [cfg.model.in_channels, cfg.model.image_size, cfg.model.image_size];
    (0..count).map(|_| Tensor::from_fn(&shape, |_| rng.random_range(0.0..1.0))).collect()
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let mut cfg = small_run_config();
    cfg.apply_overrides(&["train.lr=0", "train.epochs=1", "train.lr_decay_epoch=0"]).unwrap();
    let data = small_data(&cfg);
    let untrained = Model::<f64>::new(&cfg.model, cfg.train.seed).unwrap();
    let outcome = train::<f64>(&cfg, &data, None).unwrap();
    assert_eq!(outcome.final_model.params(), untrained.params());
    let untrained_nme = evaluate(&untrained, &data.test, data.eye_indices).unwrap().nme_percent;
    assert_eq!(outcome.history[0].test_nme_percent, untrained_nme);
    assert_eq!(outcome.initial_test_nme_percent, untrained_nme);
}

#[test]
fn lr_history_decays_once_by_factor() {
    let mut cfg = small_run_config();
    cfg.apply_overrides(&["train.epochs=4", "train.lr_decay_epoch=3", "train.lr_decay_factor=10"]).unwrap();
    let outcome = train::<f32>(&cfg, &small_data(&cfg), None).unwrap();
    let lrs: Vec<f64> = outcome.history.iter().map(|r| r.lr).collect();
    assert_eq!(lrs, vec![1e-3, 1e-3, 1e-3, 1e-3 / 10.0]);
}

#[test]
fn same_seed_same_metrics_file() {
    let cfg = small_run_config();
    let data = small_data(&cfg);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        train::<f32>(&cfg, &data, Some(d.path())).unwrap();
    }
    let a = fs::read_to_string(dirs[0].path().join(METRICS_FILE)).unwrap();
    let b = fs::read_to_string(dirs[1].path().join(METRICS_FILE)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.lines().next(), Some(METRICS_HEADER));
    assert_eq!(a.lines().count(), 1 + cfg.train.epochs);

    let mut other = cfg.clone();
    other.train.seed = 1;
    let d = tempfile::tempdir().unwrap();
    train::<f32>(&other, &data, Some(d.path())).unwrap();
    assert_ne!(fs::read_to_string(d.path().join(METRICS_FILE)).unwrap(), a);
}

fn round_trip<T: Scalar>(cfg: &RunConfig) {
    let mut cfg = cfg.clone();
    cfg.train.precision = T::PRECISION;
    let outcome = train::<T>(&cfg, &small_data(&cfg), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    outcome.best.save(dir.path()).unwrap();
    assert_eq!(stored_precision(dir.path()).unwrap(), T::PRECISION);
    let loaded = Checkpoint::<T>::load(dir.path()).unwrap();
    assert_eq!(loaded.epoch, outcome.best.epoch);
    assert_eq!(loaded.history, outcome.best.history);
    assert_eq!(loaded.config, cfg);
    for img in probe_batch(&cfg, 4) {
        let img: Tensor<T> = img.cast();
        let a = outcome.best.model.predict(&img).unwrap();
        let b = loaded.model.predict(&img).unwrap();
        let bits = |t: &Tensor<T>| t.data().iter().map(|v| v.f64().to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let cfg = small_run_config();
    round_trip::<f32>(&cfg);
    round_trip::<f64>(&cfg);
}

#[test]
fn checkpoint_loads_at_other_precision() {
    let cfg = small_run_config();
    let outcome = train::<f64>(&cfg, &small_data(&cfg), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    outcome.best.save(dir.path()).unwrap();
    let narrowed = Checkpoint::<f32>::load(dir.path()).unwrap();
    let img = &probe_batch(&cfg, 1)[0];
    let a = outcome.best.model.predict(img).unwrap();
    let b = narrowed.model.predict(&img.cast::<f32>()).unwrap().cast::<f64>();
    assert!(a.max_abs_diff(&b).unwrap() < 1e-5);
}

#[test]
fn corrupt_checkpoint_rejected() {
    let cfg = small_run_config();
    let outcome = train::<f32>(&cfg, &small_data(&cfg), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    outcome.best.save(dir.path()).unwrap();
    let blob = dir.path().join("decoder.bin");
    let mut bytes = fs::read(&blob).unwrap();
    bytes.truncate(bytes.len() - 4);
    fs::write(&blob, bytes).unwrap();
    assert!(Checkpoint::<f32>::load(dir.path()).is_err());
}

#[test]
fn divergence_aborts_with_op_name() {
    let mut cfg = small_run_config();
    // the first step pushes the output layer past the f32 range
    cfg.apply_overrides(&["train.lr=1e300"]).unwrap();
    let Err(err) = train::<f32>(&cfg, &small_data(&cfg), None) else {
        panic!("training with an overflowing step did not abort");
    };
    let Error::NumericalAbort { op, epoch, .. } = &err else {
        panic!("expected a numerical abort, got {err}");
    };
    assert!(!op.is_empty());
    assert!(*epoch >= 1);
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains(op.as_str()));
}

/// Three Adam steps on `½‖x − c‖²`, stepped by hand.
#[test]
fn adam_matches_hand_steps() {
    let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.05);
    let c = [0.3, -1.2, 2.0];
    let mut x = vec![1.0, 0.5, -0.7];
    let mut store = ParamStore::<f64>::new();
    let id = store.add("x", ParamGroup::Head, Tensor::new(&[3], x.clone()).unwrap());
    let mut adam = Adam::new(&store, b1, b2, eps);
    let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
    for t in 1..=3 {
        let g: Vec<f64> = x.iter().zip(&c).map(|(a, b)| a - b).collect();
        adam.step(&mut store, &[Tensor::new(&[3], g.clone()).unwrap()], GroupRates::new(lr, 0.1)).unwrap();
        for i in 0..3 {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            x[i] -= lr * mh / (vh.sqrt() + eps);
        }
        for (got, want) in store.get(id).data().iter().zip(&x) {
            assert!((got - want).abs() < 1e-12, "step {t}: {got} vs {want}");
        }
    }
    assert_eq!(adam.steps(), 3);
}

#[test]
fn backbone_group_moves_a_tenth() {
    let mut store = ParamStore::<f64>::new();
    let bb = store.add("backbone.w", ParamGroup::Backbone, Tensor::zeros(&[4]));
    let hd = store.add("decoder.w", ParamGroup::Head, Tensor::zeros(&[4]));
    let mut adam = Adam::new(&store, 0.9, 0.999, 1e-8);
    let g = Tensor::new(&[4], vec![0.5, -2.0, 1e-3, 7.0]).unwrap();
    adam.step(&mut store, &[g.clone(), g], GroupRates::new(1e-2, 0.1)).unwrap();
    for (b, h) in store.get(bb).data().iter().zip(store.get(hd).data()) {
        assert!(*h != 0.0);
        assert!((b / h - 0.1).abs() < 1e-12, "{b} / {h}");
    }
}

#[test]
fn oracle_predictor_scores_zero_and_constant_is_close_to_untrained() {
    let cfg = RunConfig::default();
    let data = small_data(&cfg);
    let gt: Vec<LandmarkSet> = data.test.iter().map(|s| s.landmarks.clone()).collect();
    let oracle = evaluate_predictions(&gt, &data.test, data.eye_indices).unwrap();
    assert_eq!(oracle.nme_percent, 0.0);
    assert_eq!(oracle.excluded, 0);
    assert!(oracle.per_sample.iter().all(|v| *v == Some(0.0)));

    let n = cfg.data.num_landmarks;
    let centre = vec![LandmarkSet::constant(n, [0.5, 0.5]); data.test.len()];
    let constant = evaluate_predictions(&centre, &data.test, data.eye_indices).unwrap().nme_percent;
    let model = Model::<f32>::new(&cfg.model, 0).unwrap();
    let first = evaluate(&model, &data.test, data.eye_indices).unwrap();
    let second = evaluate(&model, &data.test, data.eye_indices).unwrap();
    assert_eq!(first, second);
    let ratio = first.nme_percent / constant;
    assert!((0.5..=2.0).contains(&ratio), "untrained {} vs constant {constant}", first.nme_percent);
}

#[test]
fn landmark_count_mismatch_is_a_config_error() {
    let cfg = small_run_config();
    let data = small_data(&cfg);
    let mut other = cfg.model.clone();
    other.num_landmarks = 9;
    let model = Model::<f32>::new(&other, 0).unwrap();
    let err = evaluate(&model, &data.test, data.eye_indices).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn first_epoch_lowers_training_loss() {
    // one epoch at the base rate (decay epoch 0 with factor 1)
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&["train.epochs=1", "train.lr_decay_epoch=0", "train.lr_decay_factor=1"]).unwrap();
    let data = small_data(&cfg);
    let (mut before, mut after) = (0.0, 0.0);
    for seed in 0..3 {
        let mut one = cfg.clone();
        one.train.seed = seed;
        let outcome = train::<f32>(&one, &data, None).unwrap();
        before += outcome.initial_train_loss;
        after += dataset_loss(&outcome.final_model, &data.train).unwrap();
    }
    assert!(after < before, "mean loss {} -> {}", before / 3.0, after / 3.0);
}

#[test]
fn dataset_export_import_round_trip() {
    let cfg = small_run_config();
    let data = small_data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    dataset::export(&data, &cfg.data, dir.path()).unwrap();
    let (read_cfg, read) = dataset::import(dir.path()).unwrap();
    assert_eq!(read_cfg, cfg.data);
    assert_eq!(read, data);

    let manifest = dir.path().join(dataset::MANIFEST);
    let text = fs::read_to_string(&manifest).unwrap();
    fs::write(&manifest, text.replace("data.noise = 0.02", "data.noise = 0.5")).unwrap();
    assert!(dataset::import(dir.path()).is_err());
}

#[test]
fn single_variant_grid_equals_direct_run() {
    let cfg = small_run_config();
    let grid = Grid::single("only", cfg.clone(), vec![3]);
    let dir = tempfile::tempdir().unwrap();
    let report = ablate(&grid, Some(dir.path()), |_| {}).unwrap();
    assert_eq!(report.rows.len(), 1);
    let row = &report.rows[0];

    let mut direct = cfg.clone();
    direct.train.seed = 3;
    let data = small_data(&direct);
    let outcome = train::<f32>(&direct, &data, None).unwrap();
    let eval = evaluate(&outcome.best.model, &data.test, data.eye_indices).unwrap();
    assert_eq!(row.nme_per_seed, vec![eval.nme_percent]);
    assert_eq!(row.nme_mean, eval.nme_percent);
    assert_eq!(row.param_count, outcome.best.model.param_count());

    // the stored checkpoint reproduces the row
    let ckpt = Checkpoint::<f32>::load(&dir.path().join("only").join("seed3").join("checkpoint")).unwrap();
    assert_eq!(evaluate_checkpoint(&ckpt, &direct.data).unwrap().nme_percent, row.nme_mean);
    assert!(dir.path().join(lmdet::ablate::REPORT_CSV).exists());
    assert!(dir.path().join(lmdet::ablate::REPORT_PLOT).exists());
    assert_eq!(cfg.train.precision, Precision::F32);
}
