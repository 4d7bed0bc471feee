//! Training loop and evaluation.
//!
//! One epoch visits the training split once in a seeded random order, in
//! minibatches of `train.batch_size` (the last one may be short). Each sample
//! is optionally augmented with a per-(epoch, sample) seed; sample gradients
//! of the L1 loss are averaged over the batch and applied with Adam. After
//! every epoch the test split is scored. Every random draw comes from a seed
//! derived from `train.seed`, so a run is a pure function of its config.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{DataConfig, RunConfig};
use crate::data::{augment, derive_seed, streams, Dataset, LandmarkSet, Sample};
use crate::error::{Error, Result};
use crate::metrics::{l1_loss, l1_loss_var, summarize_nme};
use crate::model::Model;
use crate::optim::{Adam, GroupRates, StepSchedule};
use crate::params::Bound;
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "epoch,train_loss,test_nme_percent,lr";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// One row of the metrics file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean minibatch loss over the epoch, measured before each update.
    pub train_loss: f64,
    pub test_nme_percent: f64,
    /// Head learning rate used during the epoch.
    pub lr: f64,
}

pub fn metrics_csv(history: &[EpochRecord]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in history {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.test_nme_percent, r.lr));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub nme_percent: f64,
    /// Per test sample, `None` where the normalization was degenerate.
    pub per_sample: Vec<Option<f64>>,
    pub excluded: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters from the epoch with the lowest test NME (earliest on ties).
    pub best: Checkpoint<T>,
    pub final_model: Model<T>,
    pub history: Vec<EpochRecord>,
    /// Un-augmented training-split loss before the first update.
    pub initial_train_loss: f64,
    pub initial_test_nme_percent: f64,
}

fn check_shapes<T: Scalar>(model: &Model<T>, data: &DataConfig) -> Result<()> {
    let m = model.config();
    if m.num_landmarks != data.num_landmarks || m.image_size != data.image_size || m.in_channels != data.in_channels {
        return Err(Error::config(format!(
            "model (N={}, {}px, {}ch) does not match data (N={}, {}px, {}ch)",
            m.num_landmarks, m.image_size, m.in_channels, data.num_landmarks, data.image_size, data.in_channels
        )));
    }
    Ok(())
}

pub fn predict_all<T: Scalar>(model: &Model<T>, samples: &[Sample]) -> Result<Vec<LandmarkSet>> {
    samples
        .iter()
        .map(|s| LandmarkSet::from_tensor(&model.predict(&s.image.cast())?))
        .collect()
}

/// Scores `model` on `samples`.
pub fn evaluate<T: Scalar>(model: &Model<T>, samples: &[Sample], eyes: (usize, usize)) -> Result<Evaluation> {
    let n = model.config().num_landmarks;
    if let Some(s) = samples.iter().find(|s| s.landmarks.len() != n) {
        return Err(Error::config(format!(
            "model predicts {n} landmarks, data has {}",
            s.landmarks.len()
        )));
    }
    let preds = predict_all(model, samples)?;
    evaluate_predictions(&preds, samples, eyes)
}

pub fn evaluate_predictions(preds: &[LandmarkSet], samples: &[Sample], eyes: (usize, usize)) -> Result<Evaluation> {
    let s = summarize_nme(preds.iter().zip(samples.iter().map(|s| &s.landmarks)), eyes)?;
    Ok(Evaluation {
        nme_percent: s.nme_percent,
        per_sample: s.per_sample,
        excluded: s.excluded,
    })
}

/// Scores a checkpoint on the test split generated from `data`.
pub fn evaluate_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, data: &DataConfig) -> Result<Evaluation> {
    check_shapes(&ckpt.model, data)?;
    let ds = Dataset::generate(data)?;
    evaluate(&ckpt.model, &ds.test, ds.eye_indices)
}

/// Mean L1 loss of `model` over `samples`, without augmentation.
pub fn dataset_loss<T: Scalar>(model: &Model<T>, samples: &[Sample]) -> Result<f64> {
    let preds = predict_all(model, samples)?;
    let mut total = 0.0;
    for (p, s) in preds.iter().zip(samples) {
        total += l1_loss(p, &s.landmarks)?;
    }
    Ok(total / samples.len().max(1) as f64)
}

fn abort<T: Scalar>(tape: &Tape<T>, bound: &Bound, model: &Model<T>, epoch: usize, step: usize) -> Error {
    let (node, op) = tape.first_non_finite().unwrap_or((tape.len().saturating_sub(1), "backward"));
    let op = match bound.position(node).and_then(|i| model.params().iter().nth(i)) {
        Some(p) => format!("parameter `{}`", p.name),
        None if op == "leaf" => "input image".to_string(),
        None => format!("op `{op}`"),
    };
    Error::NumericalAbort { epoch, step, node, op }
}

/// Loss and parameter gradients for one sample.
fn sample_gradients<T: Scalar>(
    model: &Model<T>,
    sample: &Sample,
    dropout: Option<(f64, u64)>,
    epoch: usize,
    step: usize,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, true);
    let x = tape.constant(sample.image.cast());
    let pass = model.forward(&mut tape, &bound, x, dropout)?;
    let gt = tape.constant(sample.landmarks.to_tensor());
    let loss = l1_loss_var(&mut tape, pass.landmarks, gt)?;
    let value = tape.value(loss).item()?.f64();
    if !value.is_finite() {
        return Err(abort(&tape, &bound, model, epoch, step));
    }
    let mut grads = tape.backward(loss)?;
    let grads = bound.gradients(model.params(), &mut grads);
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NumericalAbort {
            epoch,
            step,
            node: tape.len(),
            op: "backward pass".into(),
        });
    }
    Ok((value, grads))
}

/// Builds a model from `cfg.model` seeded by `cfg.train.seed` and trains it.
pub fn train<T: Scalar>(cfg: &RunConfig, data: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let model = Model::new(&cfg.model, cfg.train.seed)?;
    train_model(model, cfg, data, out_dir)
}

/// Trains `model` in place of a freshly initialized one. With `out_dir`, the
/// metrics file, the resolved config and the best checkpoint are written
/// there.
pub fn train_model<T: Scalar>(
    mut model: Model<T>,
    cfg: &RunConfig,
    data: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    check_shapes(&model, &cfg.data)?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::config("training needs non-empty train and test splits"));
    }
    let tc = &cfg.train;
    let eyes = data.eye_indices;
    let schedule = StepSchedule::from_config(tc);
    let mut adam = Adam::from_config(model.params(), tc);

    let initial_train_loss = dataset_loss(&model, &data.train)?;
    let initial_test_nme_percent = evaluate(&model, &data.test, eyes)?.nme_percent;

    let mut history = Vec::with_capacity(tc.epochs);
    let mut best: Option<(f64, usize, Model<T>)> = None;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 0..tc.epochs {
        let lr = schedule.lr(epoch);
        let rates = GroupRates::new(lr, tc.backbone_lr_multiplier);
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, streams::SHUFFLE, epoch as u64)));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(tc.batch_size) {
            let mut acc: Option<Vec<Tensor<T>>> = None;
            let mut batch_loss = 0.0;
            for &idx in batch {
                let visit = (epoch * data.train.len() + idx) as u64;
                let augmented;
                let sample = if tc.augment {
                    augmented = augment(&data.train[idx], &cfg.data.aug, derive_seed(tc.seed, streams::AUGMENT, visit))?;
                    &augmented
                } else {
                    &data.train[idx]
                };
                let dropout = (tc.dropout > 0.0).then(|| (tc.dropout, derive_seed(tc.seed, streams::DROPOUT, visit)));
                let (loss, grads) = sample_gradients(&model, sample, dropout, epoch + 1, step)?;
                batch_loss += loss;
                match &mut acc {
                    None => acc = Some(grads),
                    Some(total) => {
                        for (t, g) in total.iter_mut().zip(&grads) {
                            t.add_assign(g)?;
                        }
                    }
                }
            }
            let scale = T::of(1.0 / batch.len() as f64);
            let grads: Vec<Tensor<T>> = acc
                .expect("non-empty batch")
                .into_iter()
                .map(|g| g.map(|v| v * scale))
                .collect();
            adam.step(model.params_mut(), &grads, rates)?;
            loss_sum += batch_loss / batch.len() as f64;
            batches += 1;
            step += 1;
        }
        let test = evaluate(&model, &data.test, eyes)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / batches as f64,
            test_nme_percent: test.nme_percent,
            lr,
        };
        history.push(record);
        if best.as_ref().is_none_or(|(nme, _, _)| test.nme_percent < *nme) {
            best = Some((test.nme_percent, epoch + 1, model.clone()));
        }
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    let outcome = TrainOutcome {
        best: Checkpoint {
            config: cfg.clone(),
            epoch: best_epoch,
            history: history.clone(),
            model: best_model,
        },
        final_model: model,
        history,
        initial_train_loss,
        initial_test_nme_percent,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let metrics = dir.join(METRICS_FILE);
        fs::write(&metrics, metrics_csv(&outcome.history)).map_err(|e| Error::io(&metrics, e))?;
        let config = dir.join("config.txt");
        fs::write(&config, cfg.to_text()).map_err(|e| Error::io(&config, e))?;
        outcome.best.save(&dir.join(CHECKPOINT_DIR))?;
    }
    Ok(outcome)
}
