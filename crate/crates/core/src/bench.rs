//! Throughput measurement.
//!
//! A measurement runs `warmup` untimed batches, then `runs` timed batches of
//! `batch` images each and reports the median images/sec over the timed
//! batches.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::QaMemVariant;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::qamem::{extract_efficient, extract_naive, flop_estimate, AttentionWeights, QaMemParams};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchSettings {
    pub batch: usize,
    pub warmup: usize,
    pub runs: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            batch: 16,
            warmup: 2,
            runs: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Throughput {
    pub variant: QaMemVariant,
    /// Median over timed runs.
    pub images_per_sec: f64,
    pub per_run: Vec<f64>,
    pub settings: BenchSettings,
    /// QAMem multiply-adds per image per decoder layer, from
    /// [`flop_estimate`].
    pub flop_estimate: u64,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

fn measure(settings: BenchSettings, mut batch: impl FnMut() -> Result<()>) -> Result<Vec<f64>> {
    if settings.batch == 0 || settings.runs == 0 {
        return Err(Error::config("bench batch size and run count must be positive"));
    }
    for _ in 0..settings.warmup {
        batch()?;
    }
    let mut out = Vec::with_capacity(settings.runs);
    for _ in 0..settings.runs {
        let start = Instant::now();
        batch()?;
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        out.push(settings.batch as f64 / secs);
    }
    Ok(out)
}

/// Full-model inference throughput with the given QAMem variant.
pub fn bench_model<T: Scalar>(model: &Model<T>, variant: QaMemVariant, settings: BenchSettings, seed: u64) -> Result<Throughput> {
    let mut model = model.clone();
    model.set_qamem_variant(variant);
    let cfg = model.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [cfg.in_channels, cfg.image_size, cfg.image_size];
    let images: Vec<Tensor<T>> = (0..settings.batch)
        .map(|_| Tensor::from_fn(&shape, |_| T::of(rng.random::<f64>())))
        .collect();
    let per_run = measure(settings, || {
        for img in &images {
            std::hint::black_box(model.predict(img)?);
        }
        Ok(())
    })?;
    Ok(Throughput {
        variant,
        images_per_sec: median(&per_run),
        per_run,
        settings,
        flop_estimate: flop_estimate(cfg.num_landmarks as u64, cfg.memory_len() as u64, cfg.hidden_dim as u64, variant),
    })
}

/// Throughput of the value-extraction step alone on random `N×S` attention
/// and `S×d` memory, one instance per image.
pub fn bench_extraction(n: usize, s: usize, d: usize, variant: QaMemVariant, settings: BenchSettings, seed: u64) -> Result<Throughput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instances = Vec::with_capacity(settings.batch);
    for _ in 0..settings.batch {
        let raw = Tensor::<f64>::from_fn(&[n, s], |_| rng.random::<f64>());
        let weights = AttentionWeights::single(crate::kernels::softmax_rows(&raw)?);
        let memory = Tensor::<f64>::from_fn(&[s, d], |_| rng.random_range(-1.0..1.0));
        instances.push((weights, memory));
    }
    let transforms: Vec<Tensor<f64>> = (0..n)
        .map(|_| Tensor::from_fn(&[d, d], |_| rng.random_range(-0.1..0.1)))
        .collect();
    let params = QaMemParams::pack(&transforms)?;
    let per_run = measure(settings, || {
        for (w, m) in &instances {
            let out = match variant {
                QaMemVariant::Naive => extract_naive(w, m, &params)?,
                QaMemVariant::Efficient => extract_efficient(w, m, &params)?,
            };
            std::hint::black_box(out);
        }
        Ok(())
    })?;
    Ok(Throughput {
        variant,
        images_per_sec: median(&per_run),
        per_run,
        settings,
        flop_estimate: flop_estimate(n as u64, s as u64, d as u64, variant),
    })
}
