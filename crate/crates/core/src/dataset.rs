//! On-disk dataset format.
//!
//! A dataset directory holds:
//!
//! * `manifest.txt`: `key = value` lines. Format keys first, then every
//!   `data.*` generation parameter, so the splits can be regenerated.
//! * `train.bin`, `test.bin`: back-to-back fixed-size records, one per
//!   sample, in split order. Each record is `c·H·W` little-endian `f32`
//!   pixels (channel-major, then rows, then columns) followed by `N` pairs of
//!   little-endian `f32` landmark coordinates `x, y` (normalized to `[0, 1]`).
//!   No header, no padding: `record_bytes = 4·(c·H·W + 2N)`. Generated
//!   landmarks are already `f32`-representable, so the round trip is exact.
//!
//! Sample seeds are not stored; they are re-derived from `data.seed`.

use std::fs;
use std::path::Path;

use crate::config::{parse_sections, render_entries, DataConfig, RunConfig};
use crate::data::{derive_seed, streams, Dataset, LandmarkSet, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";
const FORMAT: &str = "lmdet-dataset";
const VERSION: &str = "1";

fn pixel_count(cfg: &DataConfig) -> usize {
    cfg.in_channels * cfg.image_size * cfg.image_size
}

fn record_bytes(cfg: &DataConfig) -> usize {
    4 * (pixel_count(cfg) + 2 * cfg.num_landmarks)
}

/// Writes `ds` (generated from `cfg`) to `dir`, creating it if needed.
pub fn export(ds: &Dataset, cfg: &DataConfig, dir: &Path) -> Result<()> {
    if ds.train.len() != cfg.train_count || ds.test.len() != cfg.test_count {
        return Err(Error::Contract("dataset split sizes differ from its config".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (l, r) = ds.eye_indices;
    let mut header: Vec<(String, String)> = vec![
        ("format".into(), FORMAT.into()),
        ("version".into(), VERSION.into()),
        ("record_bytes".into(), record_bytes(cfg).to_string()),
        ("train_records".into(), ds.train.len().to_string()),
        ("test_records".into(), ds.test.len().to_string()),
        ("effective_eye_indices".into(), format!("{l},{r}")),
        ("config_hash".into(), cfg.hash()),
    ];
    let body = RunConfig {
        data: cfg.clone(),
        ..RunConfig::default()
    };
    header.extend(body.to_entries().into_iter().filter(|(k, _)| k.starts_with("data.")));
    let manifest = dir.join(MANIFEST);
    fs::write(&manifest, render_entries(&header)).map_err(|e| Error::io(&manifest, e))?;
    for (name, split) in [("train.bin", &ds.train), ("test.bin", &ds.test)] {
        let mut bytes = Vec::with_capacity(split.len() * record_bytes(cfg));
        for s in split {
            for v in s.image.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            for p in &s.landmarks.points {
                bytes.extend_from_slice(&(p[0] as f32).to_le_bytes());
                bytes.extend_from_slice(&(p[1] as f32).to_le_bytes());
            }
        }
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Reads a directory written by [`export`].
pub fn import(dir: &Path) -> Result<(DataConfig, Dataset)> {
    let manifest = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let source = manifest.display().to_string();
    let mut run = RunConfig::default();
    let mut meta = std::collections::HashMap::new();
    for section in parse_sections(&text, &source)? {
        let data_entries: Vec<_> = section.entries.iter().filter(|e| e.key.starts_with("data.")).cloned().collect();
        run.apply_entries(&data_entries, &source)?;
        for e in section.entries.iter().filter(|e| !e.key.starts_with("data.")) {
            meta.insert(e.key.clone(), e.value.clone());
        }
    }
    let get = |k: &str| {
        meta.get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::config(format!("{source}: missing `{k}`")))
    };
    if get("format")? != FORMAT || get("version")? != VERSION {
        return Err(Error::config(format!("{source}: not a version {VERSION} {FORMAT} manifest")));
    }
    let cfg = run.data;
    cfg.validate()?;
    if get("config_hash")? != cfg.hash() {
        return Err(Error::config(format!("{source}: config hash does not match the data parameters")));
    }
    let (pixels, record) = (pixel_count(&cfg), record_bytes(&cfg));
    let read_split = |name: &str, count: usize, stream: u64| -> Result<Vec<Sample>> {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != count * record {
            return Err(Error::config(format!(
                "{}: {} bytes, expected {count} records of {record} bytes",
                path.display(),
                bytes.len(),
            )));
        }
        bytes
            .chunks_exact(record)
            .enumerate()
            .map(|(i, rec)| {
                let (img, pts) = rec.split_at(4 * pixels);
                let image = img
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")))
                    .collect();
                let coords: Vec<f64> = pts
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")) as f64)
                    .collect();
                Ok(Sample {
                    image: Tensor::new(&[cfg.in_channels, cfg.image_size, cfg.image_size], image)?,
                    landmarks: LandmarkSet::new(coords.chunks_exact(2).map(|p| [p[0], p[1]]).collect()),
                    seed: derive_seed(cfg.seed, stream, i as u64),
                })
            })
            .collect()
    };
    let ds = Dataset {
        train: read_split("train.bin", cfg.train_count, streams::TRAIN)?,
        test: read_split("test.bin", cfg.test_count, streams::TEST)?,
        eye_indices: cfg.eyes(),
    };
    Ok((cfg, ds))
}
