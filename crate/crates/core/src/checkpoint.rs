//! Checkpoint directories.
//!
//! Layout:
//!
//! * `manifest.txt`: `key = value` lines:
//!   - `format = lmdet-checkpoint`, `version = 1`
//!   - `precision = f32|f64`: width of every stored float
//!   - `epoch`: the epoch (1-based) the parameters come from; 0 means untrained
//!   - `history.<epoch> = train_loss,test_nme_percent,lr`, one per logged epoch
//!   - `param.<name> = <blob>,<offset>,<d0>x<d1>x...`: offset counted in
//!     elements from the start of the blob
//!   - every `model.*`, `data.*` and `train.*` run-config key
//! * one blob per module (`backbone.bin`, `dqinit.bin`, `decoder.bin`,
//!   `qamem.bin`): that module's parameters concatenated in manifest order,
//!   as little-endian floats of the manifest precision.
//!
//! Blobs are written at the model's own precision, so a save/load round trip
//! reproduces parameters (and forward outputs) bitwise.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::{parse_sections, render_entries, RunConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Precision, Scalar};
use crate::train::EpochRecord;

pub const MANIFEST: &str = "manifest.txt";
const FORMAT: &str = "lmdet-checkpoint";
const VERSION: &str = "1";

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub config: RunConfig,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub model: Model<T>,
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(ToString::to_string).collect::<Vec<_>>().join("x")
}

/// Precision a checkpoint directory was saved at.
pub fn stored_precision(dir: &Path) -> Result<Precision> {
    let manifest = read_manifest(dir)?;
    manifest
        .meta
        .get("precision")
        .ok_or_else(|| Error::config(format!("{}: missing `precision`", manifest.source)))?
        .parse()
}

struct Manifest {
    source: String,
    meta: BTreeMap<String, String>,
    params: BTreeMap<String, String>,
    history: Vec<(usize, String)>,
    config: RunConfig,
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let source = path.display().to_string();
    let mut m = Manifest {
        source: source.clone(),
        meta: BTreeMap::new(),
        params: BTreeMap::new(),
        history: Vec::new(),
        config: RunConfig::default(),
    };
    for section in parse_sections(&text, &source)? {
        let mut cfg_entries = Vec::new();
        for e in section.entries {
            if let Some(name) = e.key.strip_prefix("param.") {
                m.params.insert(name.to_string(), e.value);
            } else if let Some(epoch) = e.key.strip_prefix("history.") {
                let epoch = epoch.parse().map_err(|_| Error::Parse {
                    source_name: source.clone(),
                    line: e.line,
                    detail: format!("bad history key `{}`", e.key),
                })?;
                m.history.push((epoch, e.value));
            } else if ["model.", "data.", "train."].iter().any(|p| e.key.starts_with(p)) {
                cfg_entries.push(e);
            } else {
                m.meta.insert(e.key, e.value);
            }
        }
        m.config.apply_entries(&cfg_entries, &source)?;
    }
    if m.meta.get("format").map(String::as_str) != Some(FORMAT) || m.meta.get("version").map(String::as_str) != Some(VERSION) {
        return Err(Error::config(format!("{source}: not a version {VERSION} {FORMAT} manifest")));
    }
    Ok(m)
}

impl<T: Scalar> Checkpoint<T> {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries: Vec<(String, String)> = vec![
            ("format".into(), FORMAT.into()),
            ("version".into(), VERSION.into()),
            ("precision".into(), T::PRECISION.to_string()),
            ("epoch".into(), self.epoch.to_string()),
        ];
        for r in &self.history {
            entries.push((
                format!("history.{}", r.epoch),
                format!("{},{},{}", r.train_loss, r.test_nme_percent, r.lr),
            ));
        }
        let mut blobs: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        for p in self.model.params().iter() {
            let blob_name = format!("{}.bin", p.module());
            let blob = blobs.entry(blob_name.clone()).or_default();
            let offset = blob.len() / T::PRECISION.byte_width();
            for v in p.value.data() {
                v.write_le(blob);
            }
            entries.push((
                format!("param.{}", p.name),
                format!("{blob_name},{offset},{}", shape_text(p.value.shape())),
            ));
        }
        entries.extend(self.config.to_entries());
        let manifest = dir.join(MANIFEST);
        fs::write(&manifest, render_entries(&entries)).map_err(|e| Error::io(&manifest, e))?;
        for (name, bytes) in blobs {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Loads a checkpoint, converting stored floats to `T` if the precisions
    /// differ.
    pub fn load(dir: &Path) -> Result<Self> {
        let m = read_manifest(dir)?;
        let src = &m.source;
        let precision: Precision = m
            .meta
            .get("precision")
            .ok_or_else(|| Error::config(format!("{src}: missing `precision`")))?
            .parse()?;
        let epoch = m
            .meta
            .get("epoch")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::config(format!("{src}: missing or bad `epoch`")))?;
        let mut history = Vec::new();
        for (epoch, value) in &m.history {
            let f: Vec<f64> = value
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::config(format!("{src}: bad history entry `{value}`")))?;
            let [train_loss, test_nme_percent, lr] = f[..] else {
                return Err(Error::config(format!("{src}: bad history entry `{value}`")));
            };
            history.push(EpochRecord {
                epoch: *epoch,
                train_loss,
                test_nme_percent,
                lr,
            });
        }
        history.sort_by_key(|r| r.epoch);
        let config = m.config;
        let mut model = Model::<T>::new(&config.model, 0)?;
        let width = precision.byte_width();
        let mut blobs: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        let mut used: BTreeMap<String, usize> = BTreeMap::new();
        for p in model.params_mut().iter_mut() {
            let spec = m
                .params
                .get(&p.name)
                .ok_or_else(|| Error::config(format!("{src}: no entry for parameter `{}`", p.name)))?;
            let bad = || Error::config(format!("{src}: bad entry for `{}`: `{spec}`", p.name));
            let mut parts = spec.split(',');
            let (Some(blob), Some(offset), Some(shape), None) = (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(bad());
            };
            let offset: usize = offset.trim().parse().map_err(|_| bad())?;
            let shape: Vec<usize> = shape
                .trim()
                .split('x')
                .map(|d| d.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad())?;
            if shape != p.value.shape() {
                return Err(Error::config(format!(
                    "{src}: parameter `{}` stored as {shape:?}, model expects {:?}",
                    p.name,
                    p.value.shape()
                )));
            }
            let blob = blob.trim().to_string();
            if !blobs.contains_key(&blob) {
                let path = dir.join(&blob);
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                blobs.insert(blob.clone(), bytes);
            }
            let bytes = &blobs[&blob];
            let n = p.value.len();
            let range = offset * width..(offset + n) * width;
            let chunk = bytes.get(range).ok_or_else(|| {
                Error::config(format!("{src}: parameter `{}` runs past the end of `{blob}`", p.name))
            })?;
            for (dst, raw) in p.value.data_mut().iter_mut().zip(chunk.chunks_exact(width)) {
                *dst = match precision {
                    Precision::F32 => T::of(f32::read_le(raw) as f64),
                    Precision::F64 => T::of(f64::read_le(raw)),
                };
            }
            *used.entry(blob).or_default() += n * width;
        }
        if m.params.len() != model.params().len() {
            return Err(Error::config(format!(
                "{src}: manifest lists {} parameters, model has {}",
                m.params.len(),
                model.params().len()
            )));
        }
        for (blob, bytes) in &blobs {
            if used[blob] != bytes.len() {
                return Err(Error::config(format!("{src}: `{blob}` has unreferenced bytes")));
            }
        }
        Ok(Self {
            config,
            epoch,
            history,
            model,
        })
    }
}
