//! Run configuration and its flat `key = value` text format.
//!
//! Keys carry a section prefix (`model.`, `data.`, `train.`). Lines starting
//! with `#` are comments. Grid files for ablations may additionally contain
//! `[name]` headers that open a named section of overrides.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Precision;

/// Which of the two equivalent query-aware memory computations to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QaMemVariant {
    /// Materializes one transformed memory per query.
    Naive,
    /// Transforms the extracted query embeddings with a grouped 1×1 conv.
    Efficient,
}

impl QaMemVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            QaMemVariant::Naive => "naive",
            QaMemVariant::Efficient => "efficient",
        }
    }
}

impl FromStr for QaMemVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "naive" => Ok(QaMemVariant::Naive),
            "efficient" => Ok(QaMemVariant::Efficient),
            other => Err(Error::config(format!(
                "unknown qamem variant `{other}` (expected naive or efficient)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Output channels of each stride-2 stage; the last entry is the memory
    /// dimension.
    pub stage_channels: Vec<usize>,
    pub stride: usize,
    pub out_dim: usize,
}

impl BackboneConfig {
    /// Default stage widths for a stride: doubling from 8, capped at and
    /// ending with `out_dim`.
    pub fn auto_stages(stride: usize, out_dim: usize) -> Vec<usize> {
        let stages = stride.trailing_zeros() as usize;
        let mut widths: Vec<usize> = (0..stages).map(|i| (8usize << i).min(out_dim)).collect();
        if let Some(last) = widths.last_mut() {
            *last = out_dim;
        }
        widths
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stride, 4 | 8 | 16 | 32) {
            return Err(Error::config(format!(
                "backbone stride {} must be one of 4, 8, 16, 32",
                self.stride
            )));
        }
        let stages = self.stride.trailing_zeros() as usize;
        if self.stage_channels.len() != stages {
            return Err(Error::config(format!(
                "stride {} needs {stages} stride-2 stages, got {} stage widths",
                self.stride,
                self.stage_channels.len()
            )));
        }
        if self.stage_channels.last() != Some(&self.out_dim) {
            return Err(Error::config(format!(
                "last stage width {:?} must equal the memory dimension {}",
                self.stage_channels.last(),
                self.out_dim
            )));
        }
        if self.in_channels == 0 || self.stage_channels.contains(&0) {
            return Err(Error::config("backbone channel counts must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub stride: usize,
    /// Explicit stage widths; `None` derives them from stride and hidden dim.
    pub stage_channels: Option<Vec<usize>>,
    pub num_landmarks: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub num_decoder_layers: usize,
    pub ffn_dim: usize,
    pub use_dqinit: bool,
    pub use_qamem: bool,
    pub qamem_variant: QaMemVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            in_channels: 1,
            stride: 16,
            stage_channels: None,
            num_landmarks: 12,
            hidden_dim: 64,
            num_heads: 4,
            num_decoder_layers: 1,
            ffn_dim: 256,
            use_dqinit: true,
            use_qamem: true,
            qamem_variant: QaMemVariant::Efficient,
        }
    }
}

impl ModelConfig {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            in_channels: self.in_channels,
            stage_channels: self
                .stage_channels
                .clone()
                .unwrap_or_else(|| BackboneConfig::auto_stages(self.stride, self.hidden_dim)),
            stride: self.stride,
            out_dim: self.hidden_dim,
        }
    }

    /// Memory side length `image_size / stride`.
    pub fn memory_side(&self) -> usize {
        self.image_size / self.stride
    }

    /// Number of memory positions `S = h·w`.
    pub fn memory_len(&self) -> usize {
        self.memory_side() * self.memory_side()
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone().validate()?;
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.stride) {
            return Err(Error::config(format!(
                "image size {} must be a positive multiple of stride {}",
                self.image_size, self.stride
            )));
        }
        if self.num_landmarks == 0 || self.hidden_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::config("landmarks, hidden and ffn dims must be positive"));
        }
        if self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "hidden dim {} not divisible by {} heads",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.num_decoder_layers == 0 {
            return Err(Error::config("at least one decoder layer is required"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugConfig {
    pub translate_prob: f64,
    /// Maximum shift as a fraction of the image side.
    pub translate_max: f64,
    pub flip_prob: f64,
    pub rotate_prob: f64,
    pub rotate_max_deg: f64,
    pub occlusion_prob: f64,
    pub blur_prob: f64,
    /// Landmark index correspondence under horizontal flip; `None` derives it
    /// from the face template when `flip_table_auto` is set.
    pub flip_table: Option<Vec<usize>>,
    pub flip_table_auto: bool,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            translate_prob: 0.5,
            translate_max: 0.1,
            flip_prob: 0.5,
            rotate_prob: 0.5,
            rotate_max_deg: 30.0,
            occlusion_prob: 0.4,
            blur_prob: 0.3,
            flip_table: None,
            flip_table_auto: true,
        }
    }
}

impl AugConfig {
    /// All probabilities zero.
    pub fn identity() -> Self {
        Self {
            translate_prob: 0.0,
            flip_prob: 0.0,
            rotate_prob: 0.0,
            occlusion_prob: 0.0,
            blur_prob: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub num_landmarks: usize,
    pub image_size: usize,
    pub in_channels: usize,
    pub train_count: usize,
    pub test_count: usize,
    /// `(left, right)` eye landmark indices; `None` uses the template's.
    pub eye_indices: Option<(usize, usize)>,
    pub head_rx: (f64, f64),
    pub head_ry: (f64, f64),
    pub center_jitter: f64,
    pub pose_max_deg: f64,
    pub jitter: f64,
    pub noise: f64,
    pub seed: u64,
    pub aug: AugConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_landmarks: 12,
            image_size: 64,
            in_channels: 1,
            train_count: 256,
            test_count: 64,
            eye_indices: None,
            head_rx: (0.22, 0.32),
            head_ry: (0.28, 0.38),
            center_jitter: 0.08,
            pose_max_deg: 15.0,
            jitter: 0.01,
            noise: 0.02,
            seed: 7,
            aug: AugConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_epoch: usize,
    pub backbone_lr_multiplier: f64,
    pub seed: u64,
    pub precision: Precision,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub augment: bool,
    /// Decoder dropout probability; zero disables it.
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 16,
            lr: 1e-4,
            lr_decay_factor: 10.0,
            lr_decay_epoch: 40,
            backbone_lr_multiplier: 0.1,
            seed: 0,
            precision: Precision::F32,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            augment: true,
            dropout: 0.0,
        }
    }
}

impl TrainConfig {
    // negated comparisons so NaN fails too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be positive"));
        }
        if self.lr_decay_epoch >= self.epochs {
            return Err(Error::config(format!(
                "lr decay epoch {} must be below the epoch count {}",
                self.lr_decay_epoch, self.epochs
            )));
        }
        // A zero learning rate is allowed so that a run can be a no-op probe.
        if !(self.lr >= 0.0) || !(self.lr_decay_factor > 0.0) || !(self.backbone_lr_multiplier >= 0.0) {
            return Err(Error::config("learning rates and decay factor must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::config("adam betas must lie in [0, 1) and eps be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Everything a training run needs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|p| parse::<usize>(key, p))
        .collect()
}

fn parse_range(key: &str, value: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = value.split(',').collect();
    match parts[..] {
        [a, b] => {
            let (lo, hi) = (parse::<f64>(key, a)?, parse::<f64>(key, b)?);
            if lo > hi {
                return Err(Error::config(format!("`{key}` range {lo},{hi} is reversed")));
            }
            Ok((lo, hi))
        }
        _ => Err(Error::config(format!("`{key}` needs `lo,hi`, got `{value}`"))),
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one `section.key` value. Setting `data.num_landmarks`,
    /// `data.image_size` or `data.in_channels` also updates the model, so a
    /// config file only has to state them once.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let d = &mut self.data;
        let t = &mut self.train;
        match key.trim() {
            "model.image_size" => m.image_size = parse(key, value)?,
            "model.in_channels" => m.in_channels = parse(key, value)?,
            "model.stride" => m.stride = parse(key, value)?,
            "model.stage_channels" => {
                m.stage_channels = match value.trim() {
                    "auto" => None,
                    v => Some(parse_list(key, v)?),
                }
            }
            "model.num_landmarks" => m.num_landmarks = parse(key, value)?,
            "model.hidden_dim" => m.hidden_dim = parse(key, value)?,
            "model.num_heads" => m.num_heads = parse(key, value)?,
            "model.num_decoder_layers" => m.num_decoder_layers = parse(key, value)?,
            "model.ffn_dim" => m.ffn_dim = parse(key, value)?,
            "model.use_dqinit" => m.use_dqinit = parse_bool(key, value)?,
            "model.use_qamem" => m.use_qamem = parse_bool(key, value)?,
            "model.qamem_variant" => m.qamem_variant = value.parse()?,

            "data.num_landmarks" => {
                d.num_landmarks = parse(key, value)?;
                m.num_landmarks = d.num_landmarks;
            }
            "data.image_size" => {
                d.image_size = parse(key, value)?;
                m.image_size = d.image_size;
            }
            "data.in_channels" => {
                d.in_channels = parse(key, value)?;
                m.in_channels = d.in_channels;
            }
            "data.train_count" => d.train_count = parse(key, value)?,
            "data.test_count" => d.test_count = parse(key, value)?,
            "data.eye_indices" => {
                d.eye_indices = match value.trim() {
                    "auto" => None,
                    v => match parse_list(key, v)?[..] {
                        [l, r] => Some((l, r)),
                        _ => return Err(Error::config("`data.eye_indices` needs `left,right`")),
                    },
                }
            }
            "data.head_rx" => d.head_rx = parse_range(key, value)?,
            "data.head_ry" => d.head_ry = parse_range(key, value)?,
            "data.center_jitter" => d.center_jitter = parse(key, value)?,
            "data.pose_max_deg" => d.pose_max_deg = parse(key, value)?,
            "data.jitter" => d.jitter = parse(key, value)?,
            "data.noise" => d.noise = parse(key, value)?,
            "data.seed" => d.seed = parse(key, value)?,
            "data.aug.translate_prob" => d.aug.translate_prob = parse(key, value)?,
            "data.aug.translate_max" => d.aug.translate_max = parse(key, value)?,
            "data.aug.flip_prob" => d.aug.flip_prob = parse(key, value)?,
            "data.aug.rotate_prob" => d.aug.rotate_prob = parse(key, value)?,
            "data.aug.rotate_max_deg" => d.aug.rotate_max_deg = parse(key, value)?,
            "data.aug.occlusion_prob" => d.aug.occlusion_prob = parse(key, value)?,
            "data.aug.blur_prob" => d.aug.blur_prob = parse(key, value)?,
            "data.aug.flip_table" => match value.trim() {
                "auto" => {
                    d.aug.flip_table = None;
                    d.aug.flip_table_auto = true;
                }
                "none" => {
                    d.aug.flip_table = None;
                    d.aug.flip_table_auto = false;
                }
                v => {
                    d.aug.flip_table = Some(parse_list(key, v)?);
                    d.aug.flip_table_auto = false;
                }
            },

            "train.epochs" => t.epochs = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.lr_decay_factor" => t.lr_decay_factor = parse(key, value)?,
            "train.lr_decay_epoch" => t.lr_decay_epoch = parse(key, value)?,
            "train.backbone_lr_multiplier" => t.backbone_lr_multiplier = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.precision" => t.precision = value.parse()?,
            "train.beta1" => t.beta1 = parse(key, value)?,
            "train.beta2" => t.beta2 = parse(key, value)?,
            "train.adam_eps" => t.adam_eps = parse(key, value)?,
            "train.augment" => t.augment = parse_bool(key, value)?,
            "train.dropout" => t.dropout = parse(key, value)?,
            other => return Err(Error::config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` override strings.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override `{}` is not key=value", o.as_ref())))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.model.num_landmarks != self.data.num_landmarks
            || self.model.image_size != self.data.image_size
            || self.model.in_channels != self.data.in_channels
        {
            return Err(Error::config(format!(
                "model (N={}, {}px, {}ch) does not match data (N={}, {}px, {}ch)",
                self.model.num_landmarks,
                self.model.image_size,
                self.model.in_channels,
                self.data.num_landmarks,
                self.data.image_size,
                self.data.in_channels
            )));
        }
        Ok(())
    }

    pub fn from_text(text: &str, source_name: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for section in parse_sections(text, source_name)? {
            if let Some(name) = &section.name {
                return Err(Error::Parse {
                    source_name: source_name.into(),
                    line: section.line,
                    detail: format!("unexpected section `[{name}]` in a run config"),
                });
            }
            cfg.apply_entries(&section.entries, source_name)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }

    pub(crate) fn apply_entries(&mut self, entries: &[Entry], source_name: &str) -> Result<()> {
        for e in entries {
            self.set(&e.key, &e.value).map_err(|err| match err {
                Error::Config(detail) => Error::Parse {
                    source_name: source_name.into(),
                    line: e.line,
                    detail,
                },
                other => other,
            })?;
        }
        Ok(())
    }

    /// Canonical key/value listing; feeding it back through [`RunConfig::set`]
    /// reproduces `self`.
    pub fn to_entries(&self) -> Vec<(String, String)> {
        let (m, d, t) = (&self.model, &self.data, &self.train);
        let mut kv: Vec<(&str, String)> = vec![
            ("model.image_size", m.image_size.to_string()),
            ("model.in_channels", m.in_channels.to_string()),
            ("model.stride", m.stride.to_string()),
            (
                "model.stage_channels",
                m.stage_channels.as_deref().map_or("auto".into(), join),
            ),
            ("model.num_landmarks", m.num_landmarks.to_string()),
            ("model.hidden_dim", m.hidden_dim.to_string()),
            ("model.num_heads", m.num_heads.to_string()),
            ("model.num_decoder_layers", m.num_decoder_layers.to_string()),
            ("model.ffn_dim", m.ffn_dim.to_string()),
            ("model.use_dqinit", m.use_dqinit.to_string()),
            ("model.use_qamem", m.use_qamem.to_string()),
            ("model.qamem_variant", m.qamem_variant.as_str().into()),
        ];
        kv.extend(data_entries(d));
        kv.extend([
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.lr_decay_factor", t.lr_decay_factor.to_string()),
            ("train.lr_decay_epoch", t.lr_decay_epoch.to_string()),
            ("train.backbone_lr_multiplier", t.backbone_lr_multiplier.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.precision", t.precision.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.adam_eps", t.adam_eps.to_string()),
            ("train.augment", t.augment.to_string()),
            ("train.dropout", t.dropout.to_string()),
        ]);
        kv.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        render_entries(&self.to_entries())
    }
}

fn data_entries(d: &DataConfig) -> Vec<(&'static str, String)> {
    vec![
        ("data.num_landmarks", d.num_landmarks.to_string()),
        ("data.image_size", d.image_size.to_string()),
        ("data.in_channels", d.in_channels.to_string()),
        ("data.train_count", d.train_count.to_string()),
        ("data.test_count", d.test_count.to_string()),
        (
            "data.eye_indices",
            d.eye_indices.map_or("auto".into(), |(l, r)| format!("{l},{r}")),
        ),
        ("data.head_rx", format!("{},{}", d.head_rx.0, d.head_rx.1)),
        ("data.head_ry", format!("{},{}", d.head_ry.0, d.head_ry.1)),
        ("data.center_jitter", d.center_jitter.to_string()),
        ("data.pose_max_deg", d.pose_max_deg.to_string()),
        ("data.jitter", d.jitter.to_string()),
        ("data.noise", d.noise.to_string()),
        ("data.seed", d.seed.to_string()),
        ("data.aug.translate_prob", d.aug.translate_prob.to_string()),
        ("data.aug.translate_max", d.aug.translate_max.to_string()),
        ("data.aug.flip_prob", d.aug.flip_prob.to_string()),
        ("data.aug.rotate_prob", d.aug.rotate_prob.to_string()),
        ("data.aug.rotate_max_deg", d.aug.rotate_max_deg.to_string()),
        ("data.aug.occlusion_prob", d.aug.occlusion_prob.to_string()),
        ("data.aug.blur_prob", d.aug.blur_prob.to_string()),
        (
            "data.aug.flip_table",
            match (&d.aug.flip_table, d.aug.flip_table_auto) {
                (Some(t), _) => join(t),
                (None, true) => "auto".into(),
                (None, false) => "none".into(),
            },
        ),
    ]
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_landmarks < crate::data::MIN_LANDMARKS {
            return Err(Error::config(format!(
                "{} landmarks is below the face template minimum of {}",
                self.num_landmarks,
                crate::data::MIN_LANDMARKS
            )));
        }
        if self.image_size < 8 || self.in_channels == 0 {
            return Err(Error::config("image size must be at least 8 and channels positive"));
        }
        let (l, r) = self.eyes();
        if l == r || l >= self.num_landmarks || r >= self.num_landmarks {
            return Err(Error::config(format!(
                "eye indices ({l}, {r}) must be distinct and below {}",
                self.num_landmarks
            )));
        }
        let probs = [
            self.aug.translate_prob,
            self.aug.flip_prob,
            self.aug.rotate_prob,
            self.aug.occlusion_prob,
            self.aug.blur_prob,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::config("augmentation probabilities must lie in [0, 1]"));
        }
        if self.noise < 0.0 || self.jitter < 0.0 || self.center_jitter < 0.0 {
            return Err(Error::config("noise and jitter scales must be non-negative"));
        }
        Ok(())
    }

    /// Effective `(left, right)` eye indices.
    pub fn eyes(&self) -> (usize, usize) {
        self.eye_indices
            .unwrap_or_else(|| crate::data::FaceTemplate::new(self.num_landmarks).eye_indices())
    }

    /// Canonical text of the data-generation parameters.
    pub fn canonical_text(&self) -> String {
        render_entries(
            &data_entries(self)
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect::<Vec<_>>(),
        )
    }

    /// Hex SHA-256 of [`DataConfig::canonical_text`].
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

pub(crate) fn render_entries(entries: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in entries {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}

#[derive(Debug, Clone)]
pub(crate) struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Section {
    pub name: Option<String>,
    pub line: usize,
    pub entries: Vec<Entry>,
}

/// Splits `key = value` text into the unnamed leading section and any
/// `[name]` sections that follow.
pub(crate) fn parse_sections(text: &str, source_name: &str) -> Result<Vec<Section>> {
    let mut sections = vec![Section {
        name: None,
        line: 0,
        entries: Vec::new(),
    }];
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            sections.push(Section {
                name: Some(name.trim().to_string()),
                line,
                entries: Vec::new(),
            });
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
            source_name: source_name.into(),
            line,
            detail: format!("expected `key = value`, got `{content}`"),
        })?;
        sections
            .last_mut()
            .expect("at least one section")
            .entries
            .push(Entry {
                key: key.trim().to_string(),
                value: value.trim().to_string(),
                line,
            });
    }
    Ok(sections)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("model.stride", "8").unwrap();
        cfg.set("data.eye_indices", "9,8").unwrap();
        cfg.set("data.aug.flip_table", "none").unwrap();
        cfg.set("train.lr", "0.0003").unwrap();
        let back = RunConfig::from_text(&cfg.to_text(), "mem").unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn data_keys_propagate_to_model() {
        let cfg = RunConfig::from_text("data.num_landmarks = 20\ndata.image_size=32\n", "mem").unwrap();
        assert_eq!(cfg.model.num_landmarks, 20);
        assert_eq!(cfg.model.image_size, 32);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = RunConfig::from_text("# c\nmodel.stride = 16\nmodel.bogus = 1\n", "f.cfg").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn stride_must_be_supported() {
        let mut cfg = RunConfig::default();
        cfg.model.stride = 2;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.model.stride = 64;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn decay_epoch_must_precede_end() {
        let mut t = TrainConfig::default();
        t.lr_decay_epoch = t.epochs;
        assert!(t.validate().is_err());
    }

    #[test]
    fn auto_stages_end_at_out_dim() {
        assert_eq!(BackboneConfig::auto_stages(16, 64), vec![8, 16, 32, 64]);
        assert_eq!(BackboneConfig::auto_stages(4, 256), vec![8, 256]);
        assert_eq!(BackboneConfig::auto_stages(32, 16), vec![8, 16, 16, 16, 16]);
    }
}
