//! Small convolutional feature extractor producing the decoder memory.
//!
//! Each stage is a 3×3 stride-2 convolution followed by layer norm over the
//! channel axis and a ReLU. The number of stages is `log2(stride)`. Inputs
//! are zero-padded by one pixel on the top and left only, which makes every
//! stage halve an even extent exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::BackboneConfig;
use crate::error::{Error, Result};
use crate::params::{he_bound, uniform, Bound, ParamGroup, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

const KERNEL: usize = 3;

#[derive(Debug, Clone)]
struct Stage {
    in_channels: usize,
    out_channels: usize,
    kernel: ParamId,
    bias: ParamId,
    ln_gamma: ParamId,
    ln_beta: ParamId,
}

/// Backbone output on a tape.
#[derive(Debug, Clone, Copy)]
pub struct Memory {
    /// `d×h×w` feature grid.
    pub features: Var,
    /// `S×d` view with rows in row-major `(y, x)` order.
    pub flat: Var,
    pub dim: usize,
    pub h: usize,
    pub w: usize,
}

impl Memory {
    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    stages: Vec<Stage>,
}

impl Backbone {
    /// Registers the backbone parameters in `store`: He-uniform kernels,
    /// zero biases, unit/zero layer-norm affine.
    pub fn build<T: Scalar>(
        cfg: &BackboneConfig,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(cfg.stage_channels.len());
        let mut c_in = cfg.in_channels;
        for (i, &c_out) in cfg.stage_channels.iter().enumerate() {
            let fan_in = c_in * KERNEL * KERNEL;
            let g = ParamGroup::Backbone;
            stages.push(Stage {
                in_channels: c_in,
                out_channels: c_out,
                kernel: store.add(
                    format!("backbone.stage{i}.kernel"),
                    g,
                    uniform(&[c_out, c_in, KERNEL, KERNEL], he_bound(fan_in), rng),
                ),
                bias: store.add(format!("backbone.stage{i}.bias"), g, Tensor::zeros(&[c_out])),
                ln_gamma: store.add(format!("backbone.stage{i}.ln_gamma"), g, Tensor::ones(&[c_out])),
                ln_beta: store.add(format!("backbone.stage{i}.ln_beta"), g, Tensor::zeros(&[c_out])),
            });
            c_in = c_out;
        }
        Ok(Self {
            cfg: cfg.clone(),
            stages,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Parameter count as a function of the config alone:
    /// `Σ_stages (c_out·c_in·9 + 3·c_out)`.
    pub fn param_count(cfg: &BackboneConfig) -> usize {
        let mut c_in = cfg.in_channels;
        let mut total = 0;
        for &c_out in &cfg.stage_channels {
            total += c_out * c_in * KERNEL * KERNEL + 3 * c_out;
            c_in = c_out;
        }
        total
    }

    /// Runs the stages on `image[c×H×W]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &Bound, image: Var) -> Result<Memory> {
        let (c, h, w) = tape.value(image).dims3("backbone")?;
        let stride = self.cfg.stride;
        if c != self.cfg.in_channels {
            return Err(Error::dim(
                "backbone",
                format!("image has {c} channels, backbone expects {}", self.cfg.in_channels),
            ));
        }
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::dim(
                "backbone",
                format!("image {h}×{w} is not divisible by stride {stride}"),
            ));
        }
        let (mut x, mut hh, mut ww) = (image, h, w);
        let mut flat = image;
        for stage in &self.stages {
            let padded = tape.pad2d(x, 1, 0, 1, 0)?;
            let conv = tape.conv2d(padded, params.var(stage.kernel), 2, 0, 1)?;
            let conv = tape.add_channel_bias(conv, params.var(stage.bias))?;
            hh /= 2;
            ww /= 2;
            let planes = tape.reshape(conv, &[stage.out_channels, hh * ww])?;
            let rows = tape.transpose(planes)?;
            let normed = tape.layer_norm(rows, params.var(stage.ln_gamma), params.var(stage.ln_beta))?;
            flat = tape.relu(normed);
            let back = tape.transpose(flat)?;
            x = tape.reshape(back, &[stage.out_channels, hh, ww])?;
        }
        debug_assert!(self.stages.iter().all(|s| s.in_channels > 0));
        Ok(Memory {
            features: x,
            flat,
            dim: self.cfg.out_dim,
            h: hh,
            w: ww,
        })
    }
}

/// Builds a standalone backbone with its own parameter store.
pub fn build_backbone<T: Scalar>(cfg: &BackboneConfig, seed: u64) -> Result<(Backbone, ParamStore<T>)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backbone = Backbone::build(cfg, &mut store, &mut rng)?;
    Ok((backbone, store))
}
