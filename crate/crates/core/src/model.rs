//! The full detector: backbone → (optional) dynamic query init → decoder
//! head → landmark perceptron.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, Memory};
use crate::config::{ModelConfig, QaMemVariant};
use crate::decoder::{DecodeOptions, DecoderHead, HeadConfig};
use crate::dqinit::DqInit;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct Model<T> {
    cfg: ModelConfig,
    store: ParamStore<T>,
    backbone: Backbone,
    dqinit: Option<DqInit>,
    head: DecoderHead,
}

/// Vars produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub memory: Memory,
    pub q_init: Var,
    pub embeddings: Var,
    /// `N×2` coordinates in `[0, 1]²`.
    pub landmarks: Var,
    /// Last decoder layer's per-head cross-attention weights.
    pub attention: Vec<Var>,
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialization: the same `(cfg, seed)` always yields
    /// bitwise-identical parameters.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::build(&cfg.backbone(), &mut store, &mut rng)?;
        let dqinit = cfg
            .use_dqinit
            .then(|| DqInit::build(cfg.num_landmarks, cfg.hidden_dim, &mut store, &mut rng));
        let head = DecoderHead::build(&HeadConfig::from_model(cfg), &mut store, &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            backbone,
            dqinit,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn dqinit(&self) -> Option<&DqInit> {
        self.dqinit.as_ref()
    }

    pub fn head(&self) -> &DecoderHead {
        &self.head
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    /// Selects which query-aware memory computation runs; both give the same
    /// result up to rounding.
    pub fn set_qamem_variant(&mut self, variant: QaMemVariant) {
        self.cfg.qamem_variant = variant;
    }

    /// Records a forward pass of `image` (bound as a constant) on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        image: Var,
        dropout: Option<(f64, u64)>,
    ) -> Result<ForwardPass> {
        let memory = self.backbone.forward(tape, params, image)?;
        let q_init = match &self.dqinit {
            Some(dq) => dq.init_queries(tape, params, &memory)?,
            None => tape.constant(Tensor::zeros(&[self.cfg.num_landmarks, self.cfg.hidden_dim])),
        };
        let opts = DecodeOptions {
            qamem_variant: self.cfg.qamem_variant,
            dropout,
        };
        let decoded = self.head.decode(tape, params, &memory, q_init, opts)?;
        let landmarks = self.head.predict_landmarks(tape, params, decoded.embeddings)?;
        Ok(ForwardPass {
            memory,
            q_init,
            embeddings: decoded.embeddings,
            landmarks,
            attention: decoded.attention,
        })
    }

    /// Inference on one `c×H×W` image, returning `N×2` coordinates.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let expect = [self.cfg.in_channels, self.cfg.image_size, self.cfg.image_size];
        if image.shape() != expect {
            return Err(Error::dim(
                "predict",
                format!("image {:?}, model expects {expect:?}", image.shape()),
            ));
        }
        let mut tape = Tape::new();
        let params = self.store.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let pass = self.forward(&mut tape, &params, x, None)?;
        Ok(tape.value(pass.landmarks).clone())
    }

    /// Converts the parameters to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut store = ParamStore::new();
        for p in self.store.iter() {
            store.add(p.name.clone(), p.group, p.value.cast());
        }
        Model {
            cfg: self.cfg.clone(),
            store,
            backbone: self.backbone.clone(),
            dqinit: self.dqinit.clone(),
            head: self.head.clone(),
        }
    }
}
