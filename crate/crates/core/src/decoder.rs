//! Transformer decoder head over N landmark queries.
//!
//! Each layer is post-norm: self-attention over the queries, cross-attention
//! from the queries to the memory, then a ReLU feed-forward block, each
//! followed by residual addition and layer norm. `query_pe` is added to the
//! query inputs of both attentions (and the self-attention keys); `memory_pe`
//! is added to the cross-attention keys only, never to the values. There is
//! no encoder: memory goes straight from the backbone to every layer.

use rand_chacha::ChaCha8Rng;

use crate::backbone::Memory;
use crate::config::{ModelConfig, QaMemVariant};
use crate::error::{Error, Result};
use crate::params::{normal, uniform, xavier_bound, Bound, ParamGroup, ParamId, ParamStore};
use crate::qamem::{AttentionWeights, QaMem};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub num_landmarks: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub num_decoder_layers: usize,
    pub ffn_dim: usize,
    pub memory_len: usize,
    pub use_qamem: bool,
}

impl HeadConfig {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        Self {
            num_landmarks: cfg.num_landmarks,
            hidden_dim: cfg.hidden_dim,
            num_heads: cfg.num_heads,
            num_decoder_layers: cfg.num_decoder_layers,
            ffn_dim: cfg.ffn_dim,
            memory_len: cfg.memory_len(),
            use_qamem: cfg.use_qamem,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "hidden dim {} not divisible by {} heads",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.num_decoder_layers == 0 {
            return Err(Error::config("at least one decoder layer is required"));
        }
        if self.num_landmarks == 0 || self.memory_len == 0 || self.ffn_dim == 0 {
            return Err(Error::config("landmarks, memory length and ffn dim must be positive"));
        }
        Ok(())
    }
}

/// Projections of one multi-head attention block; weights are `in×out`.
#[derive(Debug, Clone)]
struct Projections {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

impl Projections {
    fn build<T: Scalar>(prefix: &str, d: usize, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let bound = xavier_bound(d, d);
        let mut w = |name: &str, store: &mut ParamStore<T>| {
            store.add(format!("{prefix}.{name}"), ParamGroup::Head, uniform(&[d, d], bound, rng))
        };
        let wq = w("wq", store);
        let wk = w("wk", store);
        let wv = w("wv", store);
        let wo = w("wo", store);
        let mut b = |name: &str| store.add(format!("{prefix}.{name}"), ParamGroup::Head, Tensor::zeros(&[d]));
        Self {
            wq,
            bq: b("bq"),
            wk,
            bk: b("bk"),
            wv,
            bv: b("bv"),
            wo,
            bo: b("bo"),
        }
    }
}

#[derive(Debug, Clone)]
struct LayerNormParams {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNormParams {
    fn build<T: Scalar>(prefix: &str, d: usize, store: &mut ParamStore<T>) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), ParamGroup::Head, Tensor::ones(&[d])),
            beta: store.add(format!("{prefix}.beta"), ParamGroup::Head, Tensor::zeros(&[d])),
        }
    }

    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, params: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, params.var(self.gamma), params.var(self.beta))
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: Projections,
    cross_attn: Projections,
    norm1: LayerNormParams,
    norm2: LayerNormParams,
    norm3: LayerNormParams,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
    qamem: Option<QaMem>,
}

/// Options for one decoder pass.
#[derive(Debug, Clone, Copy)]
pub struct DecodeOptions {
    pub qamem_variant: QaMemVariant,
    /// `(probability, seed)`; `None` disables dropout.
    pub dropout: Option<(f64, u64)>,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            qamem_variant: QaMemVariant::Efficient,
            dropout: None,
        }
    }
}

/// Result of [`DecoderHead::decode`].
#[derive(Debug, Clone)]
pub struct Decoded {
    /// Final `N×d` query embeddings.
    pub embeddings: Var,
    /// Last layer's cross-attention weights, one `N×S` var per head.
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct DecoderHead {
    cfg: HeadConfig,
    memory_pe: ParamId,
    query_pe: ParamId,
    layers: Vec<DecoderLayer>,
    pred_w1: ParamId,
    pred_b1: ParamId,
    pred_w2: ParamId,
    pred_b2: ParamId,
}

impl DecoderHead {
    /// Positional encodings ~ N(0, 1); attention and FFN weights
    /// Xavier-uniform; the last predictor layer starts at zero so that every
    /// initial prediction is the image centre.
    pub fn build<T: Scalar>(cfg: &HeadConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let (n, d, s, f) = (cfg.num_landmarks, cfg.hidden_dim, cfg.memory_len, cfg.ffn_dim);
        let h = ParamGroup::Head;
        let memory_pe = store.add("decoder.memory_pe", h, normal(&[s, d], 1.0, rng));
        let query_pe = store.add("decoder.query_pe", h, normal(&[n, d], 1.0, rng));
        let mut layers = Vec::with_capacity(cfg.num_decoder_layers);
        for l in 0..cfg.num_decoder_layers {
            let p = format!("decoder.layer{l}");
            let self_attn = Projections::build(&format!("{p}.self_attn"), d, store, rng);
            let cross_attn = Projections::build(&format!("{p}.cross_attn"), d, store, rng);
            let norm1 = LayerNormParams::build(&format!("{p}.norm1"), d, store);
            let norm2 = LayerNormParams::build(&format!("{p}.norm2"), d, store);
            let norm3 = LayerNormParams::build(&format!("{p}.norm3"), d, store);
            let ffn_w1 = store.add(format!("{p}.ffn_w1"), h, uniform(&[d, f], xavier_bound(d, f), rng));
            let ffn_b1 = store.add(format!("{p}.ffn_b1"), h, Tensor::zeros(&[f]));
            let ffn_w2 = store.add(format!("{p}.ffn_w2"), h, uniform(&[f, d], xavier_bound(f, d), rng));
            let ffn_b2 = store.add(format!("{p}.ffn_b2"), h, Tensor::zeros(&[d]));
            let qamem = cfg
                .use_qamem
                .then(|| QaMem::build(&format!("qamem.layer{l}"), n, d, store, rng));
            layers.push(DecoderLayer {
                self_attn,
                cross_attn,
                norm1,
                norm2,
                norm3,
                ffn_w1,
                ffn_b1,
                ffn_w2,
                ffn_b2,
                qamem,
            });
        }
        let pred_w1 = store.add("decoder.pred_w1", h, uniform(&[d, d], xavier_bound(d, d), rng));
        let pred_b1 = store.add("decoder.pred_b1", h, Tensor::zeros(&[d]));
        let pred_w2 = store.add("decoder.pred_w2", h, Tensor::zeros(&[d, 2]));
        let pred_b2 = store.add("decoder.pred_b2", h, Tensor::zeros(&[2]));
        Ok(Self {
            cfg: cfg.clone(),
            memory_pe,
            query_pe,
            layers,
            pred_w1,
            pred_b1,
            pred_w2,
            pred_b2,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.cfg
    }

    pub fn query_pe_id(&self) -> ParamId {
        self.query_pe
    }

    pub fn memory_pe_id(&self) -> ParamId {
        self.memory_pe
    }

    pub fn qamem(&self, layer: usize) -> Option<&QaMem> {
        self.layers.get(layer).and_then(|l| l.qamem.as_ref())
    }

    /// Runs every decoder layer from `q_init` (`N×d`).
    pub fn decode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        memory: &Memory,
        q_init: Var,
        opts: DecodeOptions,
    ) -> Result<Decoded> {
        let (n, d) = (self.cfg.num_landmarks, self.cfg.hidden_dim);
        if tape.shape(q_init) != [n, d] {
            return Err(Error::dim(
                "decode",
                format!("initial queries {:?}, expected [{n}, {d}]", tape.shape(q_init)),
            ));
        }
        if memory.dim != d || tape.shape(memory.flat) != [self.cfg.memory_len, d] {
            return Err(Error::dim(
                "decode",
                format!(
                    "memory {:?} does not match head (S={}, d={d})",
                    tape.shape(memory.flat),
                    self.cfg.memory_len
                ),
            ));
        }
        let query_pe = params.var(self.query_pe);
        let keys_in = tape.add(memory.flat, params.var(self.memory_pe))?;
        let mut tgt = q_init;
        let mut attention = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let drop = |i: u64| opts.dropout.map(|(p, seed)| (p, seed ^ ((l as u64) << 8 | i)));

            let q = tape.add(tgt, query_pe)?;
            let (sa, _) = attend(tape, params, &layer.self_attn, q, q, tgt, self.cfg.num_heads, None)?;
            let sa = maybe_dropout(tape, sa, drop(1))?;
            let res = tape.add(tgt, sa)?;
            tgt = layer.norm1.apply(tape, params, res)?;

            let q = tape.add(tgt, query_pe)?;
            let qamem = layer.qamem.as_ref().map(|m| (m, opts.qamem_variant));
            let (ca, weights) = attend(
                tape,
                params,
                &layer.cross_attn,
                q,
                keys_in,
                memory.flat,
                self.cfg.num_heads,
                qamem,
            )?;
            let ca = maybe_dropout(tape, ca, drop(2))?;
            let res = tape.add(tgt, ca)?;
            tgt = layer.norm2.apply(tape, params, res)?;

            let hidden = tape.linear(tgt, params.var(layer.ffn_w1), params.var(layer.ffn_b1))?;
            let hidden = tape.relu(hidden);
            let ff = tape.linear(hidden, params.var(layer.ffn_w2), params.var(layer.ffn_b2))?;
            let ff = maybe_dropout(tape, ff, drop(3))?;
            let res = tape.add(tgt, ff)?;
            tgt = layer.norm3.apply(tape, params, res)?;
            attention = weights;
        }
        Ok(Decoded {
            embeddings: tgt,
            attention,
        })
    }

    /// Shared per-query perceptron `d → d → 2` with a sigmoid, giving
    /// coordinates in `[0, 1]²`.
    pub fn predict_landmarks<T: Scalar>(&self, tape: &mut Tape<T>, params: &Bound, embeddings: Var) -> Result<Var> {
        let h = tape.linear(embeddings, params.var(self.pred_w1), params.var(self.pred_b1))?;
        let h = tape.relu(h);
        let out = tape.linear(h, params.var(self.pred_w2), params.var(self.pred_b2))?;
        Ok(tape.sigmoid(out))
    }

    /// Standalone cross-attention of `queries` (`N×d`, positional term
    /// already added) over `memory_flat` using layer `layer`'s projections.
    /// Keys are `memory_flat + memory_pe`; values are `memory_flat`.
    pub fn cross_attention<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        layer: usize,
        queries: Var,
        memory_flat: Var,
        variant: QaMemVariant,
    ) -> Result<(Var, Vec<Var>)> {
        let l = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::config(format!("no decoder layer {layer}")))?;
        let keys = tape.add(memory_flat, params.var(self.memory_pe))?;
        let qamem = l.qamem.as_ref().map(|m| (m, variant));
        attend(tape, params, &l.cross_attn, queries, keys, memory_flat, self.cfg.num_heads, qamem)
    }
}

fn maybe_dropout<T: Scalar>(tape: &mut Tape<T>, x: Var, drop: Option<(f64, u64)>) -> Result<Var> {
    match drop {
        Some((p, seed)) => tape.dropout(x, p, seed),
        None => Ok(x),
    }
}

/// Scaled dot-product multi-head attention. Returns the projected output
/// and the per-head weight matrices.
#[allow(clippy::too_many_arguments)]
fn attend<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Bound,
    proj: &Projections,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    heads: usize,
    qamem: Option<(&QaMem, QaMemVariant)>,
) -> Result<(Var, Vec<Var>)> {
    let q = tape.linear(q_in, params.var(proj.wq), params.var(proj.bq))?;
    let k = tape.linear(k_in, params.var(proj.wk), params.var(proj.bk))?;
    let v = tape.linear(v_in, params.var(proj.wv), params.var(proj.bv))?;
    let (_, d) = tape.value(q).dims2("attention")?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut weights = Vec::with_capacity(heads);
    let mut extracted = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, scale);
        let a = tape.softmax_rows(logits)?;
        weights.push(a);
        if !matches!(qamem, Some((_, QaMemVariant::Naive))) {
            let vh = tape.slice_cols(v, lo, hi)?;
            extracted.push(tape.matmul(a, vh)?);
        }
    }
    let values = match qamem {
        Some((m, QaMemVariant::Naive)) => m.apply_naive(tape, params, &weights, v)?,
        Some((m, QaMemVariant::Efficient)) => {
            let e = concat(tape, &extracted)?;
            m.apply_efficient(tape, params, e)?
        }
        None => concat(tape, &extracted)?,
    };
    let out = tape.linear(values, params.var(proj.wo), params.var(proj.bo))?;
    Ok((out, weights))
}

fn concat<T: Scalar>(tape: &mut Tape<T>, parts: &[Var]) -> Result<Var> {
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        tape.concat_cols(parts)
    }
}

/// Copies per-head weight vars off the tape.
pub fn attention_weights<T: Scalar>(tape: &Tape<T>, heads: &[Var]) -> AttentionWeights<T> {
    AttentionWeights {
        heads: heads.iter().map(|&v| tape.value(v).clone()).collect(),
    }
}
