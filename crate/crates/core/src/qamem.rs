//! Query-aware memory.
//!
//! Every query `i` owns a `d×d` value transform `Tⁱ`. The naive form builds a
//! private memory `M·Tⁱ` per query and attends over it; the efficient form
//! attends over the shared memory once and transforms the N extracted rows,
//! which is a 1×1 convolution with N groups.
//!
//! With several attention heads, each head attends over its own column block
//! `V_h` of the values, and the naive form becomes
//! `Qᵢ = Σ_h a_{h,i} · (V_h · Tⁱ[block h, :])`. With one head this is exactly
//! `Qᵢ = aᵢ · (M · Tⁱ)`.
//!
//! Kernel layout is group-major: `kernel[i·d + o][c] = Tⁱ[c][o]`, i.e. group `i`
//! of the `[N·d × d × 1 × 1]` kernel holds `Tⁱ` transposed, so that output
//! channel `o` of group `i` computes `Σ_c E[i][c] · Tⁱ[c][o]`.

use rand_chacha::ChaCha8Rng;

use crate::config::QaMemVariant;
use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{uniform, Bound, ParamGroup, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Scale of the uniform noise added to identity at initialization.
pub const INIT_NOISE: f64 = 0.01;

/// Per-head cross-attention weights, each `N×S` and row-stochastic.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    pub heads: Vec<Tensor<T>>,
}

impl<T: Scalar> AttentionWeights<T> {
    pub fn single(weights: Tensor<T>) -> Self {
        Self {
            heads: vec![weights],
        }
    }

    /// `(N, S)` shared by every head.
    pub fn dims(&self) -> Result<(usize, usize)> {
        let first = self
            .heads
            .first()
            .ok_or_else(|| Error::dim("attention_weights", "no heads"))?;
        let dims = first.dims2("attention_weights")?;
        for h in &self.heads {
            if h.dims2("attention_weights")? != dims {
                return Err(Error::dim(
                    "attention_weights",
                    format!("head shapes {:?} and {:?} differ", first.shape(), h.shape()),
                ));
            }
        }
        Ok(dims)
    }

    /// Head-averaged `N×S` weights.
    pub fn averaged(&self) -> Result<Tensor<T>> {
        let (n, s) = self.dims()?;
        let inv = T::of(1.0 / self.heads.len() as f64);
        let mut avg = Tensor::zeros(&[n, s]);
        for h in &self.heads {
            avg.add_assign(h)?;
        }
        Ok(avg.map(|v| v * inv))
    }
}

/// The N transforms, stored as one grouped 1×1 kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct QaMemParams<T> {
    kernel: Tensor<T>,
    num_queries: usize,
    dim: usize,
}

impl<T: Scalar> QaMemParams<T> {
    /// Packs `transforms[i] = Tⁱ` (each `d×d`) into the grouped kernel.
    pub fn pack(transforms: &[Tensor<T>]) -> Result<Self> {
        let n = transforms.len();
        let first = transforms
            .first()
            .ok_or_else(|| Error::dim("qamem_pack", "no transforms"))?;
        let (d, d2) = first.dims2("qamem_pack")?;
        if d != d2 {
            return Err(Error::dim("qamem_pack", format!("transform {:?} is not square", first.shape())));
        }
        let mut kernel = vec![T::zero(); n * d * d];
        for (i, t) in transforms.iter().enumerate() {
            if t.shape() != [d, d] {
                return Err(Error::dim(
                    "qamem_pack",
                    format!("transform {i} has shape {:?}, expected [{d}, {d}]", t.shape()),
                ));
            }
            for c in 0..d {
                for o in 0..d {
                    kernel[(i * d + o) * d + c] = t.at2(c, o);
                }
            }
        }
        Ok(Self {
            kernel: Tensor::new(&[n * d, d, 1, 1], kernel)?,
            num_queries: n,
            dim: d,
        })
    }

    pub fn from_kernel(kernel: Tensor<T>) -> Result<Self> {
        let &[nd, d, 1, 1] = kernel.shape() else {
            return Err(Error::dim(
                "qamem_kernel",
                format!("expected [N·d, d, 1, 1], got {:?}", kernel.shape()),
            ));
        };
        if nd % d != 0 {
            return Err(Error::dim("qamem_kernel", format!("{nd} rows is not a multiple of d = {d}")));
        }
        Ok(Self {
            kernel,
            num_queries: nd / d,
            dim: d,
        })
    }

    pub fn identity(num_queries: usize, dim: usize) -> Self {
        let eye = Tensor::eye(dim);
        Self::pack(&vec![eye; num_queries]).expect("identity transforms are square")
    }

    /// `Tⁱ` for query `i`.
    pub fn transform(&self, i: usize) -> Tensor<T> {
        let d = self.dim;
        let k = self.kernel.data();
        Tensor::from_fn(&[d, d], |idx| {
            let (c, o) = (idx / d, idx % d);
            k[(i * d + o) * d + c]
        })
    }

    pub fn unpack(&self) -> Vec<Tensor<T>> {
        (0..self.num_queries).map(|i| self.transform(i)).collect()
    }

    pub fn kernel(&self) -> &Tensor<T> {
        &self.kernel
    }

    pub fn num_queries(&self) -> usize {
        self.num_queries
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn check(&self, weights: &AttentionWeights<T>, values: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let (n, s) = weights.dims()?;
        let (s2, d) = values.dims2("qamem")?;
        let heads = weights.heads.len();
        if s != s2 || n != self.num_queries || d != self.dim || d % heads != 0 {
            return Err(Error::dim(
                "qamem",
                format!(
                    "weights {heads}×{n}×{s}, values {:?}, transforms for N={} d={}",
                    values.shape(),
                    self.num_queries,
                    self.dim
                ),
            ));
        }
        Ok((n, d, heads))
    }
}

/// Plain attention extraction `E = [A_1·V_1 | … | A_H·V_H]`, `N×d`.
pub fn extract_plain<T: Scalar>(weights: &AttentionWeights<T>, values: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, s) = weights.dims()?;
    let (s2, d) = values.dims2("extract_plain")?;
    let heads = weights.heads.len();
    if s != s2 || d % heads != 0 {
        return Err(Error::dim(
            "extract_plain",
            format!("weights {heads}×{n}×{s} against values {:?}", values.shape()),
        ));
    }
    let dh = d / heads;
    let mut out = vec![T::zero(); n * d];
    for (h, a) in weights.heads.iter().enumerate() {
        let vh = column_block(values, h * dh, dh);
        let mut eh = vec![T::zero(); n * dh];
        kernels::matmul_into(a.data(), &vh, &mut eh, n, s, dh);
        for i in 0..n {
            out[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(&eh[i * dh..(i + 1) * dh]);
        }
    }
    Tensor::new(&[n, d], out)
}

fn column_block<T: Scalar>(m: &Tensor<T>, start: usize, width: usize) -> Vec<T> {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        out.extend_from_slice(&m.data()[r * cols + start..r * cols + start + width]);
    }
    out
}

/// Private-memory extraction: for each query materializes `V·Tⁱ` (per head
/// block) and attends over it. `O(N·S·d²)`.
pub fn extract_naive<T: Scalar>(
    weights: &AttentionWeights<T>,
    values: &Tensor<T>,
    params: &QaMemParams<T>,
) -> Result<Tensor<T>> {
    let (n, d, heads) = params.check(weights, values)?;
    let s = values.shape()[0];
    let dh = d / heads;
    let mut out = vec![T::zero(); n * d];
    let mut private = vec![T::zero(); s * d];
    for i in 0..n {
        let t = params.transform(i);
        let row = &mut out[i * d..(i + 1) * d];
        for (h, a) in weights.heads.iter().enumerate() {
            let vh = column_block(values, h * dh, dh);
            let t_block = &t.data()[h * dh * d..(h + 1) * dh * d];
            private.iter_mut().for_each(|v| *v = T::zero());
            kernels::matmul_into(&vh, t_block, &mut private, s, dh, d);
            kernels::matmul_into(&a.data()[i * s..(i + 1) * s], &private, row, 1, s, d);
        }
    }
    Tensor::new(&[n, d], out)
}

/// Extract once, then transform each query row with a grouped 1×1 conv.
/// `O(N·S·d + N·d²)`.
pub fn extract_efficient<T: Scalar>(
    weights: &AttentionWeights<T>,
    values: &Tensor<T>,
    params: &QaMemParams<T>,
) -> Result<Tensor<T>> {
    let (n, d, _) = params.check(weights, values)?;
    let extracted = extract_plain(weights, values)?;
    transform_extracted(&extracted, params).inspect(|t| {
        debug_assert_eq!(t.shape(), [n, d]);
    })
}

/// Applies `Qᵢ = Eᵢ·Tⁱ` to an `N×d` extraction via the grouped conv.
pub fn transform_extracted<T: Scalar>(extracted: &Tensor<T>, params: &QaMemParams<T>) -> Result<Tensor<T>> {
    let (n, d) = extracted.dims2("qamem_transform")?;
    if n != params.num_queries || d != params.dim {
        return Err(Error::dim(
            "qamem_transform",
            format!("extraction {:?} against transforms for N={} d={}", extracted.shape(), params.num_queries, params.dim),
        ));
    }
    let as_channels = extracted.clone().reshape(&[n * d, 1, 1])?;
    kernels::conv2d(&as_channels, &params.kernel, 1, 0, n)?.reshape(&[n, d])
}

/// Multiply-add counts of the two computations for a single head.
pub fn flop_estimate(n: u64, s: u64, d: u64, variant: QaMemVariant) -> u64 {
    match variant {
        QaMemVariant::Naive => n * (s * d * d + s * d),
        QaMemVariant::Efficient => n * s * d + n * d * d,
    }
}

/// Parameter count of one query-aware memory: `N·d²`.
pub fn param_count(num_queries: usize, dim: usize) -> usize {
    num_queries * dim * dim
}

/// Query-aware memory as a trainable module.
#[derive(Debug, Clone)]
pub struct QaMem {
    kernel: ParamId,
    num_queries: usize,
    dim: usize,
}

impl QaMem {
    /// Registers a kernel initialized to identity plus uniform noise.
    pub fn build<T: Scalar>(
        name: &str,
        num_queries: usize,
        dim: usize,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let noise = uniform::<T>(&[num_queries * dim, dim, 1, 1], INIT_NOISE, rng);
        let ident = QaMemParams::<T>::identity(num_queries, dim);
        let kernel = ident
            .kernel()
            .zip_map(&noise, "qamem_init", |a, b| a + b)
            .expect("same shape");
        Self {
            kernel: store.add(format!("{name}.kernel"), ParamGroup::Head, kernel),
            num_queries,
            dim,
        }
    }

    pub fn kernel_id(&self) -> ParamId {
        self.kernel
    }

    pub fn params<T: Scalar>(&self, store: &ParamStore<T>) -> Result<QaMemParams<T>> {
        QaMemParams::from_kernel(store.get(self.kernel).clone())
    }

    /// Efficient form on the tape: grouped 1×1 conv over the extraction.
    pub fn apply_efficient<T: Scalar>(&self, tape: &mut Tape<T>, params: &Bound, extracted: Var) -> Result<Var> {
        let (n, d) = (self.num_queries, self.dim);
        if tape.shape(extracted) != [n, d] {
            return Err(Error::dim(
                "qamem",
                format!("extraction {:?}, expected [{n}, {d}]", tape.shape(extracted)),
            ));
        }
        let channels = tape.reshape(extracted, &[n * d, 1, 1])?;
        let out = tape.conv2d(channels, params.var(self.kernel), 1, 0, n)?;
        tape.reshape(out, &[n, d])
    }

    /// Naive form on the tape: one private memory per query and head.
    pub fn apply_naive<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        head_weights: &[Var],
        values: Var,
    ) -> Result<Var> {
        let (n, d) = (self.num_queries, self.dim);
        let heads = head_weights.len();
        let (_, vd) = tape.value(values).dims2("qamem")?;
        if heads == 0 || vd != d || d % heads != 0 {
            return Err(Error::dim("qamem", format!("{heads} heads over values {:?}", tape.shape(values))));
        }
        let dh = d / heads;
        let flat_kernel = tape.reshape(params.var(self.kernel), &[n * d, d])?;
        let value_blocks: Vec<Var> = (0..heads)
            .map(|h| tape.slice_cols(values, h * dh, (h + 1) * dh))
            .collect::<Result<_>>()?;
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let t_transposed = tape.slice_rows(flat_kernel, i * d, (i + 1) * d)?;
            let t = tape.transpose(t_transposed)?;
            let mut acc: Option<Var> = None;
            for (h, &a) in head_weights.iter().enumerate() {
                let t_block = tape.slice_rows(t, h * dh, (h + 1) * dh)?;
                let private = tape.matmul(value_blocks[h], t_block)?;
                let a_row = tape.slice_rows(a, i, i + 1)?;
                let q = tape.matmul(a_row, private)?;
                acc = Some(match acc {
                    Some(prev) => tape.add(prev, q)?,
                    None => q,
                });
            }
            rows.push(acc.expect("at least one head"));
        }
        tape.concat_rows(&rows)
    }
}
