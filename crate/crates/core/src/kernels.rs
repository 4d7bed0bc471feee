//! Tape-free numeric kernels. The differentiable ops in [`crate::tape`] call
//! these for both their forward values and their backward rules.
//!
//! All kernels are sequential; summation order is fixed so that repeated
//! evaluation is bitwise reproducible.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Layer-norm epsilon, applied over the last axis.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!("inner extents differ: {:?} · {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(&[m, n], out)
}

/// Row-major `out[m×n] += a[m×k] · b[k×n]`, i-k-j loop order.
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `aᵀ · b` for `a[k×m]`, `b[k×n]`, without materializing the transpose.
pub(crate) fn matmul_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
pub(crate) fn matmul_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.dims2("transpose")?;
    let src = a.data();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    Tensor::new(&[n, m], out)
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = x.dims2("softmax_rows")?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n).take(m) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Tensor::new(&[m, n], out)
}

/// Backward of softmax given its output `y`: `dx = y ⊙ (dy − rowsum(dy ⊙ y))`.
pub fn softmax_rows_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, n) = y.dims2("softmax_rows_backward")?;
    y.expect_same_shape(dy, "softmax_rows_backward")?;
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, dyr), dxr) in y
        .data()
        .chunks(n)
        .zip(dy.data().chunks(n))
        .zip(dx.chunks_mut(n))
    {
        let dot: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *o = yv * (g - dot);
        }
    }
    Tensor::new(y.shape(), dx)
}

/// Geometry of a grouped 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let &[c_in, h, w] = input else {
            return Err(Error::dim(
                "conv2d",
                format!("input must be c×h×w, got {input:?}"),
            ));
        };
        let &[c_out, c_in_g, kh, kw] = kernel else {
            return Err(Error::dim(
                "conv2d",
                format!("kernel must be c_out×(c_in/g)×kh×kw, got {kernel:?}"),
            ));
        };
        if groups == 0 || stride == 0 {
            return Err(Error::config("conv2d: groups and stride must be positive"));
        }
        if c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::config(format!(
                "conv2d: channels in={c_in} out={c_out} not divisible by groups={groups}"
            )));
        }
        if c_in / groups != c_in_g {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "kernel {kernel:?} expects {c_in_g} input channels per group, input {input:?} with {groups} groups has {}",
                    c_in / groups
                ),
            ));
        }
        let span_h = h + 2 * padding;
        let span_w = w + 2 * padding;
        if span_h < kh || span_w < kw {
            return Err(Error::config(format!(
                "conv2d: kernel {kh}×{kw} larger than padded input {span_h}×{span_w}"
            )));
        }
        if !(span_h - kh).is_multiple_of(stride) || !(span_w - kw).is_multiple_of(stride) {
            return Err(Error::config(format!(
                "conv2d: non-integral output extent for input {h}×{w}, kernel {kh}×{kw}, stride {stride}, padding {padding}"
            )));
        }
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
            groups,
            h_out: (span_h - kh) / stride + 1,
            w_out: (span_w - kw) / stride + 1,
        })
    }

    fn cin_g(&self) -> usize {
        self.c_in / self.groups
    }

    fn cout_g(&self) -> usize {
        self.c_out / self.groups
    }

    /// Rows of the per-group patch matrix.
    fn patch_len(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Input coordinate hit by output `(oy, ox)` at kernel tap `(ky, kx)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.padding)?;
        let x = (ox * self.stride + kx).checked_sub(self.padding)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    /// Patch matrix `[patch_len × positions]` for group `g`.
    fn im2col<T: Scalar>(&self, x: &[T], g: usize) -> Vec<T> {
        let (hw_out, cin_g) = (self.positions(), self.cin_g());
        let mut cols = vec![T::zero(); self.patch_len() * hw_out];
        for c in 0..cin_g {
            let plane = &x[(g * cin_g + c) * self.h * self.w..][..self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                    for oy in 0..self.h_out {
                        for ox in 0..self.w_out {
                            if let Some((y, xx)) = self.source(oy, ox, ky, kx) {
                                dst[oy * self.w_out + ox] = plane[y * self.w + xx];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Scatter-adds a patch-matrix gradient back onto the input gradient.
    fn col2im<T: Scalar>(&self, cols: &[T], g: usize, dx: &mut [T]) {
        let (hw_out, cin_g) = (self.positions(), self.cin_g());
        for c in 0..cin_g {
            let plane = &mut dx[(g * cin_g + c) * self.h * self.w..][..self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * hw_out..(row + 1) * hw_out];
                    for oy in 0..self.h_out {
                        for ox in 0..self.w_out {
                            if let Some((y, xx)) = self.source(oy, ox, ky, kx) {
                                let v = &mut plane[y * self.w + xx];
                                *v = *v + src[oy * self.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Grouped 2-D cross-correlation of `x[c_in×h×w]` with
/// `kernel[c_out×(c_in/groups)×kh×kw]`. Output channel `o` belongs to group
/// `o / (c_out/groups)` and only sees that group's input channels.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let geo = ConvGeometry::new(x.shape(), kernel.shape(), stride, padding, groups)?;
    let (hw_out, plen, cout_g) = (geo.positions(), geo.patch_len(), geo.cout_g());
    let mut out = vec![T::zero(); geo.c_out * hw_out];
    for g in 0..groups {
        let k = &kernel.data()[g * cout_g * plen..(g + 1) * cout_g * plen];
        let dst = &mut out[g * cout_g * hw_out..(g + 1) * cout_g * hw_out];
        if geo.kh == 1 && geo.kw == 1 && stride == 1 && padding == 0 {
            let src = &x.data()[g * plen * hw_out..(g + 1) * plen * hw_out];
            matmul_into(k, src, dst, cout_g, plen, hw_out);
        } else {
            let cols = geo.im2col(x.data(), g);
            matmul_into(k, &cols, dst, cout_g, plen, hw_out);
        }
    }
    Tensor::new(&[geo.c_out, geo.h_out, geo.w_out], out)
}

/// Gradients of [`conv2d`] with respect to input and kernel.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    dout: &Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let geo = ConvGeometry::new(x.shape(), kernel.shape(), stride, padding, groups)?;
    if dout.shape() != [geo.c_out, geo.h_out, geo.w_out] {
        return Err(Error::dim(
            "conv2d_backward",
            format!("upstream gradient shape {:?}", dout.shape()),
        ));
    }
    let (hw_out, plen, cout_g) = (geo.positions(), geo.patch_len(), geo.cout_g());
    let pointwise = geo.kh == 1 && geo.kw == 1 && stride == 1 && padding == 0;
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); kernel.len()];
    for g in 0..groups {
        let k = &kernel.data()[g * cout_g * plen..(g + 1) * cout_g * plen];
        let dy = &dout.data()[g * cout_g * hw_out..(g + 1) * cout_g * hw_out];
        let owned_cols;
        let cols: &[T] = if pointwise {
            &x.data()[g * plen * hw_out..(g + 1) * plen * hw_out]
        } else {
            owned_cols = geo.im2col(x.data(), g);
            &owned_cols
        };
        // dK_g = dY_g · colsᵀ
        matmul_nt(
            dy,
            cols,
            &mut dk[g * cout_g * plen..(g + 1) * cout_g * plen],
            cout_g,
            hw_out,
            plen,
        );
        // dcols = K_gᵀ · dY_g
        if pointwise {
            matmul_tn(k, dy, &mut dx[g * plen * hw_out..(g + 1) * plen * hw_out], cout_g, plen, hw_out);
        } else {
            let mut dcols = vec![T::zero(); plen * hw_out];
            matmul_tn(k, dy, &mut dcols, cout_g, plen, hw_out);
            geo.col2im(&dcols, g, &mut dx);
        }
    }
    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::new(kernel.shape(), dk)?,
    ))
}

/// Per-row statistics cached by layer norm: normalized values and `1/σ`.
pub struct LayerNormCache<T> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Layer norm over the last axis of a matrix, with affine `gamma`, `beta`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let (m, n) = x.dims2("layer_norm")?;
    if gamma.shape() != [n] || beta.shape() != [n] {
        return Err(Error::dim(
            "layer_norm",
            format!(
                "input {:?} needs gamma/beta of shape [{n}], got {:?}/{:?}",
                x.shape(),
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let eps = T::of(LAYER_NORM_EPS);
    let nf = T::of(n as f64);
    let mut out = vec![T::zero(); m * n];
    let mut normalized = vec![T::zero(); m * n];
    let mut inv_std = vec![T::zero(); m];
    for i in 0..m {
        let row = &x.data()[i * n..(i + 1) * n];
        let mean = row.iter().copied().sum::<T>() / nf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let is = T::one() / (var + eps).sqrt();
        inv_std[i] = is;
        for j in 0..n {
            let z = (row[j] - mean) * is;
            normalized[i * n + j] = z;
            out[i * n + j] = z * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok((
        Tensor::new(&[m, n], out)?,
        LayerNormCache {
            normalized,
            inv_std,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (m, n) = dy.dims2("layer_norm_backward")?;
    let nf = T::of(n as f64);
    let mut dx = vec![T::zero(); m * n];
    let mut dgamma = vec![T::zero(); n];
    let mut dbeta = vec![T::zero(); n];
    for i in 0..m {
        let z = &cache.normalized[i * n..(i + 1) * n];
        let g = &dy.data()[i * n..(i + 1) * n];
        let mut sum_dz = T::zero();
        let mut sum_dz_z = T::zero();
        for j in 0..n {
            let dz = g[j] * gamma.data()[j];
            sum_dz = sum_dz + dz;
            sum_dz_z = sum_dz_z + dz * z[j];
            dgamma[j] = dgamma[j] + g[j] * z[j];
            dbeta[j] = dbeta[j] + g[j];
        }
        let is = cache.inv_std[i];
        for j in 0..n {
            let dz = g[j] * gamma.data()[j];
            dx[i * n + j] = is * (dz - sum_dz / nf - z[j] * sum_dz_z / nf);
        }
    }
    Ok((
        Tensor::new(&[m, n], dx)?,
        Tensor::new(&[n], dgamma)?,
        Tensor::new(&[n], dbeta)?,
    ))
}

/// Mean over the spatial extents of `x[c×h×w]`, giving `[c]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3("global_avg_pool")?;
    let area = h * w;
    let denom = T::of(area as f64);
    let out = x
        .data()
        .chunks(area)
        .take(c)
        .map(|plane| plane.iter().copied().sum::<T>() / denom)
        .collect();
    Tensor::new(&[c], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_hand_case() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[0.0, 1.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_identity() {
        let x = Tensor::<f64>::from_fn(&[3, 4], |i| i as f64 * 0.5 - 1.0);
        assert_eq!(matmul(&Tensor::eye(3), &x).unwrap(), x);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::<f64>::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] · [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let z = softmax_rows(&Tensor::<f64>::zeros(&[1, 4])).unwrap();
        assert_eq!(z.data(), &[0.25; 4]);
        let big = softmax_rows(&t(&[1, 2], &[1000.0, 1000.0])).unwrap();
        assert_eq!(big.data(), &[0.5, 0.5]);
    }

    #[test]
    fn conv_identity_and_diagonal() {
        let x = Tensor::<f64>::from_fn(&[3, 4, 4], |i| (i as f64).sin());
        let mut k = Tensor::<f64>::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            k.data_mut()[c * 3 + c] = 1.0;
        }
        assert_eq!(conv2d(&x, &k, 1, 0, 1).unwrap(), x);

        let scales = t(&[3, 1, 1, 1], &[2.0, -1.0, 0.5]);
        let y = conv2d(&x, &scales, 1, 0, 3).unwrap();
        for c in 0..3 {
            for p in 0..16 {
                assert_eq!(y.data()[c * 16 + p], x.data()[c * 16 + p] * scales.data()[c]);
            }
        }
    }

    #[test]
    fn conv_rejects_bad_configs() {
        let x = Tensor::<f64>::zeros(&[4, 5, 5]);
        let k = Tensor::<f64>::zeros(&[6, 2, 3, 3]);
        assert!(matches!(conv2d(&x, &k, 1, 0, 3), Err(Error::Config(_))));
        let k = Tensor::<f64>::zeros(&[4, 4, 2, 2]);
        // (5 - 2) / 2 is not integral
        assert!(matches!(conv2d(&x, &k, 2, 0, 1), Err(Error::Config(_))));
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0]);
        let (y, _) = layer_norm(&x, &Tensor::ones(&[4]), &Tensor::zeros(&[4])).unwrap();
        for row in y.data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn pooling_averages_planes() {
        let x = t(&[2, 1, 2], &[1.0, 3.0, -2.0, 2.0]);
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.0, 0.0]);
    }
}
