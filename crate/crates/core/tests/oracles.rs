//! Kernels and attention checked against straightforward loop
//! implementations written independently of the library code paths.

#![allow(clippy::needless_range_loop)]

use lmdet::config::{ModelConfig, QaMemVariant};
use lmdet::decoder::{DecoderHead, HeadConfig};
use lmdet::kernels;
use lmdet::params::ParamStore;
use lmdet::qamem::QaMemParams;
use lmdet::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn triple_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let (m, k, n) = (rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..9));
        let a = random(&[m, k], &mut rng);
        let b = random(&[k, n], &mut rng);
        let got = kernels::matmul(&a, &b).unwrap();
        let want = triple_loop(a.data(), b.data(), m, k, n);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-13);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_loops(
    x: &[f64],
    k: &[f64],
    (c, h, w): (usize, usize, usize),
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let (cig, cog) = (c / groups, co / groups);
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        let g = o / cog;
        for y in 0..oh {
            for xo in 0..ow {
                let mut s = 0.0;
                for ci in 0..cig {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (y * stride + dy) as i64 - pad as i64;
                            let ix = (xo * stride + dx) as i64 - pad as i64;
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                continue;
                            }
                            let xin = x[((g * cig + ci) * h + iy as usize) * w + ix as usize];
                            s += xin * k[((o * cig + ci) * kh + dy) * kw + dx];
                        }
                    }
                }
                out[(o * oh + y) * ow + xo] = s;
            }
        }
    }
    (out, oh, ow)
}

#[test]
fn conv2d_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cases = [
        // (c, h, w, co, kh, kw, stride, pad, groups)
        (1, 5, 5, 2, 3, 3, 1, 0, 1),
        (2, 7, 7, 4, 3, 3, 2, 1, 1),
        (4, 6, 6, 4, 1, 1, 1, 0, 4),
        (6, 8, 8, 9, 3, 3, 1, 1, 3),
        (8, 4, 4, 8, 1, 1, 1, 0, 8),
        (3, 9, 9, 6, 3, 3, 2, 0, 3),
    ];
    for &(c, h, w, co, kh, kw, stride, pad, groups) in &cases {
        let x = random(&[c, h, w], &mut rng);
        let k = random(&[co, c / groups, kh, kw], &mut rng);
        let got = kernels::conv2d(&x, &k, stride, pad, groups).unwrap();
        let (want, oh, ow) = conv_loops(x.data(), k.data(), (c, h, w), (co, kh, kw), stride, pad, groups);
        assert_eq!(got.shape(), &[co, oh, ow]);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-13, "case {:?}", (c, h, w, co, kh, kw, stride, pad, groups));
        }
    }
}

#[test]
fn layer_norm_matches_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[5, 7], &mut rng);
    let g = random(&[7], &mut rng);
    let b = random(&[7], &mut rng);
    let (y, _) = kernels::layer_norm(&x, &g, &b).unwrap();
    for r in 0..5 {
        let row = &x.data()[r * 7..(r + 1) * 7];
        let mean = row.iter().sum::<f64>() / 7.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
        for c in 0..7 {
            let want = (row[c] - mean) / (var + kernels::LAYER_NORM_EPS).sqrt() * g.data()[c] + b.data()[c];
            assert!((y.at2(r, c) - want).abs() < 1e-13);
        }
    }
}

#[test]
fn softmax_rows_match_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::<f64>::from_fn(&[4, 6], |_| rng.random_range(-30.0..30.0));
    let y = kernels::softmax_rows(&x).unwrap();
    for r in 0..4 {
        let row = &x.data()[r * 6..(r + 1) * 6];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for c in 0..6 {
            assert!((y.at2(r, c) - row[c].exp() / z).abs() < 1e-13);
        }
    }
}

/// Multi-head attention computed with plain loops from named parameters.
fn attention_oracle(
    store: &ParamStore<f64>,
    prefix: &str,
    queries: &Tensor<f64>,
    memory: &Tensor<f64>,
    memory_pe: &Tensor<f64>,
    heads: usize,
    transforms: Option<&QaMemParams<f64>>,
) -> Tensor<f64> {
    let p = |name: &str| store.get(store.find(&format!("{prefix}.{name}")).unwrap()).clone();
    let (n, d) = (queries.shape()[0], queries.shape()[1]);
    let s = memory.shape()[0];
    let proj = |x: &[f64], rows: usize, w: &Tensor<f64>, b: &Tensor<f64>| {
        let mut out = triple_loop(x, w.data(), rows, d, d);
        for r in 0..rows {
            for c in 0..d {
                out[r * d + c] += b.data()[c];
            }
        }
        out
    };
    let keyed: Vec<f64> = memory.data().iter().zip(memory_pe.data()).map(|(a, b)| a + b).collect();
    let q = proj(queries.data(), n, &p("wq"), &p("bq"));
    let k = proj(&keyed, s, &p("wk"), &p("bk"));
    let v = proj(memory.data(), s, &p("wv"), &p("bv"));
    let dh = d / heads;
    let mut merged = vec![0.0; n * d];
    for h in 0..heads {
        for i in 0..n {
            let logits: Vec<f64> = (0..s)
                .map(|j| (0..dh).map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for j in 0..s {
                let a = (logits[j] - mx).exp() / z;
                for c in 0..dh {
                    merged[i * d + h * dh + c] += a * v[j * d + h * dh + c];
                }
            }
        }
    }
    if let Some(t) = transforms {
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let ti = t.transform(i);
            for o in 0..d {
                out[i * d + o] = (0..d).map(|c| merged[i * d + c] * ti.at2(c, o)).sum();
            }
        }
        merged = out;
    }
    let y = proj(&merged, n, &p("wo"), &p("bo"));
    Tensor::new(&[n, d], y).unwrap()
}

#[test]
fn cross_attention_matches_loop_oracle() {
    for (use_qamem, heads) in [(false, 1), (false, 2), (true, 1), (true, 4)] {
        let cfg = ModelConfig {
            image_size: 16,
            stride: 4,
            num_landmarks: 5,
            hidden_dim: 8,
            num_heads: heads,
            use_qamem,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let head = DecoderHead::build(&HeadConfig::from_model(&cfg), &mut store, &mut rng).unwrap();
        // non-trivial biases so they are exercised
        for p in store.iter_mut() {
            if p.name.ends_with(".bq") || p.name.ends_with(".bv") || p.name.ends_with(".bo") || p.name.ends_with(".bk") {
                p.value = random(p.value.shape(), &mut rng);
            }
        }
        let s = cfg.memory_len();
        let queries = random(&[5, 8], &mut rng);
        let memory = random(&[s, 8], &mut rng);
        let pe = store.get(head.memory_pe_id()).clone();
        let transforms = head.qamem(0).map(|m| m.params(&store).unwrap());
        let want = attention_oracle(&store, "decoder.layer0.cross_attn", &queries, &memory, &pe, heads, transforms.as_ref());
        for variant in [QaMemVariant::Naive, QaMemVariant::Efficient] {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, false);
            let q = tape.constant(queries.clone());
            let m = tape.constant(memory.clone());
            let (out, weights) = head.cross_attention(&mut tape, &bound, 0, q, m, variant).unwrap();
            assert_eq!(weights.len(), heads);
            let diff = tape.value(out).max_abs_diff(&want).unwrap();
            assert!(diff < 1e-12, "qamem={use_qamem} heads={heads} {variant:?}: {diff}");
        }
    }
}
