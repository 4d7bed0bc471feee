#![allow(dead_code)]

use lmdet::config::{ModelConfig, QaMemVariant, RunConfig};
use lmdet::gradcheck::{check_gradients, probe_loss, GradReport, DEFAULT_EPS};
use lmdet::metrics::l1_loss_var;
use lmdet::model::Model;
use lmdet::params::{Bound, ParamStore};
use lmdet::qamem::QaMem;
use lmdet::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOL: f64 = 1e-6;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Random values bounded away from zero, so that kinks of relu/abs are not
/// crossed by the finite-difference step.
pub fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

/// Toy model shape: N = 4, d = 8, 12×12 image at stride 4 gives S = 9.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        image_size: 12,
        in_channels: 1,
        stride: 4,
        num_landmarks: 4,
        hidden_dim: 8,
        num_heads: 2,
        num_decoder_layers: 1,
        ffn_dim: 16,
        ..ModelConfig::default()
    }
}

/// A run small enough to train in well under a second: 32px faces with 8
/// landmarks, stride 8 (S = 16), d = 16, three epochs of 24 images.
pub fn small_run_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&[
        "data.num_landmarks=8",
        "data.image_size=32",
        "data.train_count=24",
        "data.test_count=8",
        "model.stride=8",
        "model.hidden_dim=16",
        "model.num_heads=2",
        "model.ffn_dim=32",
        "train.epochs=3",
        "train.lr_decay_epoch=2",
        "train.batch_size=8",
        "train.lr=1e-3",
    ])
    .unwrap();
    cfg.validate().unwrap();
    cfg
}

/// Model whose constant-initialized tensors (biases, norm scales, the zero
/// predictor output layer) are perturbed, so no gradient is trivially zero.
pub fn randomized_model(cfg: &ModelConfig, seed: u64) -> Model<f64> {
    let mut model = Model::<f64>::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    for p in model.params_mut().iter_mut() {
        let first = p.value.data()[0];
        if p.value.data().iter().all(|&v| v == first) {
            let noise = random(p.value.shape(), &mut rng);
            p.value = p.value.zip_map(&noise, "perturb", |v, e| v + 0.3 * e).unwrap();
        }
    }
    model
}

fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> GradReport {
    check_gradients(&inputs, build, DEFAULT_EPS).unwrap()
}

fn probed<F>(probe_seed: u64, out: F) -> impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    move |tape: &mut Tape<f64>, v: &[Var]| {
        let y = out(tape, v)?;
        let shape = tape.shape(y).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
        let probe = random(&shape, &mut rng);
        probe_loss(tape, y, &probe)
    }
}

/// Gradient check of `Σ probe ⊙ model(image)` with respect to the image and
/// every parameter.
pub fn model_gradient_report(cfg: &ModelConfig, seed: u64) -> GradReport {
    let model = randomized_model(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let image = Tensor::from_fn(&[cfg.in_channels, cfg.image_size, cfg.image_size], |_| rng.random_range(0.0..1.0));
    let mut inputs = vec![image];
    inputs.extend(model.params().iter().map(|p| p.value.clone()));
    check(
        inputs,
        probed(seed + 200, |tape: &mut Tape<f64>, v: &[Var]| {
            let bound = Bound::from_vars(v[1..].to_vec());
            Ok(model.forward(tape, &bound, v[0], None)?.landmarks)
        }),
    )
}

/// `(name, report)` for every differentiable tape op and every model-level
/// composite at toy shapes.
pub fn gradient_suite() -> Vec<(String, GradReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out: Vec<(String, GradReport)> = Vec::new();
    let mut add = |name: &str, r: GradReport| out.push((name.to_string(), r));

    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 5], &mut rng);
    add("matmul", check(vec![a.clone(), b], probed(1, |t, v| t.matmul(v[0], v[1]))));
    let c = random(&[3, 4], &mut rng);
    add("add", check(vec![a.clone(), c.clone()], probed(2, |t, v| t.add(v[0], v[1]))));
    add("sub", check(vec![a.clone(), c.clone()], probed(3, |t, v| t.sub(v[0], v[1]))));
    add("mul", check(vec![a.clone(), c.clone()], probed(4, |t, v| t.mul(v[0], v[1]))));
    add("scale", check(vec![a.clone()], probed(5, |t, v| Ok(t.scale(v[0], -1.7)))));
    let bias = random(&[4], &mut rng);
    add("add_bias", check(vec![a.clone(), bias.clone()], probed(6, |t, v| t.add_bias(v[0], v[1]))));
    let img = random(&[3, 4, 5], &mut rng);
    let cb = random(&[3], &mut rng);
    add(
        "add_channel_bias",
        check(vec![img.clone(), cb], probed(7, |t, v| t.add_channel_bias(v[0], v[1]))),
    );
    let w = random(&[4, 6], &mut rng);
    let wb = random(&[6], &mut rng);
    add("linear", check(vec![a.clone(), w, wb], probed(8, |t, v| t.linear(v[0], v[1], v[2]))));
    let nz = away_from_zero(&[3, 4], &mut rng);
    add("relu", check(vec![nz.clone()], probed(9, |t, v| Ok(t.relu(v[0])))));
    add("abs", check(vec![nz.clone()], probed(10, |t, v| Ok(t.abs(v[0])))));
    add("sigmoid", check(vec![a.clone().map(|x| 4.0 * x)], probed(11, |t, v| Ok(t.sigmoid(v[0])))));
    add("softmax_rows", check(vec![a.clone().map(|x| 3.0 * x)], probed(12, |t, v| t.softmax_rows(v[0]))));
    let g = random(&[4], &mut rng);
    add(
        "layer_norm",
        check(vec![a.clone(), g, bias.clone()], probed(13, |t, v| t.layer_norm(v[0], v[1], v[2]))),
    );
    for (i, &(cin, h, cout, k, stride, pad, groups)) in [
        (2usize, 5usize, 3usize, 3usize, 1usize, 1usize, 1usize),
        (2, 7, 4, 3, 2, 0, 1),
        (4, 4, 4, 1, 1, 0, 4),
        (6, 5, 4, 3, 1, 1, 2),
    ]
    .iter()
    .enumerate()
    {
        let x = random(&[cin, h, h], &mut rng);
        let kern = random(&[cout, cin / groups, k, k], &mut rng);
        add(
            &format!("conv2d[{cin}->{cout} k{k} s{stride} p{pad} g{groups}]"),
            check(
                vec![x, kern],
                probed(20 + i as u64, move |t, v| t.conv2d(v[0], v[1], stride, pad, groups)),
            ),
        );
    }
    add("pad2d", check(vec![img.clone()], probed(30, |t, v| t.pad2d(v[0], 1, 0, 2, 1))));
    add("global_avg_pool", check(vec![img.clone()], probed(31, |t, v| t.global_avg_pool(v[0]))));
    add("transpose", check(vec![random(&[4, 5], &mut rng)], probed(32, |t, v| t.transpose(v[0]))));
    add("reshape", check(vec![img.clone()], probed(33, |t, v| t.reshape(v[0], &[12, 5]))));
    let r2 = random(&[2, 4], &mut rng);
    add("concat_rows", check(vec![a.clone(), r2], probed(34, |t, v| t.concat_rows(&[v[0], v[1]]))));
    let c2 = random(&[3, 2], &mut rng);
    add("concat_cols", check(vec![a.clone(), c2], probed(35, |t, v| t.concat_cols(&[v[0], v[1]]))));
    add("slice_rows", check(vec![a.clone()], probed(36, |t, v| t.slice_rows(v[0], 1, 3))));
    add("slice_cols", check(vec![a.clone()], probed(37, |t, v| t.slice_cols(v[0], 1, 4))));
    add("sum", check(vec![a.clone()], |t, v| Ok(t.sum(v[0]))));
    add("mean", check(vec![a.clone()], |t, v| Ok(t.mean(v[0]))));
    add("dropout", check(vec![a.clone()], probed(38, |t, v| t.dropout(v[0], 0.3, 99))));
    let gt = random(&[4, 2], &mut rng);
    let pred = gt.clone().zip_map(&away_from_zero(&[4, 2], &mut rng), "t", |x, y| x + 0.1 * y).unwrap();
    add(
        "l1_loss",
        check(vec![pred, gt], |t, v| l1_loss_var(t, v[0], v[1])),
    );

    // query-aware memory through both computations
    let (n, s, d, heads) = (4, 9, 8, 2);
    let mut store = ParamStore::<f64>::new();
    let mut qrng = ChaCha8Rng::seed_from_u64(40);
    let qamem = QaMem::build("qamem.test", n, d, &mut store, &mut qrng);
    let kernel = random(store.get(qamem.kernel_id()).shape(), &mut qrng);
    let logits: Vec<Tensor<f64>> = (0..heads).map(|_| random(&[n, s], &mut qrng)).collect();
    let values = random(&[s, d], &mut qrng);
    for variant in [QaMemVariant::Naive, QaMemVariant::Efficient] {
        let qamem = qamem.clone();
        let inputs = vec![kernel.clone(), logits[0].clone(), logits[1].clone(), values.clone()];
        add(
            &format!("qamem[{}]", variant.as_str()),
            check(
                inputs,
                probed(41, move |t: &mut Tape<f64>, v: &[Var]| {
                    let bound = Bound::from_vars(vec![v[0]]);
                    let a0 = t.softmax_rows(v[1])?;
                    let a1 = t.softmax_rows(v[2])?;
                    match variant {
                        QaMemVariant::Naive => qamem.apply_naive(t, &bound, &[a0, a1], v[3]),
                        QaMemVariant::Efficient => {
                            let dh = d / heads;
                            let v0 = t.slice_cols(v[3], 0, dh)?;
                            let v1 = t.slice_cols(v[3], dh, d)?;
                            let e0 = t.matmul(a0, v0)?;
                            let e1 = t.matmul(a1, v1)?;
                            let e = t.concat_cols(&[e0, e1])?;
                            qamem.apply_efficient(t, &bound, e)
                        }
                    }
                }),
            ),
        );
    }

    // full model variants
    let base = toy_model_config();
    let variants = [
        ("model[baseline]", ModelConfig { use_dqinit: false, use_qamem: false, ..base.clone() }),
        ("model[dqinit]", ModelConfig { use_dqinit: true, use_qamem: false, ..base.clone() }),
        ("model[qamem efficient]", ModelConfig { use_dqinit: false, use_qamem: true, ..base.clone() }),
        (
            "model[qamem naive]",
            ModelConfig { use_dqinit: false, use_qamem: true, qamem_variant: QaMemVariant::Naive, ..base.clone() },
        ),
        ("model[both, 2 layers]", ModelConfig { num_decoder_layers: 2, ..base.clone() }),
    ];
    for (i, (name, cfg)) in variants.iter().enumerate() {
        assert_eq!(cfg.memory_len(), 9);
        add(name, model_gradient_report(cfg, 7 + i as u64));
    }
    out
}
