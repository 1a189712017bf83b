//! Finite-difference checks of every layer and of the end-to-end loss.

use fedfusion_core::model::{
    client_backward, client_forward, FeatureBundle, FusionModelParams, Modality, ModelConfig, Path,
};
use fedfusion_core::tensor::gradcheck::{grad_check, grad_check_piecewise};
use fedfusion_core::tensor::with_f64_shadow;
use fedfusion_core::tensor::*;
use fedfusion_core::TensorBundle;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LAYER_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;
pub const SEEDS: u64 = 10;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
    )
    .unwrap()
}

/// Random values whose magnitudes stay at least `margin` away from zero.
fn away_from_zero(shape: &[usize], margin: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f32 = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `<y, r>` over the unrounded layer output.
fn project(
    y: impl FnOnce() -> fedfusion_core::Result<Tensor>,
    r: &Tensor,
) -> fedfusion_core::Result<f64> {
    let y = with_f64_shadow(y)?.to_f64();
    Ok(y.iter().zip(r.data()).map(|(&a, &b)| a * b as f64).sum())
}

fn as_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn grad_of(t: &Tensor) -> Vec<f64> {
    t.grad().unwrap().iter().map(|&v| v as f64).collect()
}

pub fn conv2d_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, 3, 5, 5], &mut rng);
        let mut p =
            LayerParams::conv_from_tensors(random(&[4, 3, 3, 3], &mut rng), random(&[4], &mut rng))
                .unwrap();
        let (y, cache) = conv2d(&x, &p, Padding::Same).unwrap();
        let r = random(y.shape(), &mut rng);
        let gx = conv2d_backward(&cache, &mut p, &r).unwrap();

        grad_check(
            |t| project(|| Ok(conv2d(t, &p, Padding::Same)?.0), &r),
            &x,
            &as_f64(&gx),
            LAYER_TOL,
        )
        .unwrap();
        let gw = grad_of(&p.weights);
        let mut probe = p.clone();
        grad_check(
            |w| {
                probe.weights = w.clone();
                project(|| Ok(conv2d(&x, &probe, Padding::Same)?.0), &r)
            },
            &p.weights,
            &gw,
            LAYER_TOL,
        )
        .unwrap();
        let gb = grad_of(&p.bias);
        let mut probe = p.clone();
        grad_check(
            |b| {
                probe.bias = b.clone();
                project(|| Ok(conv2d(&x, &probe, Padding::Same)?.0), &r)
            },
            &p.bias,
            &gb,
            LAYER_TOL,
        )
        .unwrap();
    }
}

pub fn batch_norm_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = random(&[3, 2, 3, 3], &mut rng);
        let mut p = LayerParams::batch_norm(2);
        p.weights = random(&[2], &mut rng);
        p.bias = random(&[2], &mut rng);
        for mode in [BnMode::Train, BnMode::Eval] {
            p.zero_grad();
            let (y, cache) = batch_norm_forward(&x, &p, mode, BN_EPS).unwrap();
            let r = random(y.shape(), &mut rng);
            let gx = batch_norm_backward(&cache, &mut p, &r).unwrap();
            grad_check(
                |t| project(|| Ok(batch_norm_forward(t, &p, mode, BN_EPS)?.0), &r),
                &x,
                &as_f64(&gx),
                LAYER_TOL,
            )
            .unwrap();
            let gs = grad_of(&p.weights);
            let mut probe = p.clone();
            grad_check(
                |s| {
                    probe.weights = s.clone();
                    project(|| Ok(batch_norm_forward(&x, &probe, mode, BN_EPS)?.0), &r)
                },
                &p.weights,
                &gs,
                LAYER_TOL,
            )
            .unwrap();
            let gt = grad_of(&p.bias);
            let mut probe = p.clone();
            grad_check(
                |s| {
                    probe.bias = s.clone();
                    project(|| Ok(batch_norm_forward(&x, &probe, mode, BN_EPS)?.0), &r)
                },
                &p.bias,
                &gt,
                LAYER_TOL,
            )
            .unwrap();
        }
    }
}

pub fn relu_gradients_away_from_kink() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let x = away_from_zero(&[2, 10], 1e-2, &mut rng);
        let (y, cache) = relu(&x);
        let r = random(y.shape(), &mut rng);
        let gx = relu_backward(&cache, &r).unwrap();
        // piecewise linear: masked gradients are exact
        for ((&g, &xv), &rv) in gx.data().iter().zip(x.data()).zip(r.data()) {
            assert_eq!(g, if xv > 0.0 { rv } else { 0.0 });
        }
        grad_check(
            |t| project(|| Ok(relu(t).0), &r),
            &x,
            &as_f64(&gx),
            LAYER_TOL,
        )
        .unwrap();
    }
}

pub fn max_pool_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        // distinct values spaced well above the perturbation keep argmax stable
        let mut vals: Vec<f32> = (0..2 * 2 * 5 * 5).map(|i| i as f32 * 0.01).collect();
        for i in (1..vals.len()).rev() {
            vals.swap(i, rng.gen_range(0..=i));
        }
        let x = Tensor::new(vec![2, 2, 5, 5], vals).unwrap();
        let (y, cache) = max_pool2d(&x).unwrap();
        let r = random(y.shape(), &mut rng);
        let gx = max_pool2d_backward(&cache, &r).unwrap();
        let routed: f64 = gx.data().iter().map(|&v| v as f64).sum();
        let upstream: f64 = r.data().iter().map(|&v| v as f64).sum();
        assert!((routed - upstream).abs() < 1e-5);
        grad_check(
            |t| project(|| Ok(max_pool2d(t)?.0), &r),
            &x,
            &as_f64(&gx),
            LAYER_TOL,
        )
        .unwrap();
    }
}

pub fn dense_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let x = random(&[3, 5], &mut rng);
        let mut p = LayerParams::from_tensors(
            LayerKind::Dense,
            random(&[4, 5], &mut rng),
            random(&[4], &mut rng),
        )
        .unwrap();
        let (y, cache) = dense(&x, &p).unwrap();
        let r = random(y.shape(), &mut rng);
        let gx = dense_backward(&cache, &mut p, &r).unwrap();
        grad_check(
            |t| project(|| Ok(dense(t, &p)?.0), &r),
            &x,
            &as_f64(&gx),
            LAYER_TOL,
        )
        .unwrap();
        let gw = grad_of(&p.weights);
        let mut probe = p.clone();
        grad_check(
            |w| {
                probe.weights = w.clone();
                project(|| Ok(dense(&x, &probe)?.0), &r)
            },
            &p.weights,
            &gw,
            LAYER_TOL,
        )
        .unwrap();
    }
}

pub fn softmax_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let x = random(&[3, 4], &mut rng);
        let y = softmax(&x).unwrap();
        let r = random(y.shape(), &mut rng);
        let gx = softmax_backward(&y, &r).unwrap();
        grad_check(|t| project(|| softmax(t), &r), &x, &as_f64(&gx), LAYER_TOL).unwrap();
    }
}

fn toy_config() -> ModelConfig {
    ModelConfig {
        in_channels: [3, 2],
        branch_channels: 4,
        upsample_channels: 5,
        patch: 7,
        classes: 3,
        l2_coeff: 1e-2,
    }
}

fn feeds_train_batch_norm(name: &str) -> bool {
    name.ends_with(".bias")
        && (name.starts_with("branch.") || name.starts_with("upsample."))
        && !name.contains(".bn")
}

pub fn conv_bias_before_batch_norm_is_loss_invariant() {
    let cfg = toy_config();
    let mut rng = ChaCha8Rng::seed_from_u64(700);
    let params = FusionModelParams::init(cfg.clone(), 7).unwrap();
    let x = random(&[2, cfg.in_channels[0], 7, 7], &mut rng);
    let mut target = Tensor::zeros(&[2, cfg.classes]);
    target.data_mut()[0] = 1.0;
    target.data_mut()[cfg.classes + 1] = 1.0;
    let loss = |p: &FusionModelParams| {
        let pass = client_forward(p, Modality::M1, &x, None, BnMode::Train, Path::Single).unwrap();
        fedfusion_core::model::compute_loss(&pass.outputs, &target, p, Modality::M1, Path::Single)
            .unwrap()
            .total
    };
    let base = loss(&params);
    let mut shifted = params.clone();
    for v in shifted.branch_mut(Modality::M1).conv.bias.data_mut() {
        *v += 0.25;
    }
    assert!((loss(&shifted) - base).abs() < 1e-5 * base.abs().max(1.0));
}

pub fn end_to_end_loss_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let cfg = toy_config();
        let own = if seed % 2 == 0 {
            Modality::M1
        } else {
            Modality::M2
        };
        let mut params = FusionModelParams::init(cfg.clone(), seed).unwrap();
        // perturb every tensor so biases and BN affine terms are non-trivial
        for t in params.tensors_mut() {
            let shape = t.shape().to_vec();
            let noise = random(&shape, &mut rng);
            let data: Vec<f32> = t
                .data()
                .iter()
                .zip(noise.data())
                .map(|(a, b)| a + 0.1 * b)
                .collect();
            *t = Tensor::new(shape, data).unwrap();
        }
        let x = random(
            &[2, cfg.in_channels[own.index()], cfg.patch, cfg.patch],
            &mut rng,
        );
        let s = cfg.feature_hw();
        let remote = FeatureBundle::new(
            random(&[2, cfg.upsample_channels, s, s], &mut rng),
            random(&[2, cfg.upsample_channels, s, s], &mut rng),
            own.other(),
        )
        .unwrap();
        let mut target = vec![0.0f32; 2 * cfg.classes];
        target[rng.gen_range(0..cfg.classes)] = 1.0;
        target[cfg.classes + rng.gen_range(0..cfg.classes)] = 1.0;
        let target = Tensor::new(vec![2, cfg.classes], target).unwrap();

        params.zero_grad();
        let pass =
            client_forward(&params, own, &x, Some(&remote), BnMode::Train, Path::Fusion).unwrap();
        client_backward(&pass, &mut params, &target).unwrap();
        let grads = params.gradients();

        let total = |p: &FusionModelParams| -> (f64, u64) {
            with_f64_shadow(|| {
                let pass =
                    client_forward(p, own, &x, Some(&remote), BnMode::Train, Path::Fusion).unwrap();
                let loss = fedfusion_core::model::compute_loss(
                    &pass.outputs,
                    &target,
                    p,
                    own,
                    Path::Fusion,
                )
                .unwrap();
                (loss.total, pass.activation_signature())
            })
        };

        let n = params.tensors().len();
        let grad_tensors = grads.tensors();
        let names = params.tensor_names();
        for k in 0..n {
            let name = &names[k];
            if name.contains("running") || name.contains(&format!("branch.{}", own.other())) {
                continue;
            }
            let analytic = as_f64(grad_tensors[k]);
            if feeds_train_batch_norm(name) {
                // batch statistics absorb a constant shift exactly
                assert!(
                    analytic.iter().all(|a| a.abs() < 1e-6),
                    "{name}: {analytic:?}"
                );
                continue;
            }
            let base = params.tensors()[k].clone();
            let mut probe = params.clone();
            let report = grad_check_piecewise(
                |t| {
                    *probe.tensors_mut()[k] = t.clone();
                    Ok(total(&probe))
                },
                &base,
                &analytic,
                END_TO_END_TOL,
            )
            .unwrap_or_else(|e| panic!("seed {seed} tensor {name}: {e}"));
            assert!(report.checked > 0, "{name} fully skipped");
        }
    }
}

/// Every check above, in order.
pub fn all() {
    conv2d_gradients();
    batch_norm_gradients();
    relu_gradients_away_from_kink();
    max_pool_gradients();
    dense_gradients();
    softmax_gradients();
    conv_bias_before_batch_norm_is_loss_invariant();
    end_to_end_loss_gradients();
}
