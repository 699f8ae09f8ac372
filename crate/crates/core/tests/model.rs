use pslnet::image::{batch_to_tensor, Image};
use pslnet::loss::{loss_and_output_grads, loss_gradient, LossType, Targets};
use pslnet::model::{summarize, Ablation, ModelConfig, Pslnet};
use pslnet::nn::ConvGraph;
use pslnet::perception::PerceptionNet;
use pslnet::rng::seeded;
use pslnet::tensor::Tensor;
use rand::Rng;

/// One improved U-Net of the toy preset, written out by hand:
/// (c_in, c_out, downscale) for each 3×3 convolution.
const TOY_IUNET: [(usize, usize, usize); 18] = [
    (3, 8, 0),
    (8, 8, 0),
    (8, 16, 1),
    (16, 16, 1),
    (16, 32, 2),
    (32, 32, 2),
    (32, 64, 3),
    (64, 64, 3),
    (64, 128, 4),
    (128, 128, 4),
    (192, 64, 3),
    (64, 64, 3),
    (96, 32, 2),
    (32, 32, 2),
    (48, 16, 1),
    (16, 16, 1),
    (19, 8, 0),
    (8, 3, 0),
];

#[test]
fn toy_parameter_count_matches_hand_count() {
    let unet: usize = TOY_IUNET.iter().map(|&(i, o, _)| 9 * i * o + o).sum();
    assert_eq!(unet, 490_403);
    let gates = 2 * ((3 * 16 + 16) + (16 * 3 + 3));
    let em = 9 * 6 * 3 + 3;
    let total = 4 * unet + gates + em;
    assert_eq!(summarize(&ModelConfig::toy()).parameter_count, total);
    assert_eq!(Pslnet::<f32>::new(ModelConfig::toy()).unwrap().param_count(), total);
}

#[test]
fn toy_flops_match_hand_count() {
    let (h, w) = (64usize, 64usize);
    let unet: u64 = TOY_IUNET
        .iter()
        .map(|&(i, o, s)| (2 * 9 * i * o * (h >> s) * (w >> s)) as u64)
        .sum();
    let gates = 2 * 2 * (3 * 16 + 16 * 3) as u64;
    let em = (2 * 9 * 6 * 3 * h * w) as u64;
    assert_eq!(summarize(&ModelConfig::toy()).flops_at(h, w), 4 * unet + gates + em);
}

#[test]
fn conv_counts_follow_depth() {
    for depth in 1..=4 {
        let net = Pslnet::<f32>::new(ModelConfig::with_base(2, depth)).unwrap();
        let per_unet = 4 * depth + 2;
        assert_eq!(net.branch_conv_counts(), (2 * per_unet, 2 * per_unet));
        assert_eq!(summarize(&net.config).conv_layers, 4 * per_unet + 5);
    }
}

fn random_batch(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = seeded(seed);
    Tensor::from_vec(&[3, n, h, w], (0..3 * n * h * w).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

/// Random biases, so no pre-activation sits exactly on a ReLU kink at the
/// point being differentiated (zero biases put dead receptive fields at 0).
fn jitter_biases(model: &mut Pslnet<f64>, seed: u64) {
    let mut rng = seeded(seed);
    model.for_each_param_mut(&mut |name, t| {
        if name.ends_with("bias") {
            t.data_mut().iter_mut().for_each(|b| *b += rng.gen_range(-0.05..0.05));
        }
    });
}

/// Central differences on a few parameters of every tensor class, for each
/// combination of ablation switches and both loss types.
#[test]
fn gradients_match_finite_differences_under_every_toggle() {
    let cfg = ModelConfig::with_base(2, 2);
    let mut model = Pslnet::<f64>::seeded(cfg, 31).unwrap();
    jitter_biases(&mut model, 32);
    let pn = PerceptionNet::<f64>::seeded(2);
    let x = random_batch(2, 8, 8, 1);
    let dn = random_batch(2, 8, 8, 2);
    let rm = random_batch(2, 8, 8, 3);
    let targets = Targets {
        denoise: &dn,
        removal: &rm,
    };
    let mut rng = seeded(4);
    for interactions in [true, false] {
        for enhancement in [true, false] {
            for (kind, lambda) in [(LossType::L1, 0.3), (LossType::L2, 0.0)] {
                let ablation = Ablation {
                    interactions,
                    enhancement,
                };
                let loss = |m: &Pslnet<f64>| {
                    let fwd = m.forward(&x, ablation).unwrap();
                    loss_and_output_grads(&fwd, &targets, &pn, lambda, kind, false).unwrap().0.total
                };
                let g = loss_gradient(&model, &pn, &x, &targets, lambda, kind, ablation).unwrap();
                let analytic = g.params.named_params();
                for _ in 0..6 {
                    let (name, t) = &analytic[rng.gen_range(0..analytic.len())];
                    let idx = rng.gen_range(0..t.len());
                    let shifted = |d: f64| {
                        let mut m = model.clone();
                        m.for_each_param_mut(&mut |n, p| {
                            if n == name {
                                p.data_mut()[idx] += d;
                            }
                        });
                        loss(&m)
                    };
                    let numeric = (shifted(1e-6) - shifted(-1e-6)) / 2e-6;
                    let a = t.data()[idx];
                    let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
                    assert!(
                        err < 1e-4 || (a - numeric).abs() < 1e-9,
                        "{name}[{idx}] {ablation:?} {kind:?}: analytic {a:e} numeric {numeric:e}"
                    );
                }
            }
        }
    }
}

#[test]
fn enhancement_off_returns_lower_branch() {
    let model = Pslnet::<f32>::seeded(ModelConfig::with_base(2, 2), 5).unwrap();
    let x = random_batch(1, 8, 8, 9).cast::<f32>();
    let fwd = model
        .forward(
            &x,
            Ablation {
                interactions: true,
                enhancement: false,
            },
        )
        .unwrap();
    assert_eq!(fwd.fused, fwd.lower);
}

#[test]
fn forward_is_deterministic_and_shaped() {
    let model = Pslnet::<f32>::seeded(ModelConfig::toy(), 6).unwrap();
    let again = Pslnet::<f32>::seeded(ModelConfig::toy(), 6).unwrap();
    assert_eq!(model, again);
    let x = random_batch(2, 32, 48, 2).cast::<f32>();
    let a = model.forward(&x, Ablation::default()).unwrap();
    let b = model.forward(&x, Ablation::default()).unwrap();
    assert_eq!(a.fused, b.fused);
    for t in [&a.dn_out, &a.upper, &a.lower, &a.fused] {
        assert_eq!(t.shape(), &[3, 2, 32, 48]);
    }
    assert_eq!(a.gate1.shape(), &[3, 2, 1, 1]);
    assert!(a.gate1.data().iter().all(|&g| g > 0.0 && g < 1.0));
}

#[test]
fn rejects_sizes_not_divisible_by_depth() {
    let model = Pslnet::<f32>::new(ModelConfig::toy()).unwrap();
    let x = Tensor::<f32>::zeros(&[3, 1, 24, 32]);
    assert!(model.forward(&x, Ablation::default()).is_err());
    let x = Tensor::<f32>::zeros(&[4, 1, 32, 32]);
    assert!(model.forward(&x, Ablation::default()).is_err());
}

#[test]
fn padded_inference_equals_cropped_direct_inference() {
    let model = Pslnet::<f32>::seeded(ModelConfig::toy(), 7).unwrap();
    let img = Image::from_fn(21, 37, |c, y, x| ((c * 13 + y * 5 + x * 3) % 29) as f32 / 29.0);
    let padded = img.reflect_pad(32, 48).unwrap();
    let direct = model.infer(&padded, Ablation::default(), false).unwrap();
    let via = model.infer_padded(&img, Ablation::default()).unwrap();
    assert_eq!(via.fused, direct.fused.crop(0, 0, 21, 37).unwrap());
    assert_eq!(via.upper, direct.upper.crop(0, 0, 21, 37).unwrap());
}

#[test]
fn infer_keeps_intermediates_on_request() {
    let model = Pslnet::<f32>::seeded(ModelConfig::with_base(2, 2), 1).unwrap();
    let img = Image::filled(8, 8, 0.5);
    let out = model.infer(&img, Ablation::default(), true).unwrap();
    let inter = out.intermediates.unwrap();
    assert_eq!(inter["dn"].len(), 3 * 64);
    assert_eq!(inter["gate1"].len(), 3);
    let x = batch_to_tensor::<f32>(&[&img]).unwrap();
    let fwd = model.forward(&x, Ablation::default()).unwrap();
    assert_eq!(inter["gate2"], fwd.gate2.data());
}

#[test]
fn f64_and_f32_forward_agree() {
    let m64 = Pslnet::<f64>::seeded(ModelConfig::with_base(4, 2), 3).unwrap();
    let m32: Pslnet<f32> = m64.cast();
    let x = random_batch(1, 16, 16, 5);
    let a = m64.forward(&x, Ablation::default()).unwrap().fused;
    let b = m32.forward(&x.cast(), Ablation::default()).unwrap().fused;
    let max = a.data().iter().zip(b.data()).map(|(p, q)| (p - *q as f64).abs()).fold(0.0, f64::max);
    assert!(max < 1e-4, "{max}");
}

