use std::sync::OnceLock;

use featdenoise::analyze::{cka_similarity, cosine_similarity};
use featdenoise::backbone::{extract_features, random_weights, Arch, FrozenEncoder, Variant};
use featdenoise::eval::{psnr, ssim};
use featdenoise::model::{Denoiser, DenoiserConfig, Mode};
use featdenoise::noise::{NoiseKind, NoiseSpec, SpatialKernel};
use featdenoise::optim::cosine_lr;
use featdenoise::{scenes, Image, RangeTag, Tensor};
use proptest::prelude::*;

const TINY: Arch = Arch {
    width: 8,
    layers: [1, 1, 1, 1],
};

fn encoder() -> &'static FrozenEncoder {
    static ENC: OnceLock<FrozenEncoder> = OnceLock::new();
    ENC.get_or_init(|| {
        let map = random_weights(TINY, 4, 11).unwrap();
        FrozenEncoder::from_tensors(&map, Variant::Custom, 4).unwrap()
    })
}

fn tiny_config(inject: bool) -> DenoiserConfig {
    DenoiserConfig {
        backbone_variant: Variant::Custom,
        decoder_widths: vec![4, 4, 4, 4, 4],
        inject_noisy_input: inject,
        ..DenoiserConfig::default()
    }
}

fn kind_strategy() -> impl Strategy<Value = NoiseKind> {
    prop_oneof![
        (0.0f64..80.0).prop_map(|sigma| NoiseKind::Gaussian { sigma }),
        (0.0f64..80.0).prop_map(|sigma| NoiseKind::SpatialGaussian {
            sigma,
            kernel: SpatialKernel::default()
        }),
        (2.0f64..4.0).prop_map(|alpha| NoiseKind::Poisson { alpha }),
        (0.0f64..0.1).prop_map(|var| NoiseKind::Speckle { var }),
        (0.0f64..0.5).prop_map(|d| NoiseKind::SaltPepper { d }),
        (0.0f64..0.1, 0.0f64..0.1).prop_map(|(sigma_s, sigma_c)| NoiseKind::PoissonGaussian { sigma_s, sigma_c }),
    ]
}

fn tensor(values: &[f64], c: usize, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_vec([1, c, h, w], values[..c * h * w].to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn noise_is_deterministic_and_range_safe(
        kind in kind_strategy(),
        seed in any::<u64>(),
        byte in any::<bool>(),
        scene_seed in 0u64..50,
    ) {
        let mut img = scenes::scene(20, 18, 3, scene_seed);
        if byte {
            img = img.to_range(RangeTag::Byte);
        }
        let spec = NoiseSpec::new(kind, seed).unwrap();
        let a = spec.apply(&img).unwrap();
        prop_assert_eq!(&a, &spec.apply(&img).unwrap());
        prop_assert_eq!(a.range(), img.range());
        let peak = img.range().peak() as f32;
        prop_assert!(a.data().iter().all(|&v| (0.0..=peak).contains(&v)));
    }

    #[test]
    fn pyramid_follows_the_shape_law(h in 32usize..110, w in 32usize..110) {
        let img = scenes::scene(h, w, 3, 1);
        let pyr = extract_features(encoder(), &img, 4).unwrap();
        for (i, &(ph, pw, c)) in pyr.shapes().iter().enumerate() {
            let level = i + 1;
            prop_assert_eq!(ph, h.div_ceil(1 << level));
            prop_assert_eq!(pw, w.div_ceil(1 << level));
            prop_assert_eq!(c, if level == 1 { 8 } else { 8 << level });
        }
    }

    #[test]
    fn denoiser_preserves_shape(h in 16usize..80, w in 16usize..80, gray in any::<bool>()) {
        let mut cfg = tiny_config(true);
        if gray {
            cfg.channels_in = 1;
        }
        let model = Denoiser::new(encoder().clone(), cfg, 0).unwrap();
        let img = scenes::scene(h, w, if gray { 1 } else { 3 }, 2);
        let out = model.forward(&img, 0).unwrap();
        prop_assert!(out.same_shape(&img));
        prop_assert_eq!(out.range(), img.range());
    }

    #[test]
    fn learning_rate_never_increases(total in 1u64..5000, init in 1e-5f64..1e-2, ratio in 0.0f64..1.0) {
        let fin = init * ratio;
        let mut prev = f64::INFINITY;
        let step = (total / 64).max(1);
        let mut it = 0;
        while it <= total {
            let lr = cosine_lr(it, total, init, fin).unwrap();
            prop_assert!(lr <= prev + 1e-18);
            prev = lr;
            it += step;
        }
    }

    #[test]
    fn cosine_is_symmetric_and_scale_invariant(
        values in prop::collection::vec(-1.0f64..1.0, 2 * 4 * 4 * 2),
        lambda in 0.01f64..100.0,
    ) {
        let a = tensor(&values[..32], 2, 4, 4);
        let b = tensor(&values[32..], 2, 4, 4);
        prop_assume!(a.data().iter().any(|&v| v != 0.0) && b.data().iter().any(|&v| v != 0.0));
        let ab = cosine_similarity(&a, &b).unwrap();
        prop_assert_eq!(ab, cosine_similarity(&b, &a).unwrap());
        prop_assert!((ab - cosine_similarity(&a, &b.map(|v| v * lambda)).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn cka_is_bounded_symmetric_and_scale_invariant(
        values in prop::collection::vec(-1.0f64..1.0, 3 * 5 * 4 + 2 * 5 * 4),
        lambda in 0.01f64..100.0,
    ) {
        let a = tensor(&values[..60], 3, 5, 4);
        let b = tensor(&values[60..], 2, 5, 4);
        let ab = cka_similarity(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - cka_similarity(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((ab - cka_similarity(&a.map(|v| v * lambda), &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn psnr_is_symmetric_and_falls_with_offset(seed in 0u64..1000, d1 in 0.001f32..0.2, extra in 0.001f32..0.2) {
        let a = scenes::scene(12, 12, 3, seed);
        let b = scenes::scene(12, 12, 3, seed + 1);
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        // No clipping: offsets are applied to an unclipped copy.
        let shift = |d: f32| Image::new(12, 12, 3, a.data().iter().map(|v| v + d).collect(), RangeTag::Unit).unwrap();
        let near = psnr(&a, &shift(d1), 1.0).unwrap().db;
        let far = psnr(&a, &shift(d1 + extra), 1.0).unwrap().db;
        prop_assert!(far < near);
    }

    #[test]
    fn ssim_is_one_on_itself_and_dihedral_invariant(seed in 0u64..1000, t in 0u8..8) {
        let a = scenes::scene(23, 17, 3, seed);
        let b = NoiseSpec::gaussian(20.0).unwrap().with_seed(seed).apply(&a).unwrap();
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let base = ssim(&a, &b).unwrap();
        let turned = ssim(&a.dihedral(t), &b.dihedral(t)).unwrap();
        prop_assert!((base - turned).abs() < 1e-12, "{} vs {}", base, turned);
    }
}

#[test]
fn noise_draws_with_different_seeds_are_uncorrelated() {
    // Spatially correlated draws need ~10⁶ samples for a 0.01 bound.
    let img = Image::filled(592, 592, 3, 0.5, RangeTag::Unit);
    let kinds = [
        NoiseKind::Gaussian { sigma: 25.0 },
        NoiseKind::SpatialGaussian {
            sigma: 25.0,
            kernel: SpatialKernel::default(),
        },
        NoiseKind::Poisson { alpha: 3.0 },
        NoiseKind::Speckle { var: 0.02 },
        NoiseKind::SaltPepper { d: 0.1 },
        NoiseKind::PoissonGaussian {
            sigma_s: 0.04,
            sigma_c: 0.03,
        },
    ];
    for kind in kinds {
        let a = NoiseSpec::new(kind, 1).unwrap().apply_unclipped(&img).unwrap();
        let b = NoiseSpec::new(kind, 2).unwrap().apply_unclipped(&img).unwrap();
        let ra: Vec<f64> = a.data().iter().map(|&v| v as f64 - 0.5).collect();
        let rb: Vec<f64> = b.data().iter().map(|&v| v as f64 - 0.5).collect();
        let n = ra.len() as f64;
        let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
        let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
        let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
        let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / n;
        let corr = cov / (va * vb).sqrt();
        assert!(corr.abs() < 0.01, "{}: correlation {corr}", kind.name());
    }
}

#[test]
fn train_mode_draws_differ_and_eval_mode_is_fixed() {
    let mut model = Denoiser::new(encoder().clone(), tiny_config(true), 1).unwrap();
    let img = scenes::scene(32, 32, 3, 3);
    assert_eq!(model.forward(&img, 1).unwrap(), model.forward(&img, 2).unwrap());
    model.set_mode(Mode::Train);
    assert_ne!(model.forward(&img, 1).unwrap(), model.forward(&img, 2).unwrap());
    assert_eq!(model.forward(&img, 1).unwrap(), model.forward(&img, 1).unwrap());
}

#[test]
fn without_injection_pixels_reach_the_output_only_through_the_encoder() {
    let with = Denoiser::new(encoder().clone(), tiny_config(true), 1).unwrap();
    let without = Denoiser::new(encoder().clone(), tiny_config(false), 1).unwrap();
    assert!(with.decoder().reads_noisy_input());
    assert!(!without.decoder().reads_noisy_input());
    // The full-resolution block loses exactly the 3 input channels.
    let first = |m: &Denoiser| {
        m.named_parameters()
            .into_iter()
            .find(|(n, _)| n == "decoder.level0.conv1")
            .map(|(_, c)| c.in_channels())
            .unwrap()
    };
    assert_eq!(first(&with), first(&without) + 3);
}

#[test]
fn gradients_exist_only_for_learnable_tensors() {
    let model = Denoiser::new(encoder().clone(), tiny_config(true), 1).unwrap();
    let grads = model.zero_gradients();
    let sizes: usize = grads.slices().iter().map(|s| s.len()).sum();
    let (frozen, learnable) = model.count_parameters();
    assert_eq!(sizes, learnable);
    assert_eq!(frozen, encoder().parameter_count());
    assert_eq!(grads.slices().len(), 2 * model.named_parameters().len());
}
