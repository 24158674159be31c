//! Cross-module properties of the swap pipeline, refinement networks,
//! losses and metrics.

use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use e4s_core::blend::{blend_margin, paste_back, CropBox};
use e4s_core::config::{InpaintConfig, LossWeights, ModelConfig};
use e4s_core::encoder::RegionalStyles;
use e4s_core::imaging::FloatImage;
use e4s_core::inpaint::{modulated_decode_layer, synthesize_training_pair, Inpainter, PairMode};
use e4s_core::losses::{loss_ms_id, loss_ms_lpips, loss_ms_parsing, loss_mse, loss_rgi_total, scalar, Perceptual, RgiWeights};
use e4s_core::mask::{mismatch_area_ratio, CategoryTaxonomy, LabelMask, MismatchMask, MismatchParams};
use e4s_core::metrics::{metric_psnr_rmse, metric_ssim, rmse};
use e4s_core::nn;
use e4s_core::recolor::{augment_pair, compute_guidance, lowpass_mask, lowpass_paste, AugmentParams};
use e4s_core::swap::{exchange_styles, swap, IdentityHook, SwapPlan};
use e4s_core::toy::toy_faces;
use e4s_core::train::RgiModel;

fn image_from(h: usize, w: usize, data: Vec<f32>) -> FloatImage {
    FloatImage::new(h, w, data).unwrap()
}

fn arb_image(h: usize, w: usize) -> impl Strategy<Value = FloatImage> {
    prop::collection::vec(0.0f32..=1.0, h * w * 3).prop_map(move |v| image_from(h, w, v))
}

fn randn(seed: u64, shape: &[usize], dtype: DType) -> Tensor {
    nn::randn(&mut ChaCha8Rng::seed_from_u64(seed), shape, dtype).unwrap()
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap().into_iter().map(f64::to_bits).collect()
}

#[test]
fn self_swap_reproduces_reconstruction() {
    let cfg = ModelConfig { base_channels: 4, max_channels: 8, ..ModelConfig::for_size(16, 6, 12) };
    let model = RgiModel::init(&cfg, 3, DType::F32).unwrap();
    let tax = CategoryTaxonomy::default_faces();
    let plan = SwapPlan::from_taxonomy(&tax);
    for s in toy_faces(3, 16, 4).unwrap() {
        let out = swap(&model, &s.image, &s.image, &s.mask, &s.mask, &IdentityHook, &plan, &tax).unwrap();
        assert_eq!(out.swap_mask, s.mask);
        assert!(out.mismatch.is_empty());
        assert_eq!(out.naive, model.reconstruct(&s.image, &s.mask).unwrap());
        assert_eq!(bits(out.styles.codes()), bits(model.invert(&s.image, &s.mask).unwrap().codes()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn exchange_is_an_involution(picks in prop::collection::vec(any::<bool>(), 5), seed in any::<u64>()) {
        let from: Vec<u8> = (0..5u8).filter(|&j| picks[j as usize]).collect();
        let plan = SwapPlan::new(5, &from).unwrap();
        let a = RegionalStyles::new(randn(seed, &[5, 3, 4], DType::F64), vec![true, false, true, true, false]).unwrap();
        let b = RegionalStyles::new(randn(seed ^ 1, &[5, 3, 4], DType::F64), vec![true, true, false, true, true]).unwrap();
        let x = exchange_styles(&a, &b, &plan).unwrap();
        let y = exchange_styles(&b, &a, &plan).unwrap();
        // Driven rows of x plus target rows of y recover `a`; the rest recover `b`.
        let back_a = exchange_styles(&x, &y, &plan).unwrap();
        let back_b = exchange_styles(&y, &x, &plan).unwrap();
        prop_assert_eq!(bits(back_a.codes()), bits(a.codes()));
        prop_assert_eq!(back_a.present(), a.present());
        prop_assert_eq!(bits(back_b.codes()), bits(b.codes()));
        for j in 0..5 {
            let src = if picks[j] { &a } else { &b };
            prop_assert_eq!(bits(&x.codes().get(j).unwrap()), bits(&src.codes().get(j).unwrap()));
        }
    }

    #[test]
    fn paste_back_keeps_pixels_beyond_the_support(
        top in 0usize..40, left in 0usize..40, h in 4usize..24, w in 4usize..24, levels in 1usize..4, seed in any::<u64>(),
    ) {
        let frame = image_from(64, 64, (0..64 * 64 * 3).map(|i| ((i as u64 * 2654435761 ^ seed) % 1000) as f32 / 1000.0).collect());
        let face = FloatImage::filled(h, w, [0.9, 0.1, 0.4]);
        let crop = CropBox { top, left, height: h, width: w };
        let out = paste_back(&face, &frame, &crop, levels, 2).unwrap();
        let m = blend_margin(levels);
        for y in 0..64 {
            for x in 0..64 {
                let near = y + m >= top && y < top + h + m && x + m >= left && x < left + w + m;
                if !near {
                    prop_assert_eq!(out.pixel(y, x), frame.pixel(y, x));
                }
            }
        }
    }

    #[test]
    fn lowpass_paste_copy_rule(naive in arb_image(12, 12), recolored in arb_image(12, 12), threshold in 0.0f64..3.0) {
        let out = lowpass_paste(&recolored, &naive, threshold).unwrap();
        for (p, inside) in lowpass_mask(&naive, threshold).into_iter().enumerate() {
            let src = if inside { &recolored } else { &naive };
            prop_assert_eq!(out.pixel(p / 12, p % 12), src.pixel(p / 12, p % 12));
        }
    }

    #[test]
    fn guidance_ignores_references_outside_the_region(seed in any::<u64>(), region in 0u8..3) {
        let (c, h, w) = (6, 6, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = |rng: &mut ChaCha8Rng| -> Vec<u8> { (0..h * w).map(|_| rand::Rng::random_range(rng, 0..3u8)).collect() };
        let qm = LabelMask::new(h, w, 3, labels(&mut rng)).unwrap();
        let rm = LabelMask::new(h, w, 3, labels(&mut rng)).unwrap();
        let fq = randn(seed ^ 2, &[c, h, w], DType::F64);
        let fr = randn(seed ^ 3, &[c, h, w], DType::F64);
        let colors = randn(seed ^ 4, &[3, h, w], DType::F64);
        let base = compute_guidance(&fq, &fr, &qm, &rm, &colors, &[region]).unwrap().map;
        // Scramble reference features and colours wherever the reference is not `region`.
        let keep: Vec<f64> = rm.labels().iter().map(|&l| (l == region) as u8 as f64).collect();
        let keep = Tensor::from_vec(keep, (1, h, w), &Device::Cpu).unwrap();
        let scramble = |t: &Tensor, s: u64| -> Tensor {
            let noise = randn(s, t.dims(), DType::F64);
            (t.broadcast_mul(&keep).unwrap() + noise.broadcast_mul(&(1.0 - &keep).unwrap()).unwrap()).unwrap()
        };
        let moved = compute_guidance(&fq, &scramble(&fr, seed ^ 5), &qm, &rm, &scramble(&colors, seed ^ 6), &[region]).unwrap().map;
        prop_assert_eq!(bits(&base), bits(&moved));
    }

    #[test]
    fn augmentation_is_seeded(seed in any::<u64>()) {
        let s = &toy_faces(1, 16, 9).unwrap()[0];
        let p = AugmentParams::default();
        let a = augment_pair(&s.image, &s.mask, seed, &p);
        let b = augment_pair(&s.image, &s.mask, seed, &p);
        prop_assert_eq!(&a.query_gray, &b.query_gray);
        prop_assert_eq!(&a.reference, &b.reference);
        prop_assert_eq!(a.flipped, b.flipped);
        prop_assert_eq!(&a.ref_mask, &if a.flipped { s.mask.flip_horizontal() } else { s.mask.clone() });
    }

    #[test]
    fn inpaint_copies_outside_the_mismatch(img in arb_image(16, 16), mask_bits in prop::collection::vec(any::<bool>(), 256)) {
        let cfg = InpaintConfig { resolution: 16, channels: 4, max_channels: 8, levels: 3, ratio_hidden: 8 };
        let model = Inpainter::init(&cfg, 1, DType::F32).unwrap();
        let mm = MismatchMask::new(16, 16, mask_bits.clone()).unwrap();
        let out = model.inpaint(&img, &mm).unwrap();
        for (p, &m) in mask_bits.iter().enumerate() {
            if !m {
                prop_assert_eq!(out.pixel(p / 16, p % 16), img.pixel(p / 16, p % 16));
            }
        }
    }

    #[test]
    fn reconstruction_losses_are_non_negative(a in arb_image(16, 16), b in arb_image(16, 16)) {
        let (x, y) = (a.to_tensor(DType::F64).unwrap(), b.to_tensor(DType::F64).unwrap());
        let be = Perceptual::seeded(3).unwrap();
        for v in [
            scalar(&loss_mse(&x, &y).unwrap()).unwrap(),
            scalar(&loss_ms_lpips(&x, &y, be.lpips.as_ref(), &[4, 8, 16]).unwrap()).unwrap(),
            scalar(&loss_ms_id(&x, &y, be.id.as_ref()).unwrap()).unwrap(),
            scalar(&loss_ms_parsing(&x, &y, be.parsing.as_ref()).unwrap()).unwrap(),
        ] {
            prop_assert!(v >= -1e-12, "{}", v);
        }
    }

    #[test]
    fn metric_identities_and_ranges(a in arb_image(12, 12), b in arb_image(12, 12)) {
        prop_assert!((metric_ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        prop_assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        let s = metric_ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        let (_, r) = metric_psnr_rmse(&a, &b).unwrap();
        prop_assert!(r >= 0.0 && (r - rmse(&b, &a).unwrap()).abs() < 1e-15);
    }
}

#[test]
fn total_loss_is_linear_in_the_weights() {
    let x = randn(1, &[3, 16, 16], DType::F64).affine(0.2, 0.5).unwrap();
    let y = randn(2, &[3, 16, 16], DType::F64).affine(0.2, 0.5).unwrap();
    let logits = randn(3, &[2], DType::F64);
    let be = Perceptual::seeded(4).unwrap();
    let total = |w: &RgiWeights| loss_rgi_total(&x, &y, w, &be, &[8, 16], Some(&logits)).unwrap().1;
    let base = total(&RgiWeights { lpips: 0.0, id: 0.0, parsing: 0.0, adv: 0.0 });
    let d = LossWeights::default();
    let full = total(&RgiWeights::from(&d));
    let doubled = total(&RgiWeights { lpips: 2.0 * d.lpips, id: 2.0 * d.id, parsing: 2.0 * d.parsing, adv: 2.0 * d.adv });
    assert!((base.total - base.mse).abs() < 1e-12);
    // f(2w) - f(w) == f(w) - f(0) for a function affine in the weights.
    assert!(((doubled.total - full.total) - (full.total - base.total)).abs() < 1e-9);
}

#[test]
fn decoder_output_is_affine_in_the_gains() {
    let cfg = InpaintConfig { resolution: 16, channels: 4, max_channels: 8, levels: 3, ratio_hidden: 8 };
    let model = Inpainter::init(&cfg, 5, DType::F64).unwrap();
    let x_in = randn(6, &[cfg.channels_at(1), 8, 8], DType::F64);
    let x_skip = randn(7, &[cfg.channels_at(0), 8, 8], DType::F64);
    let at = |a1: f64, a2: f64| {
        let s = |v: f64| Tensor::new(v, &Device::Cpu).unwrap();
        modulated_decode_layer(model.params(), "dec0", &x_in, &x_skip, &s(a1), &s(a2)).unwrap()
    };
    let (g00, g10, g01) = (at(0.0, 0.0), at(1.0, 0.0), at(0.0, 1.0));
    let probe = at(0.7, -1.3);
    let combo = ((&g00 + ((&g10 - &g00).unwrap() * 0.7).unwrap()).unwrap() + ((&g01 - &g00).unwrap() * -1.3).unwrap()).unwrap();
    let err = (probe - combo).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
    assert!(err < 1e-12, "{err}");
    assert_eq!(g00.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
}

#[test]
fn ratio_gains_are_continuous() {
    let cfg = InpaintConfig { resolution: 16, channels: 4, max_channels: 8, levels: 3, ratio_hidden: 8 };
    let model = Inpainter::init(&cfg, 8, DType::F64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    model.params().map_values(|_, t| Ok((nn::randn(&mut rng, t.dims(), t.dtype())? + t)?)).unwrap();
    for s in [0.0, 0.1, 0.37, 0.9] {
        let a = model.ratio_gains(s).unwrap();
        let b = model.ratio_gains(s + 1e-6).unwrap();
        let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-3, "{d}");
    }
}

#[test]
fn training_pairs_report_the_area_ratio() {
    let tax = CategoryTaxonomy::default_faces();
    for (i, s) in toy_faces(4, 32, 11).unwrap().iter().enumerate() {
        let pair = synthesize_training_pair(&s.image, &s.mask, &tax, i as u64, &MismatchParams::default(), PairMode::Erase, None).unwrap();
        assert_eq!(pair.ratio, mismatch_area_ratio(&pair.mismatch));
        assert!(pair.ratio > 0.0);
    }
}

#[test]
fn toy_masks_satisfy_the_partition_invariant() {
    for s in toy_faces(16, 32, 12).unwrap() {
        assert_eq!(s.mask.labels().len(), 32 * 32);
        assert!(s.mask.labels().iter().all(|&l| (l as usize) < s.mask.num_categories()));
        assert_eq!(s.mask.num_categories(), 12);
    }
}
