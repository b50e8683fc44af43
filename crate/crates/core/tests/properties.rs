//! Property tests across the numeric building blocks.

use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;

use decoupled_isp::hccm::{apply_mixing, ccl_loss, soft_histogram, BINS};
use decoupled_isp::imaging::{to_grayscale, RgbImage};
use decoupled_isp::metrics::{psnr, ssim};
use decoupled_isp::nn::loss::scalar;
use decoupled_isp::schedule::{ddim_step, estimate_x0, implied_noise, q_sample, NoiseSchedule, Prev, SamplerConfig};
use decoupled_isp::tadm::{con_loss, tel_loss, texture_map};

fn tensor(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    let d: Vec<f64> = (a - b)
        .unwrap()
        .abs()
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap();
    d.into_iter().fold(0.0, f64::max)
}

fn sched() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alpha_bar_is_decreasing_in_unit_interval(start in 1e-5f64..1e-2, span in 0.0f64..0.2, steps in 1usize..2000) {
        let s = NoiseSchedule::linear(steps, start, start + span).unwrap();
        let ab = s.alpha_bars();
        prop_assert!(ab.iter().all(|v| *v > 0.0 && *v < 1.0));
        prop_assert!(ab.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(s.posterior_variances().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn forward_then_estimate_is_identity(x0 in prop::collection::vec(-3.0f64..3.0, 16),
                                         eps in prop::collection::vec(-3.0f64..3.0, 16),
                                         t in 0usize..1000) {
        let s = sched();
        let x0 = tensor(&x0, &[1, 1, 4, 4]);
        let eps = tensor(&eps, &[1, 1, 4, 4]);
        let back = estimate_x0(&q_sample(&x0, t, &eps, &s).unwrap(), &eps, t, &s).unwrap();
        prop_assert!(max_abs_diff(&back, &x0) < 1e-6);
    }

    #[test]
    fn implied_noise_step_then_collapse_recovers_target(x_t in prop::collection::vec(-3.0f64..3.0, 8),
                                                         target in prop::collection::vec(-3.0f64..3.0, 8),
                                                         t in 1usize..1000, frac in 0.0f64..1.0) {
        let s = sched();
        let cfg = SamplerConfig::uniform(1000, 25, 0.0).unwrap();
        let x_t = tensor(&x_t, &[1, 2, 2, 2]);
        let target = tensor(&target, &[1, 2, 2, 2]);
        let prev = ((t as f64 * frac) as usize).min(t - 1);
        let eps = implied_noise(&x_t, &target, t, &s).unwrap();
        let x_prev = ddim_step(&x_t, &eps, t, Prev::Step(prev), &s, &cfg, None).unwrap();
        let eps2 = implied_noise(&x_prev, &target, prev, &s).unwrap();
        let out = ddim_step(&x_prev, &eps2, prev, Prev::Clean, &s, &cfg, None).unwrap();
        prop_assert!(max_abs_diff(&out, &target) < 1e-5);
    }

    #[test]
    fn transitions_descend_to_clean(steps in 1usize..=100) {
        let cfg = SamplerConfig::uniform(1000, steps, 0.0).unwrap();
        let tr = cfg.transitions();
        prop_assert_eq!(tr.len(), steps);
        prop_assert_eq!(tr[0].0, 999);
        prop_assert_eq!(tr.last().unwrap().1, Prev::Clean);
        for w in tr.windows(2) {
            prop_assert_eq!(w[0].1, Prev::Step(w[1].0));
            prop_assert!(w[1].0 < w[0].0);
        }
    }

    #[test]
    fn texture_map_ignores_offsets(v in prop::collection::vec(-2.0f64..2.0, 2 * 8 * 8), c in -5.0f64..5.0) {
        let f = tensor(&v, &[1, 2, 8, 8]);
        let shifted = (&f + c).unwrap();
        prop_assert!(max_abs_diff(&texture_map(&f).unwrap(), &texture_map(&shifted).unwrap()) < 1e-9);
    }

    #[test]
    fn texture_map_is_translation_equivariant(v in prop::collection::vec(-2.0f64..2.0, 12 * 13)) {
        let f = tensor(&v, &[1, 1, 12, 13]);
        let a = texture_map(&f.narrow(3, 0, 12).unwrap()).unwrap();
        let b = texture_map(&f.narrow(3, 1, 12).unwrap()).unwrap();
        // Receptive-field radius is 3 (5-tap blur + 3-tap derivative).
        let r = 3;
        let ai = a.narrow(2, r, 12 - 2 * r).unwrap().narrow(3, r + 1, 12 - 2 * r - 1).unwrap();
        let bi = b.narrow(2, r, 12 - 2 * r).unwrap().narrow(3, r, 12 - 2 * r - 1).unwrap();
        prop_assert!(max_abs_diff(&ai, &bi) < 1e-12);
    }

    #[test]
    fn feature_losses_are_symmetric_and_zero_only_on_equality(a in prop::collection::vec(-2.0f64..2.0, 2 * 8 * 8),
                                                              b in prop::collection::vec(-2.0f64..2.0, 2 * 8 * 8)) {
        let (a, b) = (tensor(&a, &[1, 2, 8, 8]), tensor(&b, &[1, 2, 8, 8]));
        let tab = scalar(&tel_loss(&a, &b).unwrap()).unwrap();
        prop_assert!(tab >= 0.0);
        prop_assert!((tab - scalar(&tel_loss(&b, &a).unwrap()).unwrap()).abs() < 1e-12);
        prop_assert_eq!(scalar(&tel_loss(&a, &a).unwrap()).unwrap(), 0.0);
        let cab = scalar(&con_loss(&a, &b).unwrap()).unwrap();
        prop_assert!(cab > 0.0);
        prop_assert!((cab - scalar(&con_loss(&b, &a).unwrap()).unwrap()).abs() < 1e-12);
        prop_assert_eq!(scalar(&con_loss(&a, &a).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn histogram_rows_are_distributions(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..3 * h * w).map(|_| rng.random_range(-0.2..1.2)).collect();
        let hist: Vec<Vec<f64>> = soft_histogram(&tensor(&v, &[1, 3, h, w])).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
        for row in hist {
            prop_assert_eq!(row.len(), BINS);
            prop_assert!(row.iter().all(|x| *x >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn histogram_ignores_pixel_order(v in prop::collection::vec(0.0f64..1.0, 3 * 6), rot in 1usize..6) {
        let planes: Vec<f64> = v
            .chunks(6)
            .flat_map(|p| p.iter().cycle().skip(rot).take(6).copied().collect::<Vec<_>>())
            .collect();
        let a = soft_histogram(&tensor(&v, &[1, 3, 2, 3])).unwrap();
        let b = soft_histogram(&tensor(&planes, &[1, 3, 2, 3])).unwrap();
        prop_assert!(max_abs_diff(&a, &b) < 1e-12);
    }

    #[test]
    fn ccl_is_symmetric(a in prop::collection::vec(0.0f64..1.0, 3 * BINS), b in prop::collection::vec(0.0f64..1.0, 3 * BINS)) {
        let (a, b) = (tensor(&a, &[1, 3, BINS]), tensor(&b, &[1, 3, BINS]));
        let ab = scalar(&ccl_loss(&a, &b).unwrap()).unwrap();
        prop_assert!((ab - scalar(&ccl_loss(&b, &a).unwrap()).unwrap()).abs() < 1e-12);
        prop_assert_eq!(scalar(&ccl_loss(&a, &a).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn mixing_is_per_position_matrix_product(m in prop::collection::vec(-1.0f64..1.0, 9), f in prop::collection::vec(-1.0f64..1.0, 3 * 4)) {
        let mt = tensor(&m, &[1, 3, 3]);
        let ft = tensor(&f, &[1, 3, 2, 2]);
        let out: Vec<f64> = apply_mixing(&mt, &ft).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for i in 0..3 {
            for p in 0..4 {
                let expect: f64 = (0..3).map(|j| m[i * 3 + j] * f[j * 4 + p]).sum();
                prop_assert!((out[i * 4 + p] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn achromatic_gray_is_exact(v in prop::collection::vec(0.0f32..=1.0, 12)) {
        let img = RgbImage::new(4, 3, v.iter().flat_map(|x| [*x; 3]).collect()).unwrap();
        let g = to_grayscale(&img);
        for (a, b) in g.data().iter().zip(&v) {
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn ssim_of_self_is_one(v in prop::collection::vec(0.0f32..=1.0, 12 * 12 * 3)) {
        let img = RgbImage::new(12, 12, v).unwrap();
        prop_assert_eq!(ssim(&img, &img).unwrap(), 1.0);
    }
}

#[test]
fn psnr_falls_as_noise_grows() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let base: Vec<f32> = (0..32 * 32 * 3).map(|_| rng.random_range(0.2..0.8)).collect();
    let noise: Vec<f32> = (0..base.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let a = RgbImage::new(32, 32, base.clone()).unwrap();
    let scores: Vec<f64> = [0.01f32, 0.05, 0.1]
        .iter()
        .map(|amp| {
            let data = base.iter().zip(&noise).map(|(x, n)| x + amp * n).collect();
            psnr(&a, &RgbImage::new(32, 32, data).unwrap()).unwrap()
        })
        .collect();
    assert!(scores[0] > scores[1] && scores[1] > scores[2], "{scores:?}");
}
