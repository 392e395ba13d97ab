use proptest::prelude::*;
use proptest::test_runner::{Config, FileFailurePersistence};

use pg_lab::analytic::{
    denoiser_cond, denoiser_uncond, denoiser_uncond_posterior, marginal_log_density, score,
    GaussianMixture, MixtureDenoiser,
};
use pg_lab::convert::{from_denoised, to_denoised, PredictionKind, ScheduleParams};
use pg_lab::guidance::{
    apg_update, cfg_combine, cfg_objective, clamp_norm, gain_factor, split_parallel_orthogonal,
    DenoisedPair, GuidanceParams, MomentumState, UpdateDirection,
};
use pg_lab::metrics::{hsv_to_rgb, kde, mean_saturation, rgb_to_hsv, rms_contrast, ImageRGB};
use pg_lab::sampler::{
    sample, standard_normals, GuidanceStrategy, SamplerConfig, SigmaSchedule, StepRule,
};

fn config(cases: u32) -> Config {
    Config {
        cases,
        failure_persistence: Some(Box::new(FileFailurePersistence::Off)),
        ..Config::default()
    }
}

fn vec_pair(max_len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1..=max_len).prop_flat_map(|n| {
        (
            prop::collection::vec(-10.0..10.0f64, n),
            prop::collection::vec(-10.0..10.0f64, n),
        )
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(config(256))]

    #[test]
    fn cfg_forms_agree((c, u) in vec_pair(512), w in 0.0..20.0f64) {
        let pair = DenoisedPair::new(&c, &u).unwrap();
        let a = cfg_combine(&pair, w);
        let b: Vec<f64> = c.iter().zip(&u).map(|(c, u)| u + w * (c - u)).collect();
        let scale = a.iter().chain(&b).fold(f64::MIN_POSITIVE, |m, v| m.max(v.abs()));
        prop_assert!(max_abs_diff(&a, &b) <= 1e-12 * scale);
    }

    #[test]
    fn guided_is_cond_plus_objective_gradient((c, u) in vec_pair(24), w in 0.0..10.0f64) {
        let pair = DenoisedPair::new(&c, &u).unwrap();
        let guided = cfg_combine(&pair, w);
        let h = 1e-5;
        let f = |x: &[f64]| cfg_objective(&DenoisedPair::new(x, &u).unwrap());
        let via_grad: Vec<f64> = (0..c.len()).map(|i| {
            let mut up = c.clone();
            let mut dn = c.clone();
            up[i] += h;
            dn[i] -= h;
            c[i] + (w - 1.0) * (f(&up) - f(&dn)) / (2.0 * h)
        }).collect();
        let rel = max_abs_diff(&guided, &via_grad) / norm(&guided).max(1e-300);
        prop_assert!(rel <= 1e-4, "relative error {}", rel);
    }

    #[test]
    fn apg_without_projection_rescale_or_momentum_is_cfg((c, u) in vec_pair(256), w in 0.0..20.0f64) {
        let pair = DenoisedPair::new(&c, &u).unwrap();
        let params = GuidanceParams { w, eta: 1.0, r: 0.0, beta: 0.0 };
        let apg = apg_update(&pair, &params, &mut MomentumState::new(0.0, c.len())).unwrap();
        let cfg = cfg_combine(&pair, w);
        prop_assert!(apg.iter().zip(&cfg).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn decomposition_is_complete_and_orthogonal((d, r) in vec_pair(4096)) {
        prop_assume!(norm(&r) > 1e-6);
        let (par, orth) = split_parallel_orthogonal(&d, &r).unwrap();
        let sum: Vec<f64> = par.iter().zip(&orth).map(|(a, b)| a + b).collect();
        prop_assert!(max_abs_diff(&sum, &d) <= 1e-9);
        let dot: f64 = orth.iter().zip(&r).map(|(a, b)| a * b).sum();
        prop_assert!(dot.abs() <= 1e-8 * norm(&d) * norm(&r));
    }

    #[test]
    fn clamp_is_idempotent_and_bounded(v in prop::collection::vec(-100.0..100.0f64, 1..2048), r in -1.0..50.0f64) {
        let d = UpdateDirection::new(v).unwrap();
        let once = clamp_norm(&d, r);
        let twice = clamp_norm(&once, r);
        prop_assert_eq!(once.as_slice(), twice.as_slice());
        if r > 0.0 {
            prop_assert!(once.norm() <= r);
        } else {
            prop_assert_eq!(once.as_slice(), d.as_slice());
        }
    }

    #[test]
    fn momentum_matches_unrolled_sum(
        beta in -0.99..0.99f64,
        steps in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 6), 1..40),
    ) {
        let mut state = MomentumState::new(beta, 6);
        for s in &steps {
            state.update(&UpdateDirection::new(s.clone()).unwrap()).unwrap();
        }
        let n = steps.len();
        for i in 0..6 {
            let oracle: f64 = (0..n).map(|k| beta.powi(k as i32) * steps[n - 1 - k][i]).sum();
            prop_assert!((state.running_average()[i] - oracle).abs() <= 1e-10);
        }
    }

    #[test]
    fn gain_grows_with_w_when_aligned((c, u) in vec_pair(64), w in 0.0..20.0f64, dw in 1e-3..5.0f64) {
        let pair = DenoisedPair::new(&c, &u).unwrap();
        let aligned: f64 = c.iter().zip(&u).map(|(c, u)| (c - u) * c).sum();
        prop_assume!(aligned > 1e-6 && norm(&c) > 1e-6);
        let g0 = gain_factor(&pair, w).unwrap();
        let g1 = gain_factor(&pair, w + dw).unwrap();
        prop_assert_eq!(g0.alignment, 1.0);
        prop_assert!(g1.value > g0.value);
    }
}

fn ddpm(sigma: f64) -> ScheduleParams {
    ScheduleParams::ddpm((1.0 - sigma * sigma).max(0.0).sqrt())
}

proptest! {
    #![proptest_config(config(256))]

    #[test]
    fn forward_process_targets_recover_clean_sample(
        x in prop::collection::vec(-3.0..3.0f64, 8),
        eps in prop::collection::vec(-3.0..3.0f64, 8),
        log_sigma in -6.0..-1e-3f64,
    ) {
        let sigma = 10f64.powf(log_sigma);
        let s = ddpm(sigma);
        let z: Vec<f64> = x.iter().zip(&eps).map(|(x, e)| s.alpha_t * x + s.sigma_t * e).collect();
        let v: Vec<f64> = x.iter().zip(&eps).map(|(x, e)| s.alpha_t * e - s.sigma_t * x).collect();
        let via_eps = to_denoised(PredictionKind::EpsilonDDPM, &z, &eps, s, None).unwrap();
        let via_v = to_denoised(PredictionKind::VelocityDDPM, &z, &v, s, None).unwrap();
        prop_assert!(max_abs_diff(&via_eps, &x) <= 1e-10);
        prop_assert!(max_abs_diff(&via_v, &x) <= 1e-10);
        prop_assert!(max_abs_diff(&via_eps, &via_v) <= 1e-10);

        let rf = ScheduleParams::rectified_flow(sigma);
        let zr: Vec<f64> = x.iter().zip(&eps).map(|(x, e)| (1.0 - sigma) * x + sigma * e).collect();
        let vr: Vec<f64> = x.iter().zip(&eps).map(|(x, e)| e - x).collect();
        let via_rf = to_denoised(PredictionKind::VelocityRF, &zr, &vr, rf, None).unwrap();
        prop_assert!(max_abs_diff(&via_rf, &x) <= 1e-10);
    }

    #[test]
    fn denoised_survives_raw_and_back(
        z in prop::collection::vec(-3.0..3.0f64, 8),
        x in prop::collection::vec(-3.0..3.0f64, 8),
        log_sigma in -6.0..-1e-3f64,
    ) {
        let sigma = 10f64.powf(log_sigma);
        for (kind, s) in [
            (PredictionKind::EpsilonDDPM, ddpm(sigma)),
            (PredictionKind::VelocityDDPM, ddpm(sigma)),
            (PredictionKind::VelocityRF, ScheduleParams::rectified_flow(sigma)),
        ] {
            let raw = from_denoised(kind, &z, &x, s).unwrap();
            let back = to_denoised(kind, &z, &raw, s, None).unwrap();
            prop_assert!(max_abs_diff(&back, &x) <= 1e-10, "{:?}", kind);
        }
    }
}

/// `from_denoised(to_denoised(raw)) == raw` to 1e-12 relative over
/// sigma in [1e-6, 1]. The intermediate denoised value is rounded to f64, which
/// bounds the recoverable precision of `raw` near `ulp(z) / sigma`.
#[test]
fn raw_survives_denoised_and_back() {
    let mut worst = (0.0f64, 0.0f64);
    for i in 0..=60 {
        let sigma = 10f64.powf(-6.0 + 0.1 * i as f64).min(1.0);
        for (kind, s) in [
            (PredictionKind::EpsilonDDPM, ddpm(sigma)),
            (PredictionKind::VelocityDDPM, ddpm(sigma)),
            (PredictionKind::VelocityRF, ScheduleParams::rectified_flow(sigma)),
        ] {
            if s.alpha_t == 0.0 && kind == PredictionKind::EpsilonDDPM {
                continue;
            }
            for seed in 0..20 {
                let z = standard_normals(seed, 8);
                let raw = standard_normals(seed + 100, 8);
                let d = to_denoised(kind, &z, &raw, s, None).unwrap();
                let back = from_denoised(kind, &z, &d, s).unwrap();
                let rel = max_abs_diff(&back, &raw) / norm(&raw);
                if rel > worst.0 {
                    worst = (rel, sigma);
                }
            }
        }
    }
    assert!(worst.0 <= 1e-12, "relative error {:.2e} at sigma {:.1e}", worst.0, worst.1);
}

fn mixture_strategy(max_dim: usize) -> impl Strategy<Value = GaussianMixture> {
    (1..=max_dim, 1..=4usize).prop_flat_map(|(d, k)| {
        (
            prop::collection::vec(prop::collection::vec(-3.0..3.0f64, d), k),
            0.1..1.0f64,
            prop::collection::vec(0.1..1.0f64, k),
        )
            .prop_map(|(means, sc, raw)| {
                let total: f64 = raw.iter().sum();
                let mut w: Vec<f64> = raw.iter().map(|v| v / total).collect();
                let rest: f64 = w[1..].iter().sum();
                w[0] = 1.0 - rest;
                GaussianMixture::new(means, sc, w).unwrap()
            })
    })
}

proptest! {
    #![proptest_config(config(128))]

    #[test]
    fn score_is_log_density_gradient(mix in mixture_strategy(5), seed in 0u64..1000, si in 0usize..3) {
        let sigma = [0.1, 1.0, 10.0][si];
        let z: Vec<f64> = standard_normals(seed, mix.dim()).iter().map(|v| 2.0 * v).collect();
        let s = score(&mix, &z, sigma);
        let h = 1e-5 * (1.0 + sigma);
        let fd: Vec<f64> = (0..mix.dim()).map(|i| {
            let mut up = z.clone();
            let mut dn = z.clone();
            up[i] += h;
            dn[i] -= h;
            (marginal_log_density(&mix, &up, sigma) - marginal_log_density(&mix, &dn, sigma)) / (2.0 * h)
        }).collect();
        let rel = max_abs_diff(&fd, &s) / norm(&s).max(1e-8);
        prop_assert!(rel <= 1e-5, "relative error {}", rel);
    }

    #[test]
    fn tweedie_equals_posterior_mean(mix in mixture_strategy(500), seed in 0u64..1000, log_sigma in -2.0..2.0f64) {
        let sigma = 10f64.powf(log_sigma);
        let z: Vec<f64> = standard_normals(seed, mix.dim()).iter().map(|v| (1.0 + sigma) * v).collect();
        let a = denoiser_uncond(&mix, &z, sigma);
        let b = denoiser_uncond_posterior(&mix, &z, sigma);
        prop_assert!(max_abs_diff(&a, &b) <= 1e-10);
    }

    #[test]
    fn responsibilities_stay_normalized_in_far_tails(mix in mixture_strategy(4), seed in 0u64..1000, scale in 0.0..6.0f64, log_sigma in -3.0..2.0f64) {
        let far = 10f64.powf(scale) * mix.component_sigma();
        let z: Vec<f64> = standard_normals(seed, mix.dim()).iter().map(|v| far * v).collect();
        let g = mix.responsibilities(&z, 10f64.powf(log_sigma));
        prop_assert!(g.iter().all(|v| v.is_finite() && *v >= 0.0));
        prop_assert!((g.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn single_component_conditional_is_unconditional() {
    let mix = GaussianMixture::new(vec![vec![0.3, -1.0, 2.0]], 0.4, vec![1.0]).unwrap();
    for seed in 0..50 {
        let z = standard_normals(seed, 3);
        for sigma in [0.0, 1e-3, 0.5, 3.0, 80.0] {
            let c = denoiser_cond(&mix, 0, &z, sigma).unwrap();
            assert_eq!(c, denoiser_uncond_posterior(&mix, &z, sigma));
        }
    }
}

fn small_sampler(steps: usize, step_rule: StepRule) -> SamplerConfig {
    SamplerConfig {
        schedule: SigmaSchedule { steps, ..SigmaSchedule::default() },
        step_rule,
        ..SamplerConfig::default()
    }
}

proptest! {
    #![proptest_config(config(32))]

    #[test]
    fn unit_scale_guidance_matches_unguided(
        seed in any::<u64>(),
        eta in -1.0..2.0f64,
        r in -1.0..5.0f64,
        beta in -0.9..0.9f64,
        heun in any::<bool>(),
    ) {
        let mix = GaussianMixture::two_mode_toy(3);
        let uncond = MixtureDenoiser { mixture: &mix };
        let cond = pg_lab::analytic::ComponentDenoiser::new(&mix, 1).unwrap();
        let cfg = small_sampler(12, if heun { StepRule::Heun } else { StepRule::Euler });
        let base = sample(&cond, &uncond, &GuidanceStrategy::None, &cfg, seed).unwrap();
        for strategy in [
            GuidanceStrategy::Cfg { w: 1.0 },
            GuidanceStrategy::Apg(GuidanceParams { w: 1.0, eta, r, beta }),
        ] {
            let t = sample(&cond, &uncond, &strategy, &cfg, seed).unwrap();
            prop_assert!(max_abs_diff(t.terminal(), base.terminal()) <= 1e-9);
        }
    }

    #[test]
    fn sampling_is_deterministic(seed in any::<u64>(), w in 1.0..8.0f64) {
        let mix = GaussianMixture::two_mode_toy(4);
        let uncond = MixtureDenoiser { mixture: &mix };
        let cond = pg_lab::analytic::ComponentDenoiser::new(&mix, 0).unwrap();
        let cfg = small_sampler(10, StepRule::Heun);
        let strategy = GuidanceStrategy::Apg(GuidanceParams { w, eta: 0.0, r: 0.5, beta: -0.5 });
        let a = sample(&cond, &uncond, &strategy, &cfg, seed).unwrap();
        let b = sample(&cond, &uncond, &strategy, &cfg, seed).unwrap();
        prop_assert_eq!(a, b);
    }
}

fn image_strategy() -> impl Strategy<Value = (usize, Vec<[f64; 3]>)> {
    (1..12usize, 1..12usize).prop_flat_map(|(w, h)| {
        (Just(w), prop::collection::vec(prop::array::uniform3(0.0..=1.0f64), w * h))
    })
}

proptest! {
    #![proptest_config(config(128))]

    #[test]
    fn color_metrics_ignore_pixel_order((w, px) in image_strategy(), rot in 0usize..1000) {
        let h = px.len() / w;
        let a = ImageRGB::new(w, h, px.clone()).unwrap();
        let mut shuffled = px.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let b = ImageRGB::new(w, h, shuffled).unwrap();
        prop_assert!((mean_saturation(&a) - mean_saturation(&b)).abs() <= 1e-12);
        prop_assert!((rms_contrast(&a) - rms_contrast(&b)).abs() <= 1e-12);
    }

    #[test]
    fn saturation_ignores_hue_rotation((w, px) in image_strategy(), shift in 0.0..1.0f64) {
        let h = px.len() / w;
        let rotated: Vec<[f64; 3]> = px.iter().map(|p| {
            let [hue, s, v] = rgb_to_hsv(*p);
            hsv_to_rgb([(hue + shift).fract(), s, v])
        }).collect();
        let a = ImageRGB::new(w, h, px).unwrap();
        let b = ImageRGB::new(w, h, rotated).unwrap();
        prop_assert!((mean_saturation(&a) - mean_saturation(&b)).abs() <= 1e-6);
    }

    #[test]
    fn contrast_ignores_negation((w, px) in image_strategy()) {
        let h = px.len() / w;
        let neg: Vec<[f64; 3]> = px.iter().map(|p| [1.0 - p[0], 1.0 - p[1], 1.0 - p[2]]).collect();
        let a = ImageRGB::new(w, h, px).unwrap();
        let b = ImageRGB::new(w, h, neg).unwrap();
        prop_assert!((rms_contrast(&a) - rms_contrast(&b)).abs() <= 1e-12);
    }

    #[test]
    fn kde_is_a_density(values in prop::collection::vec(-5.0..5.0f64, 2..300), grid in 16usize..600) {
        let spread = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - values.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-6);
        let est = kde(&values, None, grid.max(256)).unwrap();
        prop_assert!(est.density.iter().all(|&p| p >= 0.0));
        prop_assert!((est.mass() - 1.0).abs() <= 0.02, "mass {}", est.mass());
    }
}
