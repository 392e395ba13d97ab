use pg_lab::analytic::{marginal_log_density, GaussianMixture};
use pg_lab::guidance::{cfg_combine, gain_factor, split_parallel_orthogonal, DenoisedPair};
use pg_lab::metrics::{kde, mean_saturation, rms_contrast, ImageRGB};
use pg_lab::sampler::{
    euler_step, heun_step, karras_sigmas, mode_drift, standard_normals, stream_word,
    SigmaSchedule,
};
use statrs::function::gamma::ln_gamma;

#[test]
fn mixture_density_integrates_to_one_in_three_dimensions() {
    let mix = GaussianMixture::new(
        vec![vec![1.5, 0.0, -0.5], vec![-1.0, 0.5, 0.5], vec![0.0, -1.0, 1.0]],
        0.3,
        vec![0.2, 0.3, 0.5],
    )
    .unwrap();
    let sigma = 0.4;
    let (lo, hi, n) = (-5.0, 5.0, 121);
    let h = (hi - lo) / (n - 1) as f64;
    let axis: Vec<f64> = (0..n).map(|i| lo + i as f64 * h).collect();
    let mut total = 0.0;
    for &x in &axis {
        for &y in &axis {
            for &z in &axis {
                total += marginal_log_density(&mix, &[x, y, z], sigma).exp();
            }
        }
    }
    let mass = total * h * h * h;
    assert!((mass - 1.0).abs() <= 1e-4, "mass {mass}");
}

#[test]
fn karras_four_steps_match_closed_form() {
    let s = SigmaSchedule { sigma_min: 0.002, sigma_max: 80.0, steps: 4, rho: 7.0 };
    let got = karras_sigmas(&s).unwrap();
    let expected: Vec<f64> = (0..4)
        .map(|i| {
            let t = i as f64 / 3.0;
            (80f64.powf(1.0 / 7.0) * (1.0 - t) + 0.002f64.powf(1.0 / 7.0) * t).powi(7)
        })
        .chain([0.0])
        .collect();
    assert_eq!(got.len(), 5);
    for (g, e) in got.iter().zip(&expected) {
        assert!((g - e).abs() <= 1e-12 * e.max(1.0), "{g} vs {e}");
    }
    assert_eq!(got[0], 80.0);
    assert_eq!(got[3], 0.002);
}

#[test]
fn single_step_schedule_is_max_then_zero() {
    let s = SigmaSchedule { steps: 1, ..SigmaSchedule::default() };
    assert_eq!(karras_sigmas(&s).unwrap(), vec![80.0, 0.0]);
}

#[test]
fn steps_are_exact_for_constant_denoiser() {
    // With D(z) = c the flow is z(s) = c + (z0 - c) s / s0, which both rules hit exactly.
    let c = [0.5, -1.0];
    let z0 = [3.0, 2.0];
    let (s0, s1) = (2.0, 0.5);
    let exact: Vec<f64> = z0.iter().zip(&c).map(|(z, c)| c + (z - c) * s1 / s0).collect();
    let e = euler_step(&z0, s0, s1, &c).unwrap();
    let h = heun_step(&z0, s0, s1, |_, _| Ok(c.to_vec())).unwrap();
    for i in 0..2 {
        assert!((e[i] - exact[i]).abs() <= 1e-14);
        assert!((h[i] - exact[i]).abs() <= 1e-14);
    }
    assert_eq!(euler_step(&z0, s0, 0.0, &c).unwrap(), c.to_vec());
}

#[test]
fn heun_matches_hand_computed_step() {
    // D(z, s) = z / (1 + s^2) for a unit Gaussian; slope z s^2 / (s (1 + s^2)) = z s / (1 + s^2).
    let d = |z: &[f64], s: f64| Ok(z.iter().map(|v| v / (1.0 + s * s)).collect());
    let out = heun_step(&[1.0], 1.0, 0.5, d).unwrap();
    let slope0 = 0.5;
    let pred = 1.0 - 0.5 * slope0;
    let slope1 = pred * 0.5 / 1.25;
    let expected = 1.0 - 0.5 * 0.5 * (slope0 + slope1);
    assert!((out[0] - expected).abs() <= 1e-15);
}

#[test]
fn guidance_examples() {
    let pair = DenoisedPair::new(&[1.0, 2.0], &[0.0, 1.0]).unwrap();
    assert_eq!(cfg_combine(&pair, 1.0), vec![1.0, 2.0]);
    assert_eq!(cfg_combine(&pair, 3.0), vec![3.0, 4.0]);
    assert_eq!(cfg_combine(&pair, 0.0), vec![0.0, 1.0]);

    let (par, orth) = split_parallel_orthogonal(&[3.0, 4.0], &[2.0, 0.0]).unwrap();
    assert_eq!(par, vec![3.0, 0.0]);
    assert_eq!(orth, vec![0.0, 4.0]);

    // delta = (1, 1), cond = (1, 2): parallel part 3/5 (1, 2), norm 3/sqrt(5).
    let g = gain_factor(&pair, 3.0).unwrap();
    let expected = 1.0 + 2.0 * (3.0 / 5f64.sqrt()) / 5f64.sqrt();
    assert!((g.value - expected).abs() <= 1e-14);
    assert_eq!(g.alignment, 1.0);

    let against = DenoisedPair::new(&[1.0, 0.0], &[2.0, 0.0]).unwrap();
    assert_eq!(gain_factor(&against, 2.0).unwrap().alignment, -1.0);
}

#[test]
fn color_metric_examples() {
    let red = ImageRGB::solid(3, 2, [1.0, 0.0, 0.0]).unwrap();
    assert_eq!(mean_saturation(&red), 1.0);
    assert_eq!(rms_contrast(&red), 0.0);
    let gray = ImageRGB::solid(4, 4, [0.5, 0.5, 0.5]).unwrap();
    assert_eq!(mean_saturation(&gray), 0.0);
    assert_eq!(rms_contrast(&gray), 0.0);
    // Black and white halves: luma 0 and 1, population std 0.5.
    let bw = ImageRGB::new(2, 1, vec![[0.0; 3], [1.0; 3]]).unwrap();
    assert!((rms_contrast(&bw) - 0.5).abs() <= 1e-12);
    assert_eq!(mean_saturation(&bw), 0.0);
}

#[test]
fn kde_of_two_points_matches_closed_form() {
    let h = 0.3;
    let est = kde(&[0.0, 1.0], Some(h), 401).unwrap();
    let phi = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
    for (x, p) in est.grid.iter().zip(&est.density) {
        let expected = 0.5 * (phi(x / h) + phi((x - 1.0) / h)) / h;
        assert!((p - expected).abs() <= 1e-12);
    }
    assert!((est.mass() - 1.0).abs() <= 1e-6);
    assert_eq!(est.grid[0], -1.5);
    assert_eq!(*est.grid.last().unwrap(), 2.5);
}

#[test]
fn rng_words_are_splitmix64() {
    // Reference outputs of splitmix64 seeded with 0.
    assert_eq!(stream_word(0, 0), 0xE220_A839_7B1D_CDAF);
    assert_eq!(stream_word(0, 1), 0x6E78_9E6A_A1B9_65F4);
}

#[test]
fn normals_have_unit_moments() {
    let v = standard_normals(11, 200_000);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    assert!(mean.abs() < 0.01, "mean {mean}");
    assert!((var - 1.0).abs() < 0.01, "var {var}");
    assert_eq!(standard_normals(11, 7), v[..7].to_vec());
}

#[test]
fn drift_of_exact_component_draws_matches_chi_mean() {
    let d = 2;
    let sc = 0.25;
    let mix = GaussianMixture::two_mode_toy(d);
    assert_eq!(mix.component_sigma(), sc);
    let samples: Vec<Vec<f64>> = (0..20_000u64)
        .map(|i| {
            let mu = &mix.means()[(i % 2) as usize];
            standard_normals(i, d).iter().zip(mu).map(|(e, m)| m + sc * e).collect()
        })
        .collect();
    let summary = mode_drift(&samples, &mix).unwrap();
    let chi_mean = 2f64.sqrt() * (ln_gamma((d as f64 + 1.0) / 2.0) - ln_gamma(d as f64 / 2.0)).exp();
    assert!((summary.mean_normalized - chi_mean).abs() <= 0.02, "{} vs {chi_mean}", summary.mean_normalized);
    assert_eq!(summary.nearest_counts, vec![10_000, 10_000]);
}
