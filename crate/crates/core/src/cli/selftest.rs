//! `selftest`: invariant checks on deterministic random inputs.

use crate::analytic::{
    denoiser_uncond, denoiser_uncond_posterior, marginal_log_density, score, GaussianMixture,
    MixtureDenoiser,
};
use crate::convert::{from_denoised, to_denoised, PredictionKind, ScheduleParams};
use crate::guidance::{
    apg_update, cfg_combine, cfg_objective, clamp_norm, gain_factor, momentum_update,
    split_parallel_orthogonal, DenoisedPair, GuidanceParams, MomentumState, UpdateDirection,
};
use crate::metrics::{hsv_to_rgb, kde, mean_saturation, rgb_to_hsv, rms_contrast, ImageRGB};
use crate::sampler::{
    sample, standard_normals, stream_word, GuidanceStrategy, SamplerConfig, SigmaSchedule,
};

const CASES: u64 = 64;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub outcome: Result<(), String>,
}

fn normals(seed: u64, n: usize) -> Vec<f64> {
    standard_normals(seed, n)
}

fn uniform(seed: u64, i: u64) -> f64 {
    (stream_word(seed, i) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg()) }
}

fn cfg_forms() -> Result<(), String> {
    for case in 0..CASES {
        let c = normals(case, 16);
        let u = normals(case + 1000, 16);
        let w = 8.0 * uniform(case, 99);
        let pair = DenoisedPair::new(&c, &u).map_err(|e| e.to_string())?;
        let got = cfg_combine(&pair, w);
        let other: Vec<f64> = c.iter().zip(&u).map(|(c, u)| u + w * (c - u)).collect();
        let err = max_abs_diff(&got, &other);
        ensure(err <= 1e-12 * (1.0 + w), || format!("case {case}: forms differ by {err}"))?;
    }
    Ok(())
}

fn objective_gradient() -> Result<(), String> {
    let c = normals(1, 8);
    let u = normals(2, 8);
    let h = 1e-6;
    for i in 0..c.len() {
        let mut up = c.clone();
        let mut dn = c.clone();
        up[i] += h;
        dn[i] -= h;
        let f = |x: &[f64]| cfg_objective(&DenoisedPair::new(x, &u).unwrap());
        let fd = (f(&up) - f(&dn)) / (2.0 * h);
        let exact = c[i] - u[i];
        ensure((fd - exact).abs() < 1e-6, || format!("coordinate {i}: {fd} vs {exact}"))?;
    }
    Ok(())
}

fn apg_reduces_to_cfg() -> Result<(), String> {
    for case in 0..CASES {
        let c = normals(case, 12);
        let u = normals(case + 7, 12);
        let w = 1.0 + 6.0 * uniform(case, 3);
        let pair = DenoisedPair::new(&c, &u).map_err(|e| e.to_string())?;
        let params = GuidanceParams { w, eta: 1.0, r: 0.0, beta: 0.0 };
        let mut state = MomentumState::new(0.0, c.len());
        let apg = apg_update(&pair, &params, &mut state).map_err(|e| e.to_string())?;
        let cfg = cfg_combine(&pair, w);
        ensure(apg.iter().zip(&cfg).all(|(a, b)| a.to_bits() == b.to_bits()), || {
            format!("case {case}: APG and CFG differ")
        })?;
    }
    Ok(())
}

fn decomposition() -> Result<(), String> {
    for case in 0..CASES {
        let d = normals(case, 20);
        let r = normals(case + 500, 20);
        let (par, orth) = split_parallel_orthogonal(&d, &r).map_err(|e| e.to_string())?;
        let sum: Vec<f64> = par.iter().zip(&orth).map(|(a, b)| a + b).collect();
        let scale = 1.0 + norm(&d);
        ensure(max_abs_diff(&sum, &d) <= 1e-12 * scale, || format!("case {case}: parts do not sum"))?;
        let dot: f64 = orth.iter().zip(&r).map(|(a, b)| a * b).sum();
        ensure(dot.abs() <= 1e-10 * scale * norm(&r), || format!("case {case}: orth.ref = {dot}"))?;
    }
    Ok(())
}

fn clamp_idempotent() -> Result<(), String> {
    for case in 0..CASES {
        let d = UpdateDirection::new(normals(case, 10)).map_err(|e| e.to_string())?;
        let r = 4.0 * uniform(case, 1) + 1e-3;
        let once = clamp_norm(&d, r);
        let twice = clamp_norm(&once, r);
        ensure(once.norm() <= r * (1.0 + 1e-12), || format!("case {case}: norm above r"))?;
        ensure(max_abs_diff(once.as_slice(), twice.as_slice()) <= 1e-15 * r, || {
            format!("case {case}: clamp not idempotent")
        })?;
    }
    Ok(())
}

fn momentum_unrolls() -> Result<(), String> {
    let beta: f64 = -0.5;
    let steps: Vec<Vec<f64>> = (0..10).map(|t| normals(300 + t, 6)).collect();
    let mut state = MomentumState::new(beta, 6);
    let mut avg = Vec::new();
    for d in &steps {
        avg = momentum_update(&mut state, &UpdateDirection::new(d.clone()).unwrap())
            .map_err(|e| e.to_string())?
            .into_vec();
    }
    let n = steps.len();
    let mut expected = vec![0.0; 6];
    for (t, d) in steps.iter().enumerate() {
        let f = beta.powi((n - 1 - t) as i32);
        for (e, v) in expected.iter_mut().zip(d) {
            *e += f * v;
        }
    }
    let err = max_abs_diff(&avg, &expected);
    ensure(err < 1e-12, || format!("unrolled sum differs by {err}"))
}

fn gain_monotone() -> Result<(), String> {
    let c = normals(11, 9);
    let u = normals(12, 9);
    let pair = DenoisedPair::new(&c, &u).unwrap();
    let mut prev = f64::NEG_INFINITY;
    for i in 0..20 {
        let w = 1.0 + i as f64 * 0.5;
        let g = gain_factor(&pair, w).map_err(|e| e.to_string())?.value;
        ensure(g >= prev, || format!("gain decreased at w = {w}"))?;
        prev = g;
    }
    Ok(())
}

fn conversions_round_trip() -> Result<(), String> {
    for case in 0..CASES {
        let z = normals(case, 5);
        let d = normals(case + 40, 5);
        let t = 0.05 + 0.9 * uniform(case, 2);
        let angle = t * std::f64::consts::FRAC_PI_2;
        let scheds = [
            (PredictionKind::EpsilonDDPM, ScheduleParams::ddpm(angle.cos())),
            (PredictionKind::VelocityDDPM, ScheduleParams::ddpm(angle.cos())),
            (PredictionKind::DenoisedDirect, ScheduleParams::ddpm(angle.cos())),
            (PredictionKind::VelocityRF, ScheduleParams::rectified_flow(t)),
        ];
        for (kind, sched) in scheds {
            let raw = from_denoised(kind, &z, &d, sched).map_err(|e| e.to_string())?;
            let back = to_denoised(kind, &z, &raw, sched, None).map_err(|e| e.to_string())?;
            let err = max_abs_diff(&back, &d);
            ensure(err < 1e-9, || format!("{kind:?} case {case}: error {err}"))?;
        }
    }
    Ok(())
}

fn mixture() -> GaussianMixture {
    GaussianMixture::new(vec![vec![1.5, -0.5], vec![-1.0, 1.0], vec![0.0, -2.0]], 0.4, vec![0.2, 0.5, 0.3])
        .expect("valid mixture")
}

fn score_matches_density() -> Result<(), String> {
    let mix = mixture();
    let h = 1e-5;
    for case in 0..16 {
        let z = normals(case, 2);
        let sigma = 0.1 + 2.0 * uniform(case, 5);
        let s = score(&mix, &z, sigma);
        for i in 0..2 {
            let mut up = z.clone();
            let mut dn = z.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (marginal_log_density(&mix, &up, sigma) - marginal_log_density(&mix, &dn, sigma)) / (2.0 * h);
            ensure((fd - s[i]).abs() < 1e-5 * (1.0 + s[i].abs()), || {
                format!("case {case}: score {} vs difference {fd}", s[i])
            })?;
        }
    }
    Ok(())
}

fn tweedie_agrees() -> Result<(), String> {
    let mix = mixture();
    for case in 0..CASES {
        let z: Vec<f64> = normals(case, 2).iter().map(|v| 3.0 * v).collect();
        let sigma = 0.01 + 5.0 * uniform(case, 8);
        let a = denoiser_uncond(&mix, &z, sigma);
        let b = denoiser_uncond_posterior(&mix, &z, sigma);
        let err = max_abs_diff(&a, &b);
        ensure(err < 1e-9 * (1.0 + norm(&z)), || format!("case {case}: forms differ by {err}"))?;
    }
    Ok(())
}

fn responsibilities_normalized() -> Result<(), String> {
    let mix = mixture();
    for z in [vec![1e4, -1e4], vec![-500.0, 300.0], vec![0.0, 0.0]] {
        for sigma in [1e-3, 1.0, 80.0] {
            let g = mix.responsibilities(&z, sigma);
            let sum: f64 = g.iter().sum();
            ensure(g.iter().all(|v| v.is_finite() && *v >= 0.0) && (sum - 1.0).abs() < 1e-12, || {
                format!("z = {z:?}, sigma = {sigma}: sum {sum}")
            })?;
        }
    }
    Ok(())
}

fn kde_mass() -> Result<(), String> {
    let values: Vec<f64> = (0..2000).map(|i| uniform(77, i)).collect();
    let est = kde(&values, None, 1024).map_err(|e| e.to_string())?;
    let m = est.mass();
    ensure((m - 1.0).abs() < 1e-3, || format!("mass {m}"))
}

fn metric_invariances() -> Result<(), String> {
    let pixels: Vec<[f64; 3]> = (0..64)
        .map(|i| [uniform(5, 3 * i), uniform(5, 3 * i + 1), uniform(5, 3 * i + 2)])
        .collect();
    let img = ImageRGB::new(8, 8, pixels.clone()).map_err(|e| e.to_string())?;
    let mut rev = pixels.clone();
    rev.reverse();
    let perm = ImageRGB::new(8, 8, rev).map_err(|e| e.to_string())?;
    ensure((mean_saturation(&img) - mean_saturation(&perm)).abs() < 1e-12, || "saturation not permutation invariant".into())?;
    ensure((rms_contrast(&img) - rms_contrast(&perm)).abs() < 1e-12, || "contrast not permutation invariant".into())?;
    let rotated: Vec<[f64; 3]> = pixels
        .iter()
        .map(|p| {
            let [h, s, v] = rgb_to_hsv(*p);
            hsv_to_rgb([(h + 0.37).fract(), s, v])
        })
        .collect();
    let rot = ImageRGB::new(8, 8, rotated).map_err(|e| e.to_string())?;
    let ds = (mean_saturation(&img) - mean_saturation(&rot)).abs();
    ensure(ds < 1e-9, || format!("hue rotation changed saturation by {ds}"))?;
    let negated: Vec<[f64; 3]> = pixels.iter().map(|p| [1.0 - p[0], 1.0 - p[1], 1.0 - p[2]]).collect();
    let neg = ImageRGB::new(8, 8, negated).map_err(|e| e.to_string())?;
    let dc = (rms_contrast(&img) - rms_contrast(&neg)).abs();
    ensure(dc < 1e-12, || format!("negation changed contrast by {dc}"))
}

fn unguided_sampler_matches() -> Result<(), String> {
    let mix = mixture();
    let den = MixtureDenoiser { mixture: &mix };
    let config = SamplerConfig {
        schedule: SigmaSchedule { steps: 12, ..SigmaSchedule::default() },
        ..SamplerConfig::default()
    };
    for seed in 0..4 {
        let a = sample(&den, &den, &GuidanceStrategy::None, &config, seed).map_err(|e| e.to_string())?;
        let b = sample(&den, &den, &GuidanceStrategy::Cfg { w: 1.0 }, &config, seed).map_err(|e| e.to_string())?;
        let err = max_abs_diff(a.terminal(), b.terminal());
        ensure(err <= 1e-12, || format!("seed {seed}: w = 1 differs from unguided by {err}"))?;
    }
    Ok(())
}

type Check = fn() -> Result<(), String>;

pub fn run_checks() -> Vec<CheckResult> {
    let checks: [(&'static str, Check); 14] = [
        ("cfg forms agree", cfg_forms),
        ("cfg objective gradient", objective_gradient),
        ("apg with eta 1, no rescale, no momentum is cfg", apg_reduces_to_cfg),
        ("parallel/orthogonal decomposition", decomposition),
        ("norm clamp", clamp_idempotent),
        ("momentum unrolled sum", momentum_unrolls),
        ("gain factor monotone in w", gain_monotone),
        ("prediction conversions round trip", conversions_round_trip),
        ("score matches log-density differences", score_matches_density),
        ("tweedie and posterior denoisers agree", tweedie_agrees),
        ("responsibilities normalized", responsibilities_normalized),
        ("kde integrates to one", kde_mass),
        ("color metric invariances", metric_invariances),
        ("w = 1 sampling matches unguided", unguided_sampler_matches),
    ];
    checks
        .into_iter()
        .map(|(name, f)| CheckResult { name, outcome: f() })
        .collect()
}

/// Prints one line per check; returns whether all passed.
pub fn cmd_selftest() -> bool {
    let results = run_checks();
    for r in &results {
        match &r.outcome {
            Ok(()) => println!("PASS {}", r.name),
            Err(e) => println!("FAIL {}: {e}", r.name),
        }
    }
    let failed = results.iter().filter(|r| r.outcome.is_err()).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    failed == 0
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for r in super::run_checks() {
            assert!(r.outcome.is_ok(), "{}: {:?}", r.name, r.outcome);
        }
    }
}
