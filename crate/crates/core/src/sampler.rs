//! Deterministic probability-flow ODE sampling with pluggable guidance.
//!
//! The ODE is integrated in sigma: `dz/dsigma = (z - D(z, sigma)) / sigma`,
//! from `sigma_max` down to 0, where `D` is the guided denoised prediction.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::{ComponentDenoiser, GaussianMixture, MixtureDenoiser};
use crate::error::{Error, Result};
use crate::guidance::{
    apg_update_detailed, cfg_combine, gain_factor, norm_f64, DenoisedPair, GuidanceParams,
    MomentumState,
};

/// A model returning the denoised prediction at `(z, sigma)`.
pub trait Denoiser: Sync {
    fn dim(&self) -> usize;
    fn denoise(&self, z: &[f64], sigma: f64) -> Vec<f64>;
}

impl<F> Denoiser for (usize, F)
where
    F: Fn(&[f64], f64) -> Vec<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.0
    }

    fn denoise(&self, z: &[f64], sigma: f64) -> Vec<f64> {
        (self.1)(z, sigma)
    }
}

// Counter-based noise generator. Word `n` of stream `key` is the SplitMix64
// finalizer applied to `key + (n + 1) * GOLDEN`; normals come from
// Box-Muller over consecutive word pairs.
const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The `counter`-th 64-bit word of stream `key`.
pub fn stream_word(key: u64, counter: u64) -> u64 {
    mix64(key.wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN)))
}

/// Seed of trajectory `index` within a run.
pub fn trajectory_seed(run_seed: u64, index: u64) -> u64 {
    stream_word(run_seed, index)
}

/// `n` standard normal draws from stream `seed`.
pub fn standard_normals(seed: u64, n: usize) -> Vec<f64> {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    let mut out = Vec::with_capacity(n + 1);
    for pair in 0..n.div_ceil(2) as u64 {
        // u1 in (0, 1], u2 in [0, 1)
        let u1 = ((stream_word(seed, 2 * pair) >> 11) + 1) as f64 * SCALE;
        let u2 = (stream_word(seed, 2 * pair + 1) >> 11) as f64 * SCALE;
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * PI * u2;
        out.push(radius * angle.cos());
        out.push(radius * angle.sin());
    }
    out.truncate(n);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub steps: usize,
    pub rho: f64,
}

impl Default for SigmaSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 80.0,
            steps: 64,
            rho: 7.0,
        }
    }
}

impl SigmaSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min.is_finite()) {
            return Err(Error::config("sigma_min", "must be positive"));
        }
        if !(self.sigma_max > self.sigma_min && self.sigma_max.is_finite()) {
            return Err(Error::config("sigma_max", "must exceed sigma_min"));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::config("rho", "must be positive"));
        }
        Ok(())
    }
}

/// Karras spacing: `steps` decreasing levels from `sigma_max` to `sigma_min`,
/// then a terminal 0.
pub fn karras_sigmas(schedule: &SigmaSchedule) -> Result<Vec<f64>> {
    schedule.validate()?;
    let n = schedule.steps;
    let mut sigmas = Vec::with_capacity(n + 1);
    sigmas.push(schedule.sigma_max);
    if n > 1 {
        let inv_rho = 1.0 / schedule.rho;
        let hi = schedule.sigma_max.powf(inv_rho);
        let lo = schedule.sigma_min.powf(inv_rho);
        for i in 1..n - 1 {
            let frac = i as f64 / (n - 1) as f64;
            sigmas.push((hi + frac * (lo - hi)).powf(schedule.rho));
        }
        sigmas.push(schedule.sigma_min);
    }
    sigmas.push(0.0);
    if sigmas.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::contract("sigma schedule is not strictly decreasing"));
    }
    Ok(sigmas)
}

/// One Euler step of the probability-flow ODE. Stepping to `sigma_next = 0`
/// returns `denoised` itself.
pub fn euler_step(z: &[f64], sigma_cur: f64, sigma_next: f64, denoised: &[f64]) -> Result<Vec<f64>> {
    if !(sigma_cur > 0.0) {
        return Err(Error::contract(format!("euler step from sigma = {sigma_cur}")));
    }
    if z.len() != denoised.len() {
        return Err(Error::LengthMismatch {
            expected: z.len(),
            actual: denoised.len(),
        });
    }
    if sigma_next == 0.0 {
        return Ok(denoised.to_vec());
    }
    let h = sigma_next - sigma_cur;
    Ok(z.iter()
        .zip(denoised)
        .map(|(&zi, &di)| zi + h * (zi - di) / sigma_cur)
        .collect())
}

/// Heun (trapezoidal) step; falls back to Euler when `sigma_next = 0`.
pub fn heun_step<F>(z: &[f64], sigma_cur: f64, sigma_next: f64, mut eval: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    let d_cur = eval(z, sigma_cur)?;
    let predicted = euler_step(z, sigma_cur, sigma_next, &d_cur)?;
    if sigma_next == 0.0 {
        return Ok(predicted);
    }
    let d_next = eval(&predicted, sigma_next)?;
    if d_next.len() != z.len() {
        return Err(Error::LengthMismatch {
            expected: z.len(),
            actual: d_next.len(),
        });
    }
    let h = sigma_next - sigma_cur;
    Ok((0..z.len())
        .map(|i| {
            let slope_cur = (z[i] - d_cur[i]) / sigma_cur;
            let slope_next = (predicted[i] - d_next[i]) / sigma_next;
            z[i] + h * (0.5 * slope_cur + 0.5 * slope_next)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    Euler,
    #[default]
    Heun,
}

/// When the APG momentum buffer advances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentumMode {
    /// Every guided evaluation, including the Heun corrector.
    #[default]
    PerEvaluation,
    /// Once per step; the corrector sees the buffer without committing to it.
    PerStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub schedule: SigmaSchedule,
    pub step_rule: StepRule,
    pub momentum_mode: MomentumMode,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GuidanceStrategy {
    None,
    Cfg { w: f64 },
    Apg(GuidanceParams),
}

impl GuidanceStrategy {
    pub fn validate(&self) -> Result<()> {
        match self {
            GuidanceStrategy::None => Ok(()),
            GuidanceStrategy::Cfg { w } => GuidanceParams::cfg(*w).validate(),
            GuidanceStrategy::Apg(p) => p.validate(),
        }
    }
}

/// Per-step guidance diagnostics, taken at the first evaluation of a step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics {
    pub step: usize,
    pub sigma: f64,
    /// Norm of the raw `cond - uncond`; `None` without guidance.
    pub delta_norm: Option<f64>,
    pub gain_factor: Option<f64>,
    pub degenerate_reference: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub seed: u64,
    /// `(sigma, z)` from `sigma_max` down to 0; `steps + 1` entries.
    pub states: Vec<(f64, Vec<f64>)>,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl Trajectory {
    pub fn terminal(&self) -> &[f64] {
        &self.states.last().expect("trajectory has states").1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalSample {
    pub seed: u64,
    pub z: Vec<f64>,
    pub diagnostics: Vec<StepDiagnostics>,
}

struct GuidedEval {
    denoised: Vec<f64>,
    delta_norm: Option<f64>,
    gain_factor: Option<f64>,
    degenerate_reference: bool,
}

/// Per-trajectory guidance state.
struct Guider<'a> {
    cond: &'a dyn Denoiser,
    uncond: &'a dyn Denoiser,
    strategy: GuidanceStrategy,
    momentum: Option<MomentumState<f64>>,
}

impl<'a> Guider<'a> {
    fn new(cond: &'a dyn Denoiser, uncond: &'a dyn Denoiser, strategy: GuidanceStrategy) -> Self {
        let momentum = match strategy {
            GuidanceStrategy::Apg(p) => Some(MomentumState::new(p.beta, cond.dim())),
            _ => None,
        };
        Self {
            cond,
            uncond,
            strategy,
            momentum,
        }
    }

    fn eval(&mut self, z: &[f64], sigma: f64, commit: bool) -> Result<GuidedEval> {
        let cond = self.cond.denoise(z, sigma);
        let (w, params) = match self.strategy {
            GuidanceStrategy::None => {
                return Ok(GuidedEval {
                    denoised: cond,
                    delta_norm: None,
                    gain_factor: None,
                    degenerate_reference: false,
                })
            }
            GuidanceStrategy::Cfg { w } => (w, None),
            GuidanceStrategy::Apg(p) => (p.w, Some(p)),
        };
        let uncond = self.uncond.denoise(z, sigma);
        let pair = DenoisedPair::new(&cond, &uncond)?;
        let gain = gain_factor(&pair, w).ok().map(|g| g.value);
        match params {
            None => Ok(GuidedEval {
                denoised: cfg_combine(&pair, w),
                delta_norm: Some(norm_f64(pair.delta().as_slice())),
                gain_factor: gain,
                degenerate_reference: false,
            }),
            Some(p) => {
                let state = self.momentum.as_mut().expect("APG carries momentum");
                let outcome = if commit {
                    apg_update_detailed(&pair, &p, state)?
                } else {
                    apg_update_detailed(&pair, &p, &mut state.clone())?
                };
                Ok(GuidedEval {
                    denoised: outcome.guided,
                    delta_norm: Some(outcome.raw_delta_norm),
                    gain_factor: gain,
                    degenerate_reference: outcome.degenerate_reference,
                })
            }
        }
    }
}

fn run<F>(
    cond: &dyn Denoiser,
    uncond: &dyn Denoiser,
    strategy: &GuidanceStrategy,
    config: &SamplerConfig,
    seed: u64,
    mut on_state: F,
) -> Result<(Vec<f64>, Vec<StepDiagnostics>)>
where
    F: FnMut(f64, &[f64]),
{
    strategy.validate()?;
    let dim = cond.dim();
    if uncond.dim() != dim {
        return Err(Error::LengthMismatch {
            expected: dim,
            actual: uncond.dim(),
        });
    }
    let sigmas = karras_sigmas(&config.schedule)?;
    let mut z: Vec<f64> = standard_normals(seed, dim)
        .into_iter()
        .map(|e| config.schedule.sigma_max * e)
        .collect();
    on_state(sigmas[0], &z);

    let mut guider = Guider::new(cond, uncond, *strategy);
    let mut diagnostics = Vec::with_capacity(sigmas.len() - 1);
    let per_step = config.momentum_mode == MomentumMode::PerStep;

    for (step, pair) in sigmas.windows(2).enumerate() {
        let (s_cur, s_next) = (pair[0], pair[1]);
        let wrap = |e: Error| match e {
            Error::NonFinite { .. } => Error::NonFiniteState { step, sigma: s_cur },
            other => other,
        };
        let mut evals = 0usize;
        let mut first: Option<StepDiagnostics> = None;
        let mut eval = |x: &[f64], s: f64| -> Result<Vec<f64>> {
            let commit = !(per_step && evals > 0);
            evals += 1;
            let g = guider.eval(x, s, commit).map_err(wrap)?;
            if first.is_none() {
                first = Some(StepDiagnostics {
                    step,
                    sigma: s,
                    delta_norm: g.delta_norm,
                    gain_factor: g.gain_factor,
                    degenerate_reference: g.degenerate_reference,
                });
            }
            Ok(g.denoised)
        };
        z = match config.step_rule {
            StepRule::Euler => {
                let d = eval(&z, s_cur)?;
                euler_step(&z, s_cur, s_next, &d)?
            }
            StepRule::Heun => heun_step(&z, s_cur, s_next, &mut eval)?,
        };
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step, sigma: s_cur });
        }
        diagnostics.push(first.expect("each step evaluates the denoiser"));
        on_state(s_next, &z);
    }
    Ok((z, diagnostics))
}

/// Samples one full trajectory.
pub fn sample(
    cond: &dyn Denoiser,
    uncond: &dyn Denoiser,
    strategy: &GuidanceStrategy,
    config: &SamplerConfig,
    seed: u64,
) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(config.schedule.steps + 1);
    let (_, diagnostics) = run(cond, uncond, strategy, config, seed, |s, z| {
        states.push((s, z.to_vec()))
    })?;
    Ok(Trajectory {
        seed,
        states,
        diagnostics,
    })
}

/// Like [`sample`] but keeps only the terminal state.
pub fn sample_terminal(
    cond: &dyn Denoiser,
    uncond: &dyn Denoiser,
    strategy: &GuidanceStrategy,
    config: &SamplerConfig,
    seed: u64,
) -> Result<TerminalSample> {
    let (z, diagnostics) = run(cond, uncond, strategy, config, seed, |_, _| {})?;
    Ok(TerminalSample {
        seed,
        z,
        diagnostics,
    })
}

#[derive(Debug)]
pub struct BatchItem {
    pub index: usize,
    pub class_index: usize,
    pub result: Result<TerminalSample>,
}

/// Samples `count` class-conditional trajectories from a mixture, assigning
/// classes round-robin. Runs on the current rayon pool.
pub fn run_mixture_batch(
    mix: &GaussianMixture,
    strategy: &GuidanceStrategy,
    config: &SamplerConfig,
    run_seed: u64,
    count: usize,
) -> Vec<BatchItem> {
    let uncond = MixtureDenoiser { mixture: mix };
    (0..count)
        .into_par_iter()
        .map(|index| {
            let class_index = index % mix.components();
            let seed = trajectory_seed(run_seed, index as u64);
            let result = ComponentDenoiser::new(mix, class_index)
                .and_then(|cond| sample_terminal(&cond, &uncond, strategy, config, seed));
            BatchItem {
                index,
                class_index,
                result,
            }
        })
        .collect()
}

/// Rescale radius set to the median raw update norm observed over the first
/// `count` trajectories of a run with rescaling disabled. Steps whose update
/// norm is exactly zero are ignored.
pub fn calibrate_radius(
    mix: &GaussianMixture,
    params: &GuidanceParams,
    config: &SamplerConfig,
    run_seed: u64,
    count: usize,
) -> Result<f64> {
    let probe = GuidanceStrategy::Apg(GuidanceParams { r: 0.0, ..*params });
    let mut norms = Vec::new();
    for item in run_mixture_batch(mix, &probe, config, run_seed, count.max(1)) {
        let sample = item.result?;
        norms.extend(
            sample
                .diagnostics
                .iter()
                .filter_map(|d| d.delta_norm)
                .filter(|&n| n > 0.0),
        );
    }
    median(&mut norms).ok_or_else(|| Error::contract("calibration observed no nonzero update"))
}

pub(crate) fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Distances of samples to their nearest mixture mean.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftSummary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    /// Mean distance in units of the component sigma.
    pub mean_normalized: f64,
    /// Fraction of samples within `3 sigma sqrt(d)` of a mean.
    pub fraction_within: f64,
    /// How many samples each component mean is nearest to.
    pub nearest_counts: Vec<usize>,
}

pub fn mode_drift(samples: &[Vec<f64>], mix: &GaussianMixture) -> Result<DriftSummary> {
    if samples.is_empty() {
        return Err(Error::contract("mode drift needs at least one sample"));
    }
    let mut nearest_counts = vec![0usize; mix.components()];
    let mut distances = Vec::with_capacity(samples.len());
    for s in samples {
        if s.len() != mix.dim() {
            return Err(Error::LengthMismatch {
                expected: mix.dim(),
                actual: s.len(),
            });
        }
        let (idx, dist) = mix
            .means()
            .iter()
            .map(|mu| {
                s.iter()
                    .zip(mu)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("mixture has components");
        nearest_counts[idx] += 1;
        distances.push(dist);
    }
    let n = distances.len() as f64;
    let sc = mix.component_sigma();
    let radius = 3.0 * sc * (mix.dim() as f64).sqrt();
    let mean = distances.iter().sum::<f64>() / n;
    let max = distances.iter().copied().fold(0.0, f64::max);
    let within = distances.iter().filter(|&&d| d <= radius).count() as f64 / n;
    let median = median(&mut distances).expect("nonempty");
    Ok(DriftSummary {
        count: samples.len(),
        mean,
        median,
        max,
        mean_normalized: mean / sc,
        fraction_within: within,
        nearest_counts,
    })
}
