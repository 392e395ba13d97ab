//! Classifier-free guidance and adaptive projected guidance on flat vectors.
//!
//! Every rule here works on denoised predictions. The guided prediction is
//! always written in the form `cond + (w - 1) * update`, where `update` is the
//! CFG direction `cond - uncond` possibly modified by reverse momentum, norm
//! clamping and down-weighting of its component parallel to `cond`.
//!
//! Storage precision is generic ([`Real`]); the projection itself widens to
//! `f64` and narrows the result back.

use std::fmt::Debug;

use crate::error::{Error, Result};

/// Default floor on the reference norm below which a projection is refused.
pub const DEFAULT_REFERENCE_FLOOR: f64 = 1e-12;

/// Storage element for predictions.
pub trait Real: num_traits::Float + Debug + Send + Sync + 'static {
    fn widen(self) -> f64;
    fn narrow(v: f64) -> Self;
}

impl Real for f64 {
    #[inline]
    fn widen(self) -> f64 {
        self
    }
    #[inline]
    fn narrow(v: f64) -> Self {
        v
    }
}

impl Real for f32 {
    #[inline]
    fn widen(self) -> f64 {
        self as f64
    }
    #[inline]
    fn narrow(v: f64) -> Self {
        v as f32
    }
}

pub(crate) fn check_finite<T: Real>(values: &[T], what: &'static str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { what, index }),
        None => Ok(()),
    }
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::LengthMismatch { expected, actual });
    }
    Ok(())
}

pub(crate) fn dot_f64<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.widen() * y.widen()).sum()
}

pub(crate) fn norm_f64<T: Real>(a: &[T]) -> f64 {
    dot_f64(a, a).sqrt()
}

/// Hyperparameters of a guided update.
///
/// `r <= 0` disables rescaling, `beta = 0` disables momentum and `eta = 1`
/// keeps the parallel component untouched. With all three at those values the
/// APG rule is plain CFG.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceParams {
    /// Guidance scale; `w = 1` is the unguided case.
    pub w: f64,
    /// Weight of the component parallel to the conditional prediction.
    pub eta: f64,
    /// Rescale radius for the update direction.
    pub r: f64,
    /// Momentum strength, negative for reverse momentum.
    pub beta: f64,
}

impl GuidanceParams {
    /// Parameters under which APG reduces to CFG at scale `w`.
    pub fn cfg(w: f64) -> Self {
        Self {
            w,
            eta: 1.0,
            r: 0.0,
            beta: 0.0,
        }
    }

    pub fn rescale_enabled(&self) -> bool {
        self.r > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("w", self.w), ("eta", self.eta), ("r", self.r), ("beta", self.beta)] {
            if !v.is_finite() {
                return Err(Error::config(key, "must be finite"));
            }
        }
        if self.w < 0.0 {
            return Err(Error::config("w", "negative guidance scales are not supported"));
        }
        Ok(())
    }

    /// Non-fatal observations about the parameters.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.eta > 1.0 {
            out.push(format!("eta = {} amplifies the parallel component", self.eta));
        }
        if self.beta >= 1.0 {
            out.push(format!("beta = {} makes the momentum buffer grow without bound", self.beta));
        }
        out
    }
}

/// Conditional and unconditional denoised predictions for one state.
#[derive(Debug, Clone, Copy)]
pub struct DenoisedPair<'a, T> {
    cond: &'a [T],
    uncond: &'a [T],
}

impl<'a, T: Real> DenoisedPair<'a, T> {
    pub fn new(cond: &'a [T], uncond: &'a [T]) -> Result<Self> {
        check_len(cond.len(), uncond.len())?;
        check_finite(cond, "conditional prediction")?;
        check_finite(uncond, "unconditional prediction")?;
        Ok(Self { cond, uncond })
    }

    pub fn cond(&self) -> &'a [T] {
        self.cond
    }

    pub fn uncond(&self) -> &'a [T] {
        self.uncond
    }

    pub fn len(&self) -> usize {
        self.cond.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cond.is_empty()
    }

    /// The CFG update direction `cond - uncond`.
    pub fn delta(&self) -> UpdateDirection<T> {
        UpdateDirection(self.cond.iter().zip(self.uncond).map(|(&c, &u)| c - u).collect())
    }
}

/// A prediction-space update direction with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDirection<T>(Vec<T>);

impl<T: Real> UpdateDirection<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        check_finite(&values, "update direction")?;
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        norm_f64(&self.0)
    }
}

impl<T> AsRef<[T]> for UpdateDirection<T> {
    fn as_ref(&self) -> &[T] {
        &self.0
    }
}

/// Running average of update directions for one trajectory.
#[derive(Debug, Clone)]
pub struct MomentumState<T> {
    running_average: Vec<T>,
    beta: f64,
}

impl<T: Real> MomentumState<T> {
    /// A zero buffer of length `len`.
    pub fn new(beta: f64, len: usize) -> Self {
        Self {
            running_average: vec![T::zero(); len],
            beta,
        }
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn running_average(&self) -> &[T] {
        &self.running_average
    }

    pub fn reset(&mut self) {
        self.running_average.iter_mut().for_each(|v| *v = T::zero());
    }

    /// `avg <- delta + beta * avg`; returns the new average.
    pub fn update(&mut self, delta: &UpdateDirection<T>) -> Result<UpdateDirection<T>> {
        check_len(self.running_average.len(), delta.len())?;
        if self.beta == 0.0 {
            self.running_average.copy_from_slice(delta.as_slice());
        } else {
            let beta = T::narrow(self.beta);
            for (avg, &d) in self.running_average.iter_mut().zip(delta.as_slice()) {
                *avg = d + beta * *avg;
            }
        }
        UpdateDirection::new(self.running_average.clone())
    }
}

/// Standalone form of [`MomentumState::update`].
pub fn momentum_update<T: Real>(
    state: &mut MomentumState<T>,
    delta: &UpdateDirection<T>,
) -> Result<UpdateDirection<T>> {
    state.update(delta)
}

/// Classic CFG, evaluated as `cond + (w - 1) * (cond - uncond)`.
pub fn cfg_combine<T: Real>(pair: &DenoisedPair<'_, T>, w: f64) -> Vec<T> {
    let gamma = T::narrow(w - 1.0);
    pair.cond
        .iter()
        .zip(pair.uncond)
        .map(|(&c, &u)| c + gamma * (c - u))
        .collect()
}

/// Splits `delta` into components parallel and orthogonal to `reference`.
pub fn split_parallel_orthogonal<T: Real>(
    delta: &[T],
    reference: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    split_parallel_orthogonal_with_floor(delta, reference, DEFAULT_REFERENCE_FLOOR)
}

pub fn split_parallel_orthogonal_with_floor<T: Real>(
    delta: &[T],
    reference: &[T],
    floor: f64,
) -> Result<(Vec<T>, Vec<T>)> {
    check_len(reference.len(), delta.len())?;
    let ref_sq = dot_f64(reference, reference);
    let norm = ref_sq.sqrt();
    if !(norm >= floor) || norm == 0.0 {
        return Err(Error::DegenerateReference { norm, floor });
    }
    let coef = dot_f64(delta, reference) / ref_sq;
    let mut parallel = Vec::with_capacity(delta.len());
    let mut orthogonal = Vec::with_capacity(delta.len());
    for (&d, &r) in delta.iter().zip(reference) {
        let p = coef * r.widen();
        parallel.push(T::narrow(p));
        orthogonal.push(T::narrow(d.widen() - p));
    }
    Ok((parallel, orthogonal))
}

/// Scales `delta` into the ball of radius `r`; `r <= 0` or NaN is a no-op.
pub fn clamp_norm<T: Real>(delta: &UpdateDirection<T>, r: f64) -> UpdateDirection<T> {
    if r.is_nan() || r <= 0.0 {
        return delta.clone();
    }
    let norm = delta.norm();
    if norm <= r {
        return delta.clone();
    }
    // Shrink until the computed norm is within r, so a second clamp is a no-op.
    let step = 1.0 - 2.0 * T::epsilon().widen();
    let mut scale = r / norm;
    loop {
        let out: Vec<T> = delta
            .as_slice()
            .iter()
            .map(|&d| T::narrow(d.widen() * scale))
            .collect();
        let got = norm_f64(&out);
        if got <= r {
            return UpdateDirection(out);
        }
        scale *= (r / got) * step;
    }
}

/// Result of one APG evaluation along with what happened inside it.
#[derive(Debug, Clone)]
pub struct ApgOutcome<T> {
    pub guided: Vec<T>,
    /// Norm of the raw `cond - uncond` before momentum or clamping.
    pub raw_delta_norm: f64,
    /// Norm of the direction after momentum and clamping.
    pub effective_delta_norm: f64,
    /// The conditional prediction was too small to project onto; the whole
    /// direction was treated as orthogonal.
    pub degenerate_reference: bool,
}

/// Adaptive projected guidance: momentum, then rescaling, then projection.
pub fn apg_update<T: Real>(
    pair: &DenoisedPair<'_, T>,
    params: &GuidanceParams,
    state: &mut MomentumState<T>,
) -> Result<Vec<T>> {
    apg_update_detailed(pair, params, state).map(|o| o.guided)
}

pub fn apg_update_detailed<T: Real>(
    pair: &DenoisedPair<'_, T>,
    params: &GuidanceParams,
    state: &mut MomentumState<T>,
) -> Result<ApgOutcome<T>> {
    let raw = pair.delta();
    let raw_delta_norm = raw.norm();
    let mut delta = state.update(&raw)?;
    if params.rescale_enabled() {
        delta = clamp_norm(&delta, params.r);
    }
    let effective_delta_norm = delta.norm();

    let mut degenerate_reference = false;
    let update: Vec<T> = if params.eta == 1.0 {
        delta.into_vec()
    } else {
        match split_parallel_orthogonal(delta.as_slice(), pair.cond) {
            Ok((parallel, orthogonal)) => {
                let eta = T::narrow(params.eta);
                orthogonal
                    .into_iter()
                    .zip(parallel)
                    .map(|(o, p)| o + eta * p)
                    .collect()
            }
            Err(Error::DegenerateReference { .. }) => {
                degenerate_reference = true;
                delta.into_vec()
            }
            Err(e) => return Err(e),
        }
    };

    let gamma = T::narrow(params.w - 1.0);
    let guided = pair
        .cond
        .iter()
        .zip(&update)
        .map(|(&c, &u)| c + gamma * u)
        .collect();
    Ok(ApgOutcome {
        guided,
        raw_delta_norm,
        effective_delta_norm,
        degenerate_reference,
    })
}

/// The saturation gain `1 + (w - 1) * |parallel| / |cond|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainFactor {
    pub value: f64,
    /// Sign of `<cond - uncond, cond>`: `1`, `-1` or `0`.
    pub alignment: f64,
}

pub fn gain_factor<T: Real>(pair: &DenoisedPair<'_, T>, w: f64) -> Result<GainFactor> {
    let delta = pair.delta();
    let cond_norm = norm_f64(pair.cond);
    let (parallel, _) = split_parallel_orthogonal(delta.as_slice(), pair.cond)?;
    let ratio = norm_f64(&parallel) / cond_norm;
    let align = dot_f64(delta.as_slice(), pair.cond);
    let alignment = if align > 0.0 {
        1.0
    } else if align < 0.0 {
        -1.0
    } else {
        0.0
    };
    Ok(GainFactor {
        value: 1.0 + (w - 1.0) * ratio,
        alignment,
    })
}

/// `0.5 * |cond - uncond|^2`; its gradient in `cond` is the CFG direction.
pub fn cfg_objective<T: Real>(pair: &DenoisedPair<'_, T>) -> f64 {
    0.5 * pair
        .cond
        .iter()
        .zip(pair.uncond)
        .map(|(c, u)| {
            let d = c.widen() - u.widen();
            d * d
        })
        .sum::<f64>()
}
