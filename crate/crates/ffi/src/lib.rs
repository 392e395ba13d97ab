//! C ABI over `pg_lab`.
//!
//! Every fallible function returns a [`PgStatus`]. On failure a description is
//! kept per thread and can be read with [`pg_last_error_message`]. Vectors are
//! passed as a pointer plus an element count; output buffers are written only
//! on success.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use pg_lab::analytic::{self, GaussianMixture};
use pg_lab::convert::{self, PredictionKind, ScheduleParams};
use pg_lab::guidance::{self, DenoisedPair, GuidanceParams, MomentumState, UpdateDirection};
use pg_lab::metrics::{self, ImageRGB};
use pg_lab::sampler::{self, SigmaSchedule};
use pg_lab::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgStatus {
    Ok = 0,
    NullPointer = 1,
    LengthMismatch = 2,
    NonFinite = 3,
    DegenerateReference = 4,
    InvalidArgument = 5,
    DivisionByZero = 6,
    Unsupported = 7,
    BufferTooSmall = 8,
    Panic = 99,
}

/// Parameterization of a raw model output.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgPredictionKind {
    Epsilon = 0,
    VelocityDdpm = 1,
    Denoised = 2,
    VelocityRf = 3,
    Edm = 4,
}

/// Kinds cross the boundary as plain integers so that out-of-range values
/// from C are reported instead of being undefined behavior.
fn prediction_kind(raw: u32) -> Result<PredictionKind, Failure> {
    const EPSILON: u32 = PgPredictionKind::Epsilon as u32;
    const V_DDPM: u32 = PgPredictionKind::VelocityDdpm as u32;
    const DENOISED: u32 = PgPredictionKind::Denoised as u32;
    const V_RF: u32 = PgPredictionKind::VelocityRf as u32;
    const EDM: u32 = PgPredictionKind::Edm as u32;
    Ok(match raw {
        EPSILON => PredictionKind::EpsilonDDPM,
        V_DDPM => PredictionKind::VelocityDDPM,
        DENOISED => PredictionKind::DenoisedDirect,
        V_RF => PredictionKind::VelocityRF,
        EDM => PredictionKind::PreconditionedEDM,
        other => return Err(invalid(format!("unknown prediction kind {other}"))),
    })
}

/// Momentum buffer for repeated guidance updates. Opaque to C.
pub struct PgMomentum {
    state: MomentumState<f64>,
}

/// Analytic Gaussian mixture. Opaque to C.
pub struct PgMixture {
    mixture: GaussianMixture,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(PgStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::LengthMismatch { .. } => PgStatus::LengthMismatch,
            Error::NonFinite { .. } | Error::NonFiniteState { .. } => PgStatus::NonFinite,
            Error::DegenerateReference { .. } => PgStatus::DegenerateReference,
            Error::DivisionByZero(_) => PgStatus::DivisionByZero,
            Error::UnsupportedKind(_) => PgStatus::Unsupported,
            _ => PgStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(PgStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PgStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            PgStatus::Panic
        }
    }
}

unsafe fn input<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure(PgStatus::NullPointer, format!("{name} is null")));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a>(p: *mut f64, len: usize, name: &str) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure(PgStatus::NullPointer, format!("{name} is null")));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

fn write_out(out: &mut [f64], values: &[f64]) -> Result<(), Failure> {
    if out.len() != values.len() {
        return Err(Failure(
            PgStatus::LengthMismatch,
            format!("output has {} slots, result has {}", out.len(), values.len()),
        ));
    }
    out.copy_from_slice(values);
    Ok(())
}

/// Message for the most recent failure on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// `out = cond + (w - 1) * (cond - uncond)`.
///
/// # Safety
/// `cond`, `uncond` and `out` must each point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pg_cfg_combine(
    cond: *const f64,
    uncond: *const f64,
    len: usize,
    w: f64,
    out: *mut f64,
) -> PgStatus {
    guard(|| {
        let pair = DenoisedPair::new(input(cond, len, "cond")?, input(uncond, len, "uncond")?)?;
        GuidanceParams::cfg(w).validate()?;
        write_out(output(out, len, "out")?, &guidance::cfg_combine(&pair, w))
    })
}

/// Creates a zeroed momentum buffer. Returns NULL if `beta` is not finite.
#[no_mangle]
pub extern "C" fn pg_momentum_new(beta: f64, len: usize) -> *mut PgMomentum {
    if !beta.is_finite() {
        set_last_error(format!("beta must be finite, got {beta}"));
        return ptr::null_mut();
    }
    Box::into_raw(Box::new(PgMomentum {
        state: MomentumState::new(beta, len),
    }))
}

/// # Safety
/// `m` must be NULL or a handle from [`pg_momentum_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pg_momentum_free(m: *mut PgMomentum) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Zeroes the buffer, as at the start of a new trajectory.
///
/// # Safety
/// `m` must be a live handle from [`pg_momentum_new`].
#[no_mangle]
pub unsafe extern "C" fn pg_momentum_reset(m: *mut PgMomentum) -> PgStatus {
    guard(|| {
        let m = m
            .as_mut()
            .ok_or_else(|| Failure(PgStatus::NullPointer, "momentum is null".into()))?;
        m.state.reset();
        Ok(())
    })
}

/// Copies the running average into `out`.
///
/// # Safety
/// `m` must be a live handle; `out` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pg_momentum_average(
    m: *const PgMomentum,
    out: *mut f64,
    len: usize,
) -> PgStatus {
    guard(|| {
        let m = m
            .as_ref()
            .ok_or_else(|| Failure(PgStatus::NullPointer, "momentum is null".into()))?;
        write_out(output(out, len, "out")?, m.state.running_average())
    })
}

/// One adaptive projected guidance update. The momentum coefficient is the
/// one the handle was created with; `r <= 0` disables rescaling.
///
/// # Safety
/// `m` must be a live handle; vector arguments must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pg_apg_update(
    cond: *const f64,
    uncond: *const f64,
    len: usize,
    w: f64,
    eta: f64,
    r: f64,
    m: *mut PgMomentum,
    out: *mut f64,
) -> PgStatus {
    guard(|| {
        let m = m
            .as_mut()
            .ok_or_else(|| Failure(PgStatus::NullPointer, "momentum is null".into()))?;
        let pair = DenoisedPair::new(input(cond, len, "cond")?, input(uncond, len, "uncond")?)?;
        let params = GuidanceParams {
            w,
            eta,
            r,
            beta: m.state.beta(),
        };
        params.validate()?;
        let guided = guidance::apg_update(&pair, &params, &mut m.state)?;
        write_out(output(out, len, "out")?, &guided)
    })
}

/// Splits `delta` into parts parallel and orthogonal to `reference`.
///
/// # Safety
/// All pointers must reference `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pg_split_parallel_orthogonal(
    delta: *const f64,
    reference: *const f64,
    len: usize,
    parallel_out: *mut f64,
    orthogonal_out: *mut f64,
) -> PgStatus {
    guard(|| {
        let d = input(delta, len, "delta")?;
        let refv = input(reference, len, "reference")?;
        let (par, orth) = guidance::split_parallel_orthogonal(d, refv)?;
        let p = output(parallel_out, len, "parallel_out")?;
        let o = output(orthogonal_out, len, "orthogonal_out")?;
        write_out(p, &par)?;
        write_out(o, &orth)
    })
}

/// Scales `delta` down to norm `r` when longer; `r <= 0` copies it unchanged.
///
/// # Safety
/// `delta` and `out` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pg_clamp_norm(
    delta: *const f64,
    len: usize,
    r: f64,
    out: *mut f64,
) -> PgStatus {
    guard(|| {
        let d = UpdateDirection::new(input(delta, len, "delta")?.to_vec())?;
        let clamped = guidance::clamp_norm(&d, r);
        write_out(output(out, len, "out")?, clamped.as_slice())
    })
}

/// Writes the gain factor and the sign of `<cond - uncond, cond>`.
///
/// # Safety
/// `cond` and `uncond` must point to `len` doubles; the outputs to one each.
#[no_mangle]
pub unsafe extern "C" fn pg_gain_factor(
    cond: *const f64,
    uncond: *const f64,
    len: usize,
    w: f64,
    value_out: *mut f64,
    alignment_out: *mut f64,
) -> PgStatus {
    guard(|| {
        let pair = DenoisedPair::new(input(cond, len, "cond")?, input(uncond, len, "uncond")?)?;
        let g = guidance::gain_factor(&pair, w)?;
        output(value_out, 1, "value_out")?[0] = g.value;
        output(alignment_out, 1, "alignment_out")?[0] = g.alignment;
        Ok(())
    })
}

/// Converts a raw output to a denoised prediction. `kind` is a
/// [`PgPredictionKind`] value. `sigma_data` is used only for the EDM kind,
/// where `alpha` must be 1.
///
/// # Safety
/// `z`, `raw` and `out` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pg_to_denoised(
    kind: u32,
    z: *const f64,
    raw: *const f64,
    len: usize,
    alpha: f64,
    sigma: f64,
    sigma_data: f64,
    out: *mut f64,
) -> PgStatus {
    guard(|| {
        let kind = prediction_kind(kind)?;
        let sched = ScheduleParams { alpha_t: alpha, sigma_t: sigma };
        let coeffs = if kind == PredictionKind::PreconditionedEDM {
            Some(convert::edm_coefficients(sigma, sigma_data)?)
        } else {
            None
        };
        let d = convert::to_denoised(
            kind,
            input(z, len, "z")?,
            input(raw, len, "raw")?,
            sched,
            coeffs.as_ref(),
        )?;
        write_out(output(out, len, "out")?, &d)
    })
}

/// Inverse of [`pg_to_denoised`]; unsupported for the EDM kind.
///
/// # Safety
/// `z`, `denoised` and `out` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pg_from_denoised(
    kind: u32,
    z: *const f64,
    denoised: *const f64,
    len: usize,
    alpha: f64,
    sigma: f64,
    out: *mut f64,
) -> PgStatus {
    guard(|| {
        let sched = ScheduleParams { alpha_t: alpha, sigma_t: sigma };
        let raw = convert::from_denoised(
            prediction_kind(kind)?,
            input(z, len, "z")?,
            input(denoised, len, "denoised")?,
            sched,
        )?;
        write_out(output(out, len, "out")?, &raw)
    })
}

/// Writes `steps + 1` noise levels, descending and ending in 0.
///
/// # Safety
/// `out` must point to `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pg_karras_sigmas(
    sigma_min: f64,
    sigma_max: f64,
    rho: f64,
    steps: usize,
    out: *mut f64,
    out_len: usize,
) -> PgStatus {
    guard(|| {
        let sigmas = sampler::karras_sigmas(&SigmaSchedule {
            sigma_min,
            sigma_max,
            steps,
            rho,
        })?;
        if out_len < sigmas.len() {
            return Err(Failure(
                PgStatus::BufferTooSmall,
                format!("need {} slots, got {out_len}", sigmas.len()),
            ));
        }
        output(out, sigmas.len(), "out")?.copy_from_slice(&sigmas);
        Ok(())
    })
}

/// Creates a mixture of isotropic Gaussians. `means` is row-major
/// `components x dim`. Returns NULL on invalid input.
///
/// # Safety
/// `means` must point to `components * dim` doubles and `weights` to
/// `components` doubles.
#[no_mangle]
pub unsafe extern "C" fn pg_mixture_new(
    means: *const f64,
    components: usize,
    dim: usize,
    component_sigma: f64,
    weights: *const f64,
) -> *mut PgMixture {
    let mut handle = ptr::null_mut();
    let status = guard(|| {
        if components == 0 || dim == 0 {
            return Err(invalid("mixture needs at least one component and dimension"));
        }
        let total = components
            .checked_mul(dim)
            .ok_or_else(|| invalid("components * dim overflows"))?;
        let flat = input(means, total, "means")?;
        let w = input(weights, components, "weights")?;
        let means = flat.chunks(dim).map(<[f64]>::to_vec).collect();
        let mixture = GaussianMixture::new(means, component_sigma, w.to_vec())?;
        handle = Box::into_raw(Box::new(PgMixture { mixture }));
        Ok(())
    });
    if status == PgStatus::Ok { handle } else { ptr::null_mut() }
}

/// # Safety
/// `m` must be NULL or a handle from [`pg_mixture_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pg_mixture_free(m: *mut PgMixture) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Posterior mean of the clean sample under the whole mixture.
///
/// # Safety
/// `m` must be a live handle; `z` and `out` must point to `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn pg_mixture_denoise_uncond(
    m: *const PgMixture,
    z: *const f64,
    dim: usize,
    sigma: f64,
    out: *mut f64,
) -> PgStatus {
    guard(|| {
        let m = m
            .as_ref()
            .ok_or_else(|| Failure(PgStatus::NullPointer, "mixture is null".into()))?;
        if dim != m.mixture.dim() {
            return Err(Error::LengthMismatch { expected: m.mixture.dim(), actual: dim }.into());
        }
        let zs = input(z, dim, "z")?;
        if let Some(i) = zs.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "z", index: i }.into());
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(invalid(format!("sigma must be finite and non-negative, got {sigma}")));
        }
        let d = analytic::denoiser_uncond_posterior(&m.mixture, zs, sigma);
        write_out(output(out, dim, "out")?, &d)
    })
}

/// Posterior mean of the clean sample under one component.
///
/// # Safety
/// `m` must be a live handle; `z` and `out` must point to `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn pg_mixture_denoise_cond(
    m: *const PgMixture,
    class_index: usize,
    z: *const f64,
    dim: usize,
    sigma: f64,
    out: *mut f64,
) -> PgStatus {
    guard(|| {
        let m = m
            .as_ref()
            .ok_or_else(|| Failure(PgStatus::NullPointer, "mixture is null".into()))?;
        if dim != m.mixture.dim() {
            return Err(Error::LengthMismatch { expected: m.mixture.dim(), actual: dim }.into());
        }
        let d = analytic::denoiser_cond(&m.mixture, class_index, input(z, dim, "z")?, sigma)?;
        write_out(output(out, dim, "out")?, &d)
    })
}

unsafe fn image(rgb: *const f64, width: usize, height: usize) -> Result<ImageRGB, Failure> {
    let n = width
        .checked_mul(height)
        .ok_or_else(|| invalid("width * height overflows"))?;
    let flat = input(rgb, n.checked_mul(3).ok_or_else(|| invalid("size overflows"))?, "rgb")?;
    let pixels = flat.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect();
    Ok(ImageRGB::new(width, height, pixels)?)
}

/// Mean HSV saturation of an interleaved RGB image with values in [0, 1].
///
/// # Safety
/// `rgb` must point to `3 * width * height` doubles; `out` to one.
#[no_mangle]
pub unsafe extern "C" fn pg_mean_saturation(
    rgb: *const f64,
    width: usize,
    height: usize,
    out: *mut f64,
) -> PgStatus {
    guard(|| {
        let img = image(rgb, width, height)?;
        output(out, 1, "out")?[0] = metrics::mean_saturation(&img);
        Ok(())
    })
}

/// Standard deviation of luma of an interleaved RGB image.
///
/// # Safety
/// `rgb` must point to `3 * width * height` doubles; `out` to one.
#[no_mangle]
pub unsafe extern "C" fn pg_rms_contrast(
    rgb: *const f64,
    width: usize,
    height: usize,
    out: *mut f64,
) -> PgStatus {
    guard(|| {
        let img = image(rgb, width, height)?;
        output(out, 1, "out")?[0] = metrics::rms_contrast(&img);
        Ok(())
    })
}
