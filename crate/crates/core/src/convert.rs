//! Conversions between raw network outputs and the denoised prediction.
//!
//! Guidance always runs on the denoised prediction `D`. A sampler whose model
//! predicts noise or velocity converts to `D`, applies guidance, then converts
//! back with [`from_denoised`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const UNIT_TOLERANCE: f64 = 1e-9;

/// Parameterization of a raw model output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PredictionKind {
    /// Noise prediction under `z = alpha x + sigma eps`.
    EpsilonDDPM,
    /// `v = alpha eps - sigma x` under the same process.
    VelocityDDPM,
    /// The output already is the denoised prediction.
    DenoisedDirect,
    /// Rectified-flow velocity `v = eps - x` with `z = (1 - t) x + t eps`.
    VelocityRF,
    /// EDM network output `F`, combined as `c_skip z + c_out F`.
    PreconditionedEDM,
}

impl PredictionKind {
    pub const ALL: [PredictionKind; 5] = [
        PredictionKind::EpsilonDDPM,
        PredictionKind::VelocityDDPM,
        PredictionKind::DenoisedDirect,
        PredictionKind::VelocityRF,
        PredictionKind::PreconditionedEDM,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PredictionKind::EpsilonDDPM => "epsilon",
            PredictionKind::VelocityDDPM => "v_ddpm",
            PredictionKind::DenoisedDirect => "denoised",
            PredictionKind::VelocityRF => "v_rf",
            PredictionKind::PreconditionedEDM => "edm",
        }
    }
}

impl fmt::Display for PredictionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PredictionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PredictionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::UnknownKind(s.to_owned()))
    }
}

impl TryFrom<String> for PredictionKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PredictionKind> for String {
    fn from(k: PredictionKind) -> Self {
        k.as_str().to_owned()
    }
}

/// Signal and noise coefficients of `z_t = alpha_t x + sigma_t eps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleParams {
    pub alpha_t: f64,
    pub sigma_t: f64,
}

impl ScheduleParams {
    /// Variance-preserving DDPM coefficients at a given `alpha_t`.
    pub fn ddpm(alpha_t: f64) -> Self {
        Self {
            alpha_t,
            sigma_t: (1.0 - alpha_t * alpha_t).max(0.0).sqrt(),
        }
    }

    /// Rectified flow at time `t`: `alpha = 1 - t`, `sigma = t`.
    pub fn rectified_flow(t: f64) -> Self {
        Self {
            alpha_t: 1.0 - t,
            sigma_t: t,
        }
    }

    /// Variance-exploding process at noise level `sigma`.
    pub fn edm(sigma: f64) -> Self {
        Self {
            alpha_t: 1.0,
            sigma_t: sigma,
        }
    }

    pub fn validate_for(&self, kind: PredictionKind) -> Result<()> {
        let ScheduleParams { alpha_t, sigma_t } = *self;
        if !alpha_t.is_finite() || !sigma_t.is_finite() {
            return Err(Error::contract("schedule coefficients must be finite"));
        }
        match kind {
            PredictionKind::EpsilonDDPM | PredictionKind::VelocityDDPM => {
                let unit = alpha_t * alpha_t + sigma_t * sigma_t;
                if (unit - 1.0).abs() > UNIT_TOLERANCE {
                    return Err(Error::contract(format!(
                        "DDPM schedule requires alpha^2 + sigma^2 = 1, got {unit}"
                    )));
                }
            }
            PredictionKind::VelocityRF => {
                if sigma_t < 0.0 || (alpha_t - (1.0 - sigma_t)).abs() > UNIT_TOLERANCE {
                    return Err(Error::contract(
                        "rectified-flow schedule requires alpha = 1 - t, sigma = t >= 0",
                    ));
                }
            }
            PredictionKind::PreconditionedEDM => {
                if sigma_t < 0.0 || (alpha_t - 1.0).abs() > UNIT_TOLERANCE {
                    return Err(Error::contract("EDM schedule requires alpha = 1, sigma >= 0"));
                }
            }
            PredictionKind::DenoisedDirect => {}
        }
        Ok(())
    }
}

/// EDM preconditioning constants at one noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EDMCoefficients {
    pub c_skip: f64,
    pub c_in: f64,
    pub c_out: f64,
    pub c_noise: f64,
}

pub fn edm_coefficients(sigma: f64, sigma_data: f64) -> Result<EDMCoefficients> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::contract(format!("sigma must be positive, got {sigma}")));
    }
    if !(sigma_data > 0.0 && sigma_data.is_finite()) {
        return Err(Error::contract(format!(
            "sigma_data must be positive, got {sigma_data}"
        )));
    }
    let sd2 = sigma_data * sigma_data;
    let total = sigma * sigma + sd2;
    Ok(EDMCoefficients {
        c_skip: sd2 / total,
        c_out: sigma * sigma_data / total.sqrt(),
        c_in: 1.0 / total.sqrt(),
        c_noise: 0.25 * sigma.ln(),
    })
}

fn check_pair(z: &[f64], other: &[f64]) -> Result<()> {
    if z.len() != other.len() {
        return Err(Error::LengthMismatch {
            expected: z.len(),
            actual: other.len(),
        });
    }
    Ok(())
}

/// Converts a raw output of the given kind to the denoised prediction.
///
/// For [`PredictionKind::PreconditionedEDM`], `raw` is the network output `F`
/// already evaluated at `c_in z`, and `edm` must be present. For every other
/// kind `edm` must be `None`.
pub fn to_denoised(
    kind: PredictionKind,
    z: &[f64],
    raw: &[f64],
    sched: ScheduleParams,
    edm: Option<&EDMCoefficients>,
) -> Result<Vec<f64>> {
    check_pair(z, raw)?;
    sched.validate_for(kind)?;
    let ScheduleParams { alpha_t, sigma_t } = sched;
    match (kind, edm) {
        (PredictionKind::PreconditionedEDM, None) => {
            Err(Error::contract("EDM conversion requires preconditioning coefficients"))
        }
        (PredictionKind::PreconditionedEDM, Some(c)) => Ok(z
            .iter()
            .zip(raw)
            .map(|(&z, &f)| c.c_skip * z + c.c_out * f)
            .collect()),
        (_, Some(_)) => Err(Error::contract(format!(
            "preconditioning coefficients are only valid for `edm`, not `{kind}`"
        ))),
        (PredictionKind::EpsilonDDPM, None) => {
            if alpha_t == 0.0 {
                return Err(Error::DivisionByZero("epsilon conversion with alpha_t = 0"));
            }
            Ok(z.iter()
                .zip(raw)
                .map(|(&z, &e)| (z - sigma_t * e) / alpha_t)
                .collect())
        }
        (PredictionKind::VelocityDDPM, None) => Ok(z
            .iter()
            .zip(raw)
            .map(|(&z, &v)| alpha_t * z - sigma_t * v)
            .collect()),
        (PredictionKind::VelocityRF, None) => Ok(z
            .iter()
            .zip(raw)
            .map(|(&z, &v)| z - sigma_t * v)
            .collect()),
        (PredictionKind::DenoisedDirect, None) => Ok(raw.to_vec()),
    }
}

/// Inverse of [`to_denoised`]; EDM preconditioning is one-way.
pub fn from_denoised(
    kind: PredictionKind,
    z: &[f64],
    denoised: &[f64],
    sched: ScheduleParams,
) -> Result<Vec<f64>> {
    check_pair(z, denoised)?;
    sched.validate_for(kind)?;
    let ScheduleParams { alpha_t, sigma_t } = sched;
    let needs_sigma = || {
        if sigma_t == 0.0 {
            Err(Error::DivisionByZero("conversion from denoised with sigma_t = 0"))
        } else {
            Ok(())
        }
    };
    match kind {
        PredictionKind::PreconditionedEDM => Err(Error::UnsupportedKind(kind.as_str())),
        PredictionKind::DenoisedDirect => Ok(denoised.to_vec()),
        PredictionKind::EpsilonDDPM => {
            needs_sigma()?;
            Ok(z.iter()
                .zip(denoised)
                .map(|(&z, &x)| (z - alpha_t * x) / sigma_t)
                .collect())
        }
        PredictionKind::VelocityDDPM => {
            needs_sigma()?;
            Ok(z.iter()
                .zip(denoised)
                .map(|(&z, &x)| (alpha_t * z - x) / sigma_t)
                .collect())
        }
        PredictionKind::VelocityRF => {
            needs_sigma()?;
            Ok(z.iter()
                .zip(denoised)
                .map(|(&z, &x)| (z - x) / sigma_t)
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn names_are_stable() {
        let names: Vec<_> = PredictionKind::ALL.iter().map(|k| k.as_str()).collect();
        assert_eq!(names, ["epsilon", "v_ddpm", "denoised", "v_rf", "edm"]);
        for k in PredictionKind::ALL {
            assert_eq!(k.as_str().parse::<PredictionKind>().unwrap(), k);
        }
        assert!(matches!("eps".parse::<PredictionKind>(), Err(Error::UnknownKind(_))));
    }

    #[test]
    fn rf_at_zero_returns_z() {
        let z = [0.3, -1.2];
        let d = to_denoised(
            PredictionKind::VelocityRF,
            &z,
            &[5.0, 7.0],
            ScheduleParams::rectified_flow(0.0),
            None,
        )
        .unwrap();
        assert_eq!(d, z);
    }

    #[test]
    fn epsilon_synthesis() {
        // z = 0.8 * 1 + 0.6 * 0.5
        let sched = ScheduleParams { alpha_t: 0.8, sigma_t: 0.6 };
        let d = to_denoised(PredictionKind::EpsilonDDPM, &[1.1], &[0.5], sched, None).unwrap();
        assert_abs_diff_eq!(d[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn velocity_synthesis() {
        let sched = ScheduleParams { alpha_t: 0.6, sigma_t: 0.8 };
        let d = to_denoised(PredictionKind::VelocityDDPM, &[0.6], &[-0.8], sched, None).unwrap();
        assert_abs_diff_eq!(d[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn from_denoised_examples() {
        let any = ScheduleParams::edm(0.3);
        assert_eq!(
            from_denoised(PredictionKind::DenoisedDirect, &[1.0], &[7.0], any).unwrap(),
            vec![7.0]
        );
        let v = from_denoised(
            PredictionKind::VelocityRF,
            &[2.0],
            &[1.0],
            ScheduleParams::rectified_flow(0.5),
        )
        .unwrap();
        assert_eq!(v, vec![2.0]);
    }

    #[test]
    fn error_paths() {
        let zero_alpha = ScheduleParams { alpha_t: 0.0, sigma_t: 1.0 };
        assert!(matches!(
            to_denoised(PredictionKind::EpsilonDDPM, &[1.0], &[1.0], zero_alpha, None),
            Err(Error::DivisionByZero(_))
        ));
        let zero_sigma = ScheduleParams { alpha_t: 1.0, sigma_t: 0.0 };
        for kind in [
            PredictionKind::EpsilonDDPM,
            PredictionKind::VelocityDDPM,
            PredictionKind::VelocityRF,
        ] {
            assert!(matches!(
                from_denoised(kind, &[1.0], &[1.0], zero_sigma),
                Err(Error::DivisionByZero(_))
            ));
        }
        assert!(matches!(
            from_denoised(PredictionKind::PreconditionedEDM, &[1.0], &[1.0], zero_sigma),
            Err(Error::UnsupportedKind("edm"))
        ));
        let c = edm_coefficients(1.0, 0.5).unwrap();
        assert!(to_denoised(PredictionKind::PreconditionedEDM, &[1.0], &[1.0], ScheduleParams::edm(1.0), None).is_err());
        assert!(to_denoised(PredictionKind::VelocityRF, &[1.0], &[1.0], ScheduleParams::rectified_flow(0.5), Some(&c)).is_err());
        assert!(matches!(
            to_denoised(PredictionKind::DenoisedDirect, &[1.0], &[1.0, 2.0], zero_sigma, None),
            Err(Error::LengthMismatch { .. })
        ));
        let bad_ddpm = ScheduleParams { alpha_t: 0.9, sigma_t: 0.9 };
        assert!(to_denoised(PredictionKind::EpsilonDDPM, &[1.0], &[1.0], bad_ddpm, None).is_err());
    }

    #[test]
    fn edm_coefficient_values() {
        let c = edm_coefficients(1e-8, 0.5).unwrap();
        assert_abs_diff_eq!(c.c_skip, 1.0, epsilon = 1e-12);
        let c = edm_coefficients(0.5, 0.5).unwrap();
        assert_abs_diff_eq!(c.c_skip, 0.5, epsilon = 1e-15);
        let c = edm_coefficients(1.0, 1.0).unwrap();
        assert_abs_diff_eq!(c.c_out, std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
        assert_abs_diff_eq!(c.c_noise, 0.0);
        assert!(c.c_in > 0.0);
        assert!(edm_coefficients(0.0, 1.0).is_err());
        assert!(edm_coefficients(1.0, -1.0).is_err());
    }

    #[test]
    fn edm_with_exact_network_recovers_x() {
        // F that makes D exact: F = (x - c_skip z) / c_out
        let (sigma, sd) = (2.5, 0.5);
        let c = edm_coefficients(sigma, sd).unwrap();
        let x = [0.4, -0.1];
        let eps = [1.3, 0.7];
        let z: Vec<f64> = x.iter().zip(&eps).map(|(x, e)| x + sigma * e).collect();
        let f: Vec<f64> = x.iter().zip(&z).map(|(x, z)| (x - c.c_skip * z) / c.c_out).collect();
        let d = to_denoised(PredictionKind::PreconditionedEDM, &z, &f, ScheduleParams::edm(sigma), Some(&c)).unwrap();
        for (a, b) in d.iter().zip(x) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-14);
        }
    }
}
