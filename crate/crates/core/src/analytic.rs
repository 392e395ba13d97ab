//! Closed-form denoisers for an isotropic Gaussian mixture.
//!
//! Under the variance-exploding process `z = x + sigma eps`, a component
//! `N(mu, s^2 I)` becomes `N(mu, (s^2 + sigma^2) I)`, so the noisy marginal,
//! its score and the posterior mean `E[x | z]` are all available exactly.
//! Responsibilities are computed in log space: at d = 500 the component log
//! densities are thousands of nats apart.

use crate::error::{Error, Result};
use crate::sampler::Denoiser;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    means: Vec<Vec<f64>>,
    component_sigma: f64,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(means: Vec<Vec<f64>>, component_sigma: f64, weights: Vec<f64>) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::contract("mixture needs at least one component"));
        }
        if means.len() != weights.len() {
            return Err(Error::contract(format!(
                "{} means but {} weights",
                means.len(),
                weights.len()
            )));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::contract("all means must share a nonzero dimension"));
        }
        if means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::contract("means must be finite"));
        }
        if !(component_sigma > 0.0 && component_sigma.is_finite()) {
            return Err(Error::contract("component sigma must be positive"));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::contract("weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::contract(format!("weights sum to {total}, not 1")));
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self {
            means,
            component_sigma,
            weights,
            log_weights,
        })
    }

    /// Components centred at `+mode` (one component) or `-mode` and `+mode`
    /// (two components) in every coordinate.
    pub fn symmetric(dim: usize, mode: f64, component_sigma: f64, weights: Vec<f64>) -> Result<Self> {
        let means = match weights.len() {
            1 => vec![vec![mode; dim]],
            2 => vec![vec![-mode; dim], vec![mode; dim]],
            n => {
                return Err(Error::contract(format!(
                    "symmetric mixtures have one or two components, got {n} weights"
                )))
            }
        };
        Self::new(means, component_sigma, weights)
    }

    /// Two equal-weight modes at `-2` and `+2` with `sigma = 0.25`.
    pub fn two_mode_toy(dim: usize) -> Self {
        Self::symmetric(dim, 2.0, 0.25, vec![0.5, 0.5]).expect("valid toy mixture")
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.means.len()
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn component_sigma(&self) -> f64 {
        self.component_sigma
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn noisy_variance(&self, sigma: f64) -> f64 {
        self.component_sigma * self.component_sigma + sigma * sigma
    }

    /// `sigma^2 / (s^2 + sigma^2)`: how far a component posterior mean moves
    /// from `z` toward the component mean.
    fn pull(&self, sigma: f64) -> f64 {
        sigma * sigma / self.noisy_variance(sigma)
    }

    fn check_point(&self, z: &[f64]) {
        assert_eq!(z.len(), self.dim(), "point dimension does not match mixture");
    }

    /// `log w_i + log N(z; mu_i, var I)` for every component.
    fn joint_log_terms(&self, z: &[f64], sigma: f64) -> Vec<f64> {
        self.check_point(z);
        let var = self.noisy_variance(sigma);
        let norm = -0.5 * self.dim() as f64 * (LN_2PI + var.ln());
        self.means
            .iter()
            .zip(&self.log_weights)
            .map(|(mu, lw)| {
                let sq: f64 = z.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
                lw + norm - sq / (2.0 * var)
            })
            .collect()
    }

    /// Posterior component probabilities given a noisy point.
    pub fn responsibilities(&self, z: &[f64], sigma: f64) -> Vec<f64> {
        let terms = self.joint_log_terms(z, sigma);
        let lse = log_sum_exp(&terms);
        let mut gamma: Vec<f64> = terms.iter().map(|t| (t - lse).exp()).collect();
        let total: f64 = gamma.iter().sum();
        gamma.iter_mut().for_each(|g| *g /= total);
        gamma
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log density of the mixture convolved with `N(0, sigma^2 I)`.
pub fn marginal_log_density(mix: &GaussianMixture, z: &[f64], sigma: f64) -> f64 {
    log_sum_exp(&mix.joint_log_terms(z, sigma))
}

/// Gradient of [`marginal_log_density`] with respect to `z`.
pub fn score(mix: &GaussianMixture, z: &[f64], sigma: f64) -> Vec<f64> {
    let gamma = mix.responsibilities(z, sigma);
    let var = mix.noisy_variance(sigma);
    let mut out = vec![0.0; z.len()];
    for (g, mu) in gamma.iter().zip(&mix.means) {
        for ((o, m), zi) in out.iter_mut().zip(mu).zip(z) {
            *o += g * (m - zi) / var;
        }
    }
    out
}

/// Posterior mean `E[x | z]` via Tweedie's formula `z + sigma^2 score`.
pub fn denoiser_uncond(mix: &GaussianMixture, z: &[f64], sigma: f64) -> Vec<f64> {
    let s = score(mix, z, sigma);
    let s2 = sigma * sigma;
    z.iter().zip(&s).map(|(zi, si)| zi + s2 * si).collect()
}

/// Posterior mean written as a responsibility-weighted sum of per-component
/// posterior means `mu + s^2 / (s^2 + sigma^2) (z - mu)`. Agrees with [`denoiser_uncond`].
pub fn denoiser_uncond_posterior(mix: &GaussianMixture, z: &[f64], sigma: f64) -> Vec<f64> {
    let gamma = mix.responsibilities(z, sigma);
    let pull = mix.pull(sigma);
    let mut out = vec![0.0; z.len()];
    for (g, mu) in gamma.iter().zip(&mix.means) {
        for ((o, m), zi) in out.iter_mut().zip(mu).zip(z) {
            *o += g * (zi + pull * (m - zi));
        }
    }
    out
}

/// Posterior mean under the single component `class_index`.
pub fn denoiser_cond(
    mix: &GaussianMixture,
    class_index: usize,
    z: &[f64],
    sigma: f64,
) -> Result<Vec<f64>> {
    let mu = mix.means.get(class_index).ok_or(Error::ClassIndex {
        index: class_index,
        components: mix.components(),
    })?;
    mix.check_point(z);
    let pull = mix.pull(sigma);
    Ok(mu.iter().zip(z).map(|(m, zi)| zi + pull * (m - zi)).collect())
}

/// The full mixture as a denoiser; serves as the null-condition model.
#[derive(Debug, Clone, Copy)]
pub struct MixtureDenoiser<'a> {
    pub mixture: &'a GaussianMixture,
}

impl Denoiser for MixtureDenoiser<'_> {
    fn dim(&self) -> usize {
        self.mixture.dim()
    }

    fn denoise(&self, z: &[f64], sigma: f64) -> Vec<f64> {
        denoiser_uncond(self.mixture, z, sigma)
    }
}

/// One mixture component as a class-conditional denoiser.
#[derive(Debug, Clone, Copy)]
pub struct ComponentDenoiser<'a> {
    mixture: &'a GaussianMixture,
    class_index: usize,
}

impl<'a> ComponentDenoiser<'a> {
    pub fn new(mixture: &'a GaussianMixture, class_index: usize) -> Result<Self> {
        if class_index >= mixture.components() {
            return Err(Error::ClassIndex {
                index: class_index,
                components: mixture.components(),
            });
        }
        Ok(Self {
            mixture,
            class_index,
        })
    }
}

impl Denoiser for ComponentDenoiser<'_> {
    fn dim(&self) -> usize {
        self.mixture.dim()
    }

    fn denoise(&self, z: &[f64], sigma: f64) -> Vec<f64> {
        denoiser_cond(self.mixture, self.class_index, z, sigma).expect("class index checked")
    }
}
