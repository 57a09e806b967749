//! Homogeneous zero-mean Lévy bases and cell sampling.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Law of the basis value assigned to a unit-area cell. Parameters scale
/// linearly with cell area; the drift is fixed so that every cell has mean 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LevyBasisSpec {
    Gaussian {
        sigma2: f64,
    },
    /// Normal inverse Gaussian with tail `alpha`, skew `beta` and scale rate `delta`.
    Nig {
        alpha: f64,
        beta: f64,
        delta: f64,
    },
}

impl Default for LevyBasisSpec {
    fn default() -> Self {
        LevyBasisSpec::Gaussian { sigma2: 1.0 }
    }
}

impl LevyBasisSpec {
    pub fn gaussian(sigma2: f64) -> Result<Self> {
        let spec = LevyBasisSpec::Gaussian { sigma2 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn nig(alpha: f64, beta: f64, delta: f64) -> Result<Self> {
        let spec = LevyBasisSpec::Nig { alpha, beta, delta };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LevyBasisSpec::Gaussian { sigma2 } => {
                if !(sigma2 > 0.0 && sigma2.is_finite()) {
                    return Err(Error::Config(format!(
                        "levy.sigma2 must be > 0, got {sigma2}"
                    )));
                }
            }
            LevyBasisSpec::Nig { alpha, beta, delta } => {
                if !(alpha.is_finite() && beta.is_finite() && alpha > beta.abs()) {
                    return Err(Error::Config(format!(
                        "levy.alpha must exceed |levy.beta| (alpha={alpha}, beta={beta})"
                    )));
                }
                if !(delta > 0.0 && delta.is_finite()) {
                    return Err(Error::Config(format!(
                        "levy.delta must be > 0, got {delta}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// `sqrt(alpha^2 - beta^2)` for the NIG family.
    pub fn gamma_nig(&self) -> Option<f64> {
        match *self {
            LevyBasisSpec::Nig { alpha, beta, .. } => Some((alpha * alpha - beta * beta).sqrt()),
            LevyBasisSpec::Gaussian { .. } => None,
        }
    }

    /// Location per unit area forced by the zero-mean condition.
    pub fn location_rate(&self) -> f64 {
        match *self {
            LevyBasisSpec::Gaussian { .. } => 0.0,
            LevyBasisSpec::Nig { beta, delta, .. } => -delta * beta / self.gamma_nig().unwrap(),
        }
    }

    /// Always zero by construction.
    pub fn mean_rate(&self) -> f64 {
        match *self {
            LevyBasisSpec::Gaussian { .. } => 0.0,
            LevyBasisSpec::Nig { beta, delta, .. } => {
                // location + beta * E[z] with E[z] = delta / gamma
                self.location_rate() + delta * beta / self.gamma_nig().unwrap()
            }
        }
    }

    /// Variance of the basis value of a unit-area cell.
    pub fn variance_rate(&self) -> f64 {
        match *self {
            LevyBasisSpec::Gaussian { sigma2 } => sigma2,
            LevyBasisSpec::Nig { alpha, delta, .. } => {
                let g = self.gamma_nig().unwrap();
                delta * alpha * alpha / (g * g * g)
            }
        }
    }

    /// Draw the basis value of a cell with the given area.
    pub fn sample_cell<R: Rng + ?Sized>(&self, area: f64, rng: &mut R) -> Result<f64> {
        if !(area > 0.0 && area.is_finite()) {
            return Err(Error::invalid(format!(
                "cell area must be positive, got {area}"
            )));
        }
        Ok(self.sample_cell_unchecked(area, rng))
    }

    #[inline]
    pub(crate) fn sample_cell_unchecked<R: Rng + ?Sized>(&self, area: f64, rng: &mut R) -> f64 {
        match *self {
            LevyBasisSpec::Gaussian { sigma2 } => {
                let z: f64 = StandardNormal.sample(rng);
                (sigma2 * area).sqrt() * z
            }
            LevyBasisSpec::Nig { beta, delta, .. } => {
                let g = self.gamma_nig().unwrap();
                let delta_b = delta * area;
                let mu_b = self.location_rate() * area;
                let z = inverse_gaussian(delta_b / g, delta_b * delta_b, rng);
                let n: f64 = StandardNormal.sample(rng);
                mu_b + beta * z + z.sqrt() * n
            }
        }
    }
}

/// Inverse Gaussian variate with the given mean and shape, drawn with the
/// Michael–Schucany–Haas transformation (one normal, one uniform).
pub fn inverse_gaussian<R: Rng + ?Sized>(mean: f64, shape: f64, rng: &mut R) -> f64 {
    let nu: f64 = StandardNormal.sample(rng);
    let y = nu * nu;
    let my = mean * y;
    let x = mean + mean * my / (2.0 * shape)
        - mean / (2.0 * shape) * (4.0 * mean * shape * y + my * my).sqrt();
    let u: f64 = rng.random();
    if u <= mean / (mean + x) {
        x
    } else {
        mean * mean / x
    }
}
