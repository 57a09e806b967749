//! Moment estimation of `A`, `c` and the dependence decay rate `λ` from the
//! normalized temporal and spatial variograms of a zero-mean raster.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RasterSeries;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatedParams {
    #[serde(rename = "A_star")]
    pub a_star: f64,
    pub c_star: f64,
    pub lambda_star: f64,
    pub k2_hat: f64,
    /// Temporal lag (time units).
    pub tau: f64,
    /// Spatial lag (space units).
    pub u: f64,
}

impl EstimatedParams {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        crate::io::read_json(path)
    }
}

/// `(1 / (N P - 1)) Σ Z²`; the raster is assumed to be centred already.
pub fn empirical_variance(r: &RasterSeries) -> Result<f64> {
    let count = r.values().len();
    if count < 2 {
        return Err(Error::invalid(
            "need at least two observations for a variance",
        ));
    }
    let k2 = r.values().iter().map(|v| v * v).sum::<f64>() / (count - 1) as f64;
    if k2 <= 0.0 {
        return Err(Error::Numeric(
            "zero variance: raster is identically zero".into(),
        ));
    }
    Ok(k2)
}

/// Normalized temporal variogram at a lag of `lag` rows.
pub fn temporal_variogram(r: &RasterSeries, lag: usize) -> Result<f64> {
    temporal_variogram_with(r, lag, empirical_variance(r)?)
}

pub fn temporal_variogram_with(r: &RasterSeries, lag: usize, k2_hat: f64) -> Result<f64> {
    let n = r.n_times();
    if lag == 0 || lag >= n {
        return Err(Error::invalid(format!(
            "temporal lag {lag} must lie in 1..{n}"
        )));
    }
    check_k2(k2_hat)?;
    let p = r.n_positions();
    let vals = r.values();
    let sum: f64 = vals[lag * p..]
        .iter()
        .zip(&vals[..(n - lag) * p])
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / ((n - lag) * p) as f64 / k2_hat)
}

/// Normalized spatial variogram at a lag of `lag` grid columns.
pub fn spatial_variogram(r: &RasterSeries, lag: usize) -> Result<f64> {
    spatial_variogram_with(r, lag, empirical_variance(r)?)
}

pub fn spatial_variogram_with(r: &RasterSeries, lag: usize, k2_hat: f64) -> Result<f64> {
    let p = r.n_positions();
    if lag == 0 || lag >= p {
        return Err(Error::invalid(format!(
            "spatial lag {lag} must lie in 1..{p}"
        )));
    }
    check_k2(k2_hat)?;
    let mut sum = 0.0;
    for i in 0..r.n_times() {
        let row = r.row(i);
        sum += row[lag..]
            .iter()
            .zip(&row[..p - lag])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(sum / (r.n_times() * (p - lag)) as f64 / k2_hat)
}

fn check_k2(k2_hat: f64) -> Result<()> {
    if k2_hat > 0.0 && k2_hat.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(
            "zero variance: variogram normalization undefined".into(),
        ))
    }
}

/// Plug-in decay rate `λ = A min(2, c) / (2 c)`.
pub fn plug_in_lambda(a: f64, c: f64) -> f64 {
    a * c.min(2.0) / (2.0 * c)
}

/// Invert variogram values at lags `tau` (time) and `u` (space) into `(A, c, λ)`.
pub fn params_from_variograms(
    gamma_t: f64,
    gamma_s: f64,
    tau: f64,
    u: f64,
) -> Result<(f64, f64, f64)> {
    for (name, g) in [("temporal", gamma_t), ("spatial", gamma_s)] {
        if !(g > 0.0 && g < 2.0) {
            return Err(Error::Numeric(format!(
                "variogram saturation: {name} variogram {g} outside (0, 2); increase data or decrease lag"
            )));
        }
    }
    let a = -(1.0 - gamma_t / 2.0).ln() / tau;
    let c = -a * u / (1.0 - gamma_s / 2.0).ln();
    Ok((a, c, plug_in_lambda(a, c)))
}

/// Estimate `A*`, `c*`, `λ*` from a raster at lags of `tau` rows and `u` columns.
pub fn estimate_params(r: &RasterSeries, tau: usize, u: usize) -> Result<EstimatedParams> {
    let k2_hat = empirical_variance(r)?;
    let gamma_t = temporal_variogram_with(r, tau, k2_hat)?;
    let gamma_s = spatial_variogram_with(r, u, k2_hat)?;
    let tau_time = tau as f64 * r.h_t;
    let u_space = u as f64 * r.dx();
    let (a_star, c_star, lambda_star) =
        params_from_variograms(gamma_t, gamma_s, tau_time, u_space)?;
    Ok(EstimatedParams {
        a_star,
        c_star,
        lambda_star,
        k2_hat,
        tau: tau_time,
        u: u_space,
    })
}
