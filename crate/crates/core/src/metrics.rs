//! Verification scores for ensemble forecasts: RMSE, CRPS, randomized PIT
//! and central-interval coverage.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::forecast::EnsembleForecast;
use crate::rng;

pub const DEFAULT_BINS: usize = 10;
pub const DEFAULT_LEVELS: [f64; 10] = [10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 95.0];

/// Root mean squared member error at one position, averaged over horizons and members.
pub fn rmse(ens: &EnsembleForecast, r: usize) -> f64 {
    let mut total = 0.0;
    for h in 0..ens.n_horizons() {
        let y = ens.observation(h, r);
        let sq: f64 = (0..ens.n_members)
            .map(|j| (ens.member(j, h, r) - y).powi(2))
            .sum();
        total += sq / ens.n_members as f64;
    }
    (total / ens.n_horizons() as f64).sqrt()
}

/// Ensemble CRPS `(1/J) Σ |x_j - y| - (1/(2J²)) Σ_j Σ_k |x_j - x_k|`.
pub fn crps(members: &[f64], y: f64) -> f64 {
    let j = members.len() as f64;
    let mut sorted = members.to_vec();
    sorted.sort_by(f64::total_cmp);
    let spread_to_obs: f64 = sorted.iter().map(|x| (x - y).abs()).sum::<f64>() / j;
    // Σ_j Σ_k |x_j - x_k| = 2 Σ_i (2i - J + 1) x_(i) over the sorted sample
    let pairwise: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * i as f64 - j + 1.0) * x)
        .sum();
    (spread_to_obs - pairwise / (j * j)).max(0.0)
}

/// Randomized PIT `(#{x < y} + u (1 + #{x = y})) / (J + 1)` for a given `u ∈ [0, 1]`.
pub fn pit_with(members: &[f64], y: f64, u: f64) -> f64 {
    let below = members.iter().filter(|&&x| x < y).count() as f64;
    let ties = members.iter().filter(|&&x| x == y).count() as f64;
    (below + u * (1.0 + ties)) / (members.len() as f64 + 1.0)
}

pub fn pit<R: Rng + ?Sized>(members: &[f64], y: f64, rng: &mut R) -> f64 {
    pit_with(members, y, rng.random::<f64>())
}

/// Counts of values in `bins` equal-width bins over `[0, 1]`; 1 falls in the last bin.
pub fn histogram(values: &[f64], bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    for v in values {
        let b = ((v * bins as f64).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
}

/// Chi-square goodness of fit of histogram counts against the uniform law.
/// Returns `(statistic, p-value)`.
pub fn chi_square_uniformity(counts: &[usize]) -> (f64, f64) {
    let n: usize = counts.iter().sum();
    let expected = n as f64 / counts.len() as f64;
    let stat: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).expect("at least two bins");
    (stat, dist.sf(stat))
}

/// Linear-interpolation sample quantile (R type 7) of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Central interval of the given level (percent) from sorted members.
pub fn central_interval(sorted: &[f64], level: f64) -> (f64, f64) {
    let q = level / 100.0;
    (
        quantile_sorted(sorted, (1.0 - q) / 2.0),
        quantile_sorted(sorted, (1.0 + q) / 2.0),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub level: f64,
    pub nominal: f64,
    pub empirical: f64,
}

/// Fraction of `(position, horizon)` observations inside each central interval.
pub fn coverage(ens: &EnsembleForecast, levels: &[f64]) -> Vec<CoverageRow> {
    let cells = sorted_cells(ens);
    levels
        .iter()
        .map(|&level| {
            let inside = cells
                .iter()
                .filter(|(sorted, y)| {
                    let (lo, hi) = central_interval(sorted, level);
                    lo <= *y && *y <= hi
                })
                .count();
            CoverageRow {
                level,
                nominal: level / 100.0,
                empirical: inside as f64 / cells.len() as f64,
            }
        })
        .collect()
}

fn sorted_cells(ens: &EnsembleForecast) -> Vec<(Vec<f64>, f64)> {
    let mut out = Vec::with_capacity(ens.n_positions() * ens.n_horizons());
    for r in 0..ens.n_positions() {
        for h in 0..ens.n_horizons() {
            let mut cell = ens.cell(h, r);
            cell.sort_by(f64::total_cmp);
            out.push((cell, ens.observation(h, r)));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub positions: Vec<usize>,
    pub n_members: usize,
    pub n_horizons: usize,
    pub rmse_per_position: Vec<f64>,
    pub rmse_mean: f64,
    /// Indexed `[r][h]`.
    pub crps: Vec<Vec<f64>>,
    /// Averaged over horizons, per position.
    pub crps_per_position: Vec<f64>,
    /// Averaged over horizons and positions.
    pub crps_mean: f64,
    /// Indexed `[r][h]`, flattened position-major.
    pub pit_values: Vec<f64>,
    pub pit_histogram: Vec<usize>,
    pub pit_chi_square: f64,
    pub pit_p_value: f64,
    pub coverage: Vec<CoverageRow>,
}

impl EvaluationReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        crate::io::read_json(path)
    }
}

/// Score an ensemble; PIT randomization uses the stream reserved for `seed`.
pub fn evaluate(
    ens: &EnsembleForecast,
    seed: u64,
    bins: usize,
    levels: &[f64],
) -> Result<EvaluationReport> {
    if ens.n_members == 0 || ens.n_positions() == 0 {
        return Err(Error::invalid("empty ensemble"));
    }
    if bins < 2 {
        return Err(Error::invalid("PIT histogram needs at least two bins"));
    }
    if ens.n_members < 2 && !levels.is_empty() {
        return Err(Error::invalid("coverage needs at least two members"));
    }
    let mut s = rng::stream(seed, &[rng::stage::PIT]);
    let n_r = ens.n_positions();
    let mut crps_table = Vec::with_capacity(n_r);
    let mut pits = Vec::with_capacity(n_r * ens.n_horizons());
    for r in 0..n_r {
        let mut row = Vec::with_capacity(ens.n_horizons());
        for h in 0..ens.n_horizons() {
            let cell = ens.cell(h, r);
            let y = ens.observation(h, r);
            row.push(crps(&cell, y));
            pits.push(pit(&cell, y, &mut s));
        }
        crps_table.push(row);
    }
    let rmse_per_position: Vec<f64> = (0..n_r).map(|r| rmse(ens, r)).collect();
    let crps_per_position: Vec<f64> = crps_table.iter().map(|row| mean(row)).collect();
    let pit_histogram = histogram(&pits, bins);
    let (pit_chi_square, pit_p_value) = chi_square_uniformity(&pit_histogram);
    Ok(EvaluationReport {
        positions: ens.positions.clone(),
        n_members: ens.n_members,
        n_horizons: ens.n_horizons(),
        rmse_mean: mean(&rmse_per_position),
        rmse_per_position,
        crps_mean: mean(&crps_per_position),
        crps: crps_table,
        crps_per_position,
        pit_values: pits,
        pit_histogram,
        pit_chi_square,
        pit_p_value,
        coverage: coverage(ens, levels),
    })
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Write plot-ready CSV tables: PIT bin counts, coverage, and per-horizon
/// quantile bands. Returns the written paths.
pub fn write_plot_data(
    ens: &EnsembleForecast,
    report: &EvaluationReport,
    dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    crate::io::create_dir(dir)?;
    let bins = report.pit_histogram.len();
    let mut pit_csv = String::from("bin_lower,bin_upper,count\n");
    for (b, c) in report.pit_histogram.iter().enumerate() {
        writeln!(
            pit_csv,
            "{},{},{}",
            b as f64 / bins as f64,
            (b + 1) as f64 / bins as f64,
            c
        )
        .unwrap();
    }
    let mut cov_csv = String::from("level,nominal,empirical\n");
    for row in &report.coverage {
        writeln!(cov_csv, "{},{},{}", row.level, row.nominal, row.empirical).unwrap();
    }
    let probs = [0.05, 0.25, 0.5, 0.75, 0.95];
    let mut band_csv = String::from("position,horizon,observation,q05,q25,q50,q75,q95\n");
    for r in 0..ens.n_positions() {
        for h in 0..ens.n_horizons() {
            let mut cell = ens.cell(h, r);
            cell.sort_by(f64::total_cmp);
            write!(
                band_csv,
                "{},{},{:?}",
                ens.positions[r],
                h,
                ens.observation(h, r)
            )
            .unwrap();
            for q in probs {
                write!(band_csv, ",{:?}", quantile_sorted(&cell, q)).unwrap();
            }
            band_csv.push('\n');
        }
    }
    let mut written = Vec::new();
    for (name, body) in [
        ("pit_histogram.csv", pit_csv),
        ("coverage.csv", cov_csv),
        ("quantile_bands.csv", band_csv),
    ] {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
