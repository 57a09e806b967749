//! Zero-mean spatio-temporal Ornstein–Uhlenbeck field simulation.
//!
//! The field at `(t, x)` is the integral of `exp(-A (t - s))` against a Lévy
//! basis over the past cone `|x - ξ| <= c (t - s)`. The basis is realised on a
//! fine grid (`refine` sub-cells per raster cell along each axis, one draw per
//! cell shared by all targets), and each raster value is the kernel-weighted
//! sum over the fine cells whose centres fall inside the cone truncated at
//! `T` sub-steps, where `exp(-A T dt_sub) <= trunc_tol`.
//!
//! Rows are produced by streaming over fine time rows and keeping only the
//! last `T` of them. Every target on the raster sees the same stencil, so each
//! cone row reduces to a prefix-sum difference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::levy::LevyBasisSpec;
use crate::raster::RasterSeries;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StouModel {
    /// Mean-reversion rate `A` (1/time).
    pub mean_reversion: f64,
    /// Speed of information propagation `c` (space/time).
    pub speed: f64,
    pub basis: LevyBasisSpec,
}

impl StouModel {
    pub fn new(mean_reversion: f64, speed: f64, basis: LevyBasisSpec) -> Result<Self> {
        let model = Self {
            mean_reversion,
            speed,
            basis,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mean_reversion > 0.0 && self.mean_reversion.is_finite()) {
            return Err(Error::Config(format!(
                "A must be > 0, got {}",
                self.mean_reversion
            )));
        }
        if !(self.speed > 0.0 && self.speed.is_finite()) {
            return Err(Error::Config(format!("c must be > 0, got {}", self.speed)));
        }
        self.basis.validate()
    }

    /// Stationary variance `Var(Λ') c / (2 A²)`.
    pub fn theoretical_variance(&self) -> f64 {
        theoretical_variance(self)
    }

    /// Normalized temporal variogram `2 (1 - exp(-A s))`.
    pub fn temporal_variogram(&self, lag: f64) -> f64 {
        2.0 * (1.0 - (-self.mean_reversion * lag).exp())
    }

    /// Normalized spatial variogram `2 (1 - exp(-A u / c))`.
    pub fn spatial_variogram(&self, lag: f64) -> f64 {
        2.0 * (1.0 - (-self.mean_reversion * lag / self.speed).exp())
    }
}

pub fn theoretical_variance(model: &StouModel) -> f64 {
    let a = model.mean_reversion;
    model.basis.variance_rate() * model.speed / (2.0 * a * a)
}

/// How the kernel weights of the fine cells are scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelScaling {
    /// Raw `exp(-A (t - s_center))` weights.
    Center,
    /// Center weights times one constant chosen so the discrete stationary
    /// variance equals the continuum value. Normalized variograms are unchanged.
    #[default]
    VarianceMatched,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimGrid {
    pub n_times: usize,
    pub n_positions: usize,
    /// Raster time step `h_t`.
    pub dt: f64,
    /// Raster grid spacing.
    pub dx: f64,
    pub refine: usize,
    pub trunc_tol: f64,
    pub seed: u64,
    #[serde(default)]
    pub scaling: KernelScaling,
    /// Upper bound on the sliding window size (`T × fine width` cells).
    #[serde(default = "default_window_limit")]
    pub max_window_cells: usize,
}

fn default_window_limit() -> usize {
    64 * 1024 * 1024
}

impl SimGrid {
    pub fn new(n_times: usize, n_positions: usize, seed: u64) -> Self {
        Self {
            n_times,
            n_positions,
            dt: 1.0,
            dx: 1.0,
            refine: 4,
            trunc_tol: 1e-6,
            seed,
            scaling: KernelScaling::default(),
            max_window_cells: default_window_limit(),
        }
    }

    pub fn with_refine(mut self, refine: usize) -> Self {
        self.refine = refine;
        self
    }

    pub fn with_scaling(mut self, scaling: KernelScaling) -> Self {
        self.scaling = scaling;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_times == 0 || self.n_positions == 0 {
            return Err(Error::Config("N and P must be positive".into()));
        }
        if self.refine == 0 {
            return Err(Error::Config("refine must be >= 1".into()));
        }
        if !(self.trunc_tol > 0.0 && self.trunc_tol < 1.0) {
            return Err(Error::Config(format!(
                "tol must lie in (0,1), got {}",
                self.trunc_tol
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite() && self.dx > 0.0 && self.dx.is_finite()) {
            return Err(Error::Config("dt and dx must be positive".into()));
        }
        Ok(())
    }

    pub fn dt_sub(&self) -> f64 {
        self.dt / self.refine as f64
    }

    pub fn dx_sub(&self) -> f64 {
        self.dx / self.refine as f64
    }

    /// Truncation depth `T` in fine time steps.
    pub fn truncation_depth(&self, model: &StouModel) -> usize {
        ((1.0 / self.trunc_tol).ln() / (model.mean_reversion * self.dt_sub())).ceil() as usize
    }
}

/// Translation-invariant cone stencil shared by every raster target.
#[derive(Debug, Clone)]
pub struct Stencil {
    /// Kernel weight of fine row `k` (centre `k + 1/2` sub-steps back).
    pub weights: Vec<f64>,
    /// Inclusive fine-column offsets of row `k`, relative to the first fine
    /// column of the target's raster cell.
    pub spans: Vec<(i64, i64)>,
    /// Fine columns added on each side of the raster.
    pub margin: usize,
    pub cell_area: f64,
}

impl Stencil {
    pub fn build(model: &StouModel, grid: &SimGrid) -> Self {
        let depth = grid.truncation_depth(model);
        let h = grid.dt_sub();
        let dxs = grid.dx_sub();
        // target column sits at offset (refine - 1) / 2 within its raster cell
        let centre = (grid.refine as f64 - 1.0) / 2.0;
        let mut weights = Vec::with_capacity(depth);
        let mut spans = Vec::with_capacity(depth);
        for k in 0..depth {
            let lag = (k as f64 + 0.5) * h;
            let half = model.speed * lag / dxs * (1.0 + 1e-12);
            weights.push((-model.mean_reversion * lag).exp());
            spans.push((
                (centre - half).ceil() as i64,
                (centre + half).floor() as i64,
            ));
        }
        let margin = spans.iter().map(|&(lo, _)| (-lo).max(0)).max().unwrap_or(0) as usize;
        Self {
            weights,
            spans,
            margin,
            cell_area: h * dxs,
        }
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    /// Stationary variance of the discretized field with raw centre weights.
    pub fn discrete_variance(&self, basis: &LevyBasisSpec) -> f64 {
        let sum: f64 = self
            .weights
            .iter()
            .zip(&self.spans)
            .map(|(w, &(lo, hi))| w * w * (hi - lo + 1) as f64)
            .sum();
        basis.variance_rate() * self.cell_area * sum
    }
}

/// Simulate an `N × P` zero-mean STOU raster.
pub fn simulate(model: &StouModel, grid: &SimGrid) -> Result<RasterSeries> {
    model.validate()?;
    grid.validate()?;
    let stencil = Stencil::build(model, grid);
    let depth = stencil.depth();
    let refine = grid.refine;
    let width = grid.n_positions * refine + 2 * stencil.margin;
    let window = depth.saturating_mul(width + 1);
    if window > grid.max_window_cells {
        return Err(Error::Config(format!(
            "simulation window of {depth} x {width} fine cells exceeds the limit of {} cells; \
             raise the tolerance or lower refine",
            grid.max_window_cells
        )));
    }

    let scale = match grid.scaling {
        KernelScaling::Center => 1.0,
        KernelScaling::VarianceMatched => {
            (theoretical_variance(model) / stencil.discrete_variance(&model.basis)).sqrt()
        }
    };
    let weights: Vec<f64> = stencil.weights.iter().map(|w| w * scale).collect();

    let mut stream = rng::stream(grid.seed, &[rng::stage::SIMULATE]);
    let area = stencil.cell_area;
    // ring buffer of row prefix sums: prefix[j] = sum of the first j cells
    let mut ring = vec![0.0f64; depth * (width + 1)];
    let mut out = Vec::with_capacity(grid.n_times * grid.n_positions);
    let total_rows = depth + (grid.n_times - 1) * refine;
    let mut next_target = depth - 1;
    for g in 0..total_rows {
        let slot = g % depth;
        let row = &mut ring[slot * (width + 1)..(slot + 1) * (width + 1)];
        let mut acc = 0.0;
        row[0] = 0.0;
        for j in 0..width {
            acc += model.basis.sample_cell_unchecked(area, &mut stream);
            row[j + 1] = acc;
        }
        if g != next_target {
            continue;
        }
        next_target += refine;
        for p in 0..grid.n_positions {
            let base = (stencil.margin + p * refine) as i64;
            let mut z = 0.0;
            for (k, (&w, &(lo, hi))) in weights.iter().zip(&stencil.spans).enumerate() {
                let slot = (g - k) % depth;
                let prefix = &ring[slot * (width + 1)..(slot + 1) * (width + 1)];
                let a = (base + lo) as usize;
                let b = (base + hi) as usize + 1;
                z += w * (prefix[b] - prefix[a]);
            }
            out.push(z);
        }
    }
    debug_assert_eq!(out.len(), grid.n_times * grid.n_positions);

    let positions = (0..grid.n_positions).map(|p| p as f64 * grid.dx).collect();
    RasterSeries::new(out, grid.n_times, positions, 0.0, grid.dt, "stou")
}
