//! Cone embedding of a raster into input/target examples.
//!
//! For a target position `x*` and time `t`, the inputs are the raster values
//! at every grid point `(t - τ, x_s)` with `1 <= τ <= p` and
//! `|x* - x_s| <= c τ`, listed in lexicographic `(time, position)` order.
//! Targets are spaced `a` time steps apart; `a` is the smallest stride for
//! which the dependence decay `exp(-λ (a - p))` drops below `δ / (2 m ε)`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RasterSeries;

/// Number of validation examples per position.
pub const N_VALIDATION: usize = 1;

/// Smallest stride `a >= p + 1` satisfying the decay rule, with its training size `m`.
pub fn select_a(
    lambda: f64,
    p: usize,
    epsilon: f64,
    delta: f64,
    n_times: usize,
    n_test: usize,
) -> Result<(usize, usize)> {
    if !(lambda > 0.0 && epsilon > 0.0 && delta > 0.0 && delta < 1.0) || p == 0 {
        return Err(Error::Config(format!(
            "stride selection needs lambda > 0, epsilon > 0, 0 < delta < 1, p >= 1 \
             (lambda={lambda}, epsilon={epsilon}, delta={delta}, p={p})"
        )));
    }
    let a_max = n_times / (n_test + N_VALIDATION + 1);
    for a in (p + 1)..=a_max {
        let m = training_size(n_times, a, n_test);
        if m == 0 {
            continue;
        }
        let decay = (-lambda * (a - p) as f64).exp();
        if decay <= delta / (2.0 * m as f64 * epsilon) {
            return Ok((a, m));
        }
    }
    Err(Error::Config(format!(
        "series too short for dependence decay: no stride a <= {a_max} satisfies the rule \
         (N={n_times}, lambda={lambda})"
    )))
}

/// `floor(N / a) - n_test - n_val`, saturating at zero.
pub fn training_size(n_times: usize, a: usize, n_test: usize) -> usize {
    (n_times / a).saturating_sub(n_test + N_VALIDATION)
}

/// Half-width in grid columns of the cone row `τ` steps back.
fn half_width(c_grid: f64, tau: usize) -> usize {
    (c_grid * tau as f64).floor() as usize
}

/// Relative cone offsets `(-τ, dx)` in lexicographic order; `c_grid` is the
/// propagation speed in grid columns per time step.
pub fn template_offsets(c_grid: f64, p: usize) -> Vec<(i64, i64)> {
    let mut offsets = Vec::new();
    for tau in (1..=p).rev() {
        let w = half_width(c_grid, tau) as i64;
        for dx in -w..=w {
            offsets.push((-(tau as i64), dx));
        }
    }
    offsets
}

/// Cone index template at `x_star` as `(time offset, position index)` pairs.
pub fn build_index_template(
    x_star: usize,
    c_grid: f64,
    p: usize,
    n_positions: usize,
) -> Result<Vec<(i64, usize)>> {
    let reach = half_width(c_grid, p);
    if x_star < reach || x_star + reach >= n_positions {
        return Err(Error::invalid(format!(
            "cone exceeds raster; position excluded (x*={x_star}, reach={reach}, P={n_positions})"
        )));
    }
    Ok(template_offsets(c_grid, p)
        .into_iter()
        .map(|(dt, dx)| (dt, (x_star as i64 + dx) as usize))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingPlan {
    pub p: usize,
    /// Propagation speed in grid columns per time step.
    pub c: f64,
    pub lambda: f64,
    pub a: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub n_test: usize,
    pub n_val: usize,
    pub m: usize,
    pub input_dim: usize,
    pub n_times: usize,
    pub n_positions: usize,
    pub positions_used: Vec<usize>,
    /// False when `a` was forced and violates the decay rule.
    pub decay_rule_met: bool,
}

#[derive(Debug, Clone)]
pub struct PlanOptions {
    pub p: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub n_test: usize,
    pub force_a: Option<usize>,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            p: 1,
            epsilon: 3.0,
            delta: 0.025,
            n_test: 100,
            force_a: None,
        }
    }
}

impl EmbeddingPlan {
    /// Plan for an `n_times × n_positions` raster with speed `c_grid` (grid
    /// columns per step) and decay rate `lambda`.
    pub fn new(
        n_times: usize,
        n_positions: usize,
        c_grid: f64,
        lambda: f64,
        opts: &PlanOptions,
    ) -> Result<Self> {
        if !(c_grid > 0.0 && c_grid.is_finite()) {
            return Err(Error::Config(format!(
                "propagation speed must be > 0, got {c_grid}"
            )));
        }
        let p = opts.p;
        let (a, m) = match opts.force_a {
            None => select_a(lambda, p, opts.epsilon, opts.delta, n_times, opts.n_test)?,
            Some(a) => {
                if a < p + 1 {
                    return Err(Error::Config(format!(
                        "forced a={a} must be >= p + 1 = {}",
                        p + 1
                    )));
                }
                let m = training_size(n_times, a, opts.n_test);
                if m == 0 {
                    return Err(Error::Config(format!(
                        "forced a={a} leaves no training examples"
                    )));
                }
                (a, m)
            }
        };
        let decay_rule_met =
            (-lambda * (a - p) as f64).exp() <= opts.delta / (2.0 * m as f64 * opts.epsilon);
        let reach = half_width(c_grid, p);
        let positions_used: Vec<usize> = (0..n_positions)
            .filter(|&x| x >= reach && x + reach < n_positions)
            .collect();
        if positions_used.is_empty() {
            return Err(Error::Config(format!(
                "cone exceeds raster; no interior positions (reach {reach}, P={n_positions})"
            )));
        }
        Ok(Self {
            p,
            c: c_grid,
            lambda,
            a,
            epsilon: opts.epsilon,
            delta: opts.delta,
            n_test: opts.n_test,
            n_val: N_VALIDATION,
            m,
            input_dim: template_offsets(c_grid, p).len(),
            n_times,
            n_positions,
            positions_used,
            decay_rule_met,
        })
    }

    /// Total number of examples `floor(N / a)`.
    pub fn n_examples(&self) -> usize {
        self.n_times / self.a
    }

    /// Example index of the validation example (1-based).
    pub fn validation_index(&self) -> usize {
        self.m + 1
    }

    pub fn first_test_index(&self) -> usize {
        self.m + 2
    }

    /// Raster row of the target of example `i` (1-based): time `t0 + i a`.
    pub fn target_row(&self, i: usize) -> usize {
        i * self.a - 1
    }

    pub fn offsets(&self) -> Vec<(i64, i64)> {
        template_offsets(self.c, self.p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        crate::io::read_json(path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Validation,
    Test,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Validation => "validation",
            Role::Test => "test",
        }
    }
}

/// Examples for one position and role; `inputs` is row-major `len × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub position: usize,
    pub role: Role,
    pub dim: usize,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    /// 1-based example indices `i` (target time `t0 + i a`).
    pub indices: Vec<usize>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn input(&self, row: usize) -> &[f64] {
        &self.inputs[row * self.dim..(row + 1) * self.dim]
    }

    /// Row holding example index `i`, if present.
    pub fn row_of_index(&self, i: usize) -> Option<usize> {
        let first = *self.indices.first()?;
        let row = i.checked_sub(first)?;
        (row < self.len() && self.indices[row] == i).then_some(row)
    }

    pub fn file_name(position: usize, role: Role) -> String {
        format!("pos{position}_{}.csv", role.as_str())
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        out.push('i');
        for k in 1..=self.dim {
            write!(out, ",x{k}").unwrap();
        }
        out.push_str(",y\n");
        for row in 0..self.len() {
            write!(out, "{}", self.indices[row]).unwrap();
            for v in self.input(row) {
                write!(out, ",{v:?}").unwrap();
            }
            writeln!(out, ",{:?}", self.targets[row]).unwrap();
        }
        out
    }

    pub fn save_in(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let path = dir.as_ref().join(Self::file_name(self.position, self.role));
        fs::write(&path, self.to_csv_string()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load_from(dir: impl AsRef<Path>, position: usize, role: Role) -> Result<Self> {
        let path = dir.as_ref().join(Self::file_name(position, role));
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let perr = |line: usize, message: String| Error::Parse {
            path: path.clone(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| perr(1, "empty feature file".into()))?;
        let cols = header.split(',').count();
        if cols < 3 {
            return Err(perr(1, "malformed header".into()));
        }
        let dim = cols - 2;
        let mut set = FeatureSet {
            position,
            role,
            dim,
            inputs: Vec::new(),
            targets: Vec::new(),
            indices: Vec::new(),
        };
        for (n, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != cols {
                return Err(perr(n + 1, format!("ragged row: expected {cols} cells")));
            }
            set.indices.push(
                cells[0]
                    .parse()
                    .map_err(|_| perr(n + 1, "bad example index".into()))?,
            );
            for cell in &cells[1..cols - 1] {
                set.inputs.push(
                    cell.parse()
                        .map_err(|_| perr(n + 1, format!("non-numeric cell `{cell}`")))?,
                );
            }
            set.targets.push(
                cells[cols - 1]
                    .parse()
                    .map_err(|_| perr(n + 1, "non-numeric target".into()))?,
            );
        }
        Ok(set)
    }
}

/// The three chronological splits of one position.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionFeatures {
    pub train: FeatureSet,
    pub validation: FeatureSet,
    pub test: FeatureSet,
}

impl PositionFeatures {
    pub fn position(&self) -> usize {
        self.train.position
    }

    /// Input and target of example `i`, searching all splits.
    pub fn example(&self, i: usize) -> Option<(&[f64], f64)> {
        [&self.train, &self.validation, &self.test]
            .into_iter()
            .find_map(|set| {
                set.row_of_index(i)
                    .map(|row| (set.input(row), set.targets[row]))
            })
    }

    pub fn save_in(&self, dir: impl AsRef<Path>) -> Result<()> {
        for set in [&self.train, &self.validation, &self.test] {
            set.save_in(dir.as_ref())?;
        }
        Ok(())
    }

    pub fn load_from(dir: impl AsRef<Path>, position: usize) -> Result<Self> {
        Ok(Self {
            train: FeatureSet::load_from(dir.as_ref(), position, Role::Train)?,
            validation: FeatureSet::load_from(dir.as_ref(), position, Role::Validation)?,
            test: FeatureSet::load_from(dir.as_ref(), position, Role::Test)?,
        })
    }
}

/// Materialize the train/validation/test examples of position `x_star`.
pub fn extract_features(
    r: &RasterSeries,
    plan: &EmbeddingPlan,
    x_star: usize,
) -> Result<PositionFeatures> {
    if r.n_times() != plan.n_times || r.n_positions() != plan.n_positions {
        return Err(Error::invalid(format!(
            "plan built for a {}x{} raster, got {}x{}",
            plan.n_times,
            plan.n_positions,
            r.n_times(),
            r.n_positions()
        )));
    }
    let template = build_index_template(x_star, plan.c, plan.p, plan.n_positions)?;
    let dim = template.len();
    let empty = |role| FeatureSet {
        position: x_star,
        role,
        dim,
        inputs: Vec::new(),
        targets: Vec::new(),
        indices: Vec::new(),
    };
    let mut out = PositionFeatures {
        train: empty(Role::Train),
        validation: empty(Role::Validation),
        test: empty(Role::Test),
    };
    for i in 1..=plan.n_examples() {
        let target_row = plan.target_row(i);
        let set = if i <= plan.m {
            &mut out.train
        } else if i <= plan.m + plan.n_val {
            &mut out.validation
        } else {
            &mut out.test
        };
        for &(dt, col) in &template {
            let row = target_row as i64 + dt;
            assert!(row >= 0, "input row before raster start");
            set.inputs.push(r.get(row as usize, col));
        }
        set.targets.push(r.get(target_row, x_star));
        set.indices.push(i);
    }
    Ok(out)
}
