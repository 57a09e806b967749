//! Ensemble forecasts from trained posteriors and the causal footprint of a
//! cone embedding.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::embedding::{EmbeddingPlan, PositionFeatures};
use crate::error::{Error, Result};
use crate::network::{Architecture, GaussianPosterior, Workspace};
use crate::rng;

/// Trained posterior of one spatial position.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionModel {
    pub arch: Architecture,
    pub rho: GaussianPosterior,
}

/// Where a forecast trajectory sits in the embedded series.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastOrigin {
    pub start: usize,
    pub a: usize,
    /// Time stamp of each horizon `t0 + (start + h) a h_t`.
    pub times: Vec<f64>,
}

/// `J` members over horizons `0..=H` for `R` positions.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleForecast {
    pub positions: Vec<usize>,
    pub n_members: usize,
    pub horizon: usize,
    /// Indexed `[j][h][r]`, row-major.
    pub members: Vec<f64>,
    /// Indexed `[h][r]`.
    pub observations: Vec<f64>,
    pub origin: Option<ForecastOrigin>,
}

impl EnsembleForecast {
    pub fn n_horizons(&self) -> usize {
        self.horizon + 1
    }

    pub fn n_positions(&self) -> usize {
        self.positions.len()
    }

    pub fn member(&self, j: usize, h: usize, r: usize) -> f64 {
        self.members[(j * self.n_horizons() + h) * self.n_positions() + r]
    }

    pub fn observation(&self, h: usize, r: usize) -> f64 {
        self.observations[h * self.n_positions() + r]
    }

    /// All members at one `(horizon, position)` cell.
    pub fn cell(&self, h: usize, r: usize) -> Vec<f64> {
        (0..self.n_members).map(|j| self.member(j, h, r)).collect()
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("position,horizon,member,value,observation\n");
        for r in 0..self.n_positions() {
            for h in 0..self.n_horizons() {
                for j in 0..self.n_members {
                    writeln!(
                        out,
                        "{},{},{},{:?},{:?}",
                        self.positions[r],
                        h,
                        j,
                        self.member(j, h, r),
                        self.observation(h, r)
                    )
                    .unwrap();
                }
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_ensemble(&text, path)
    }
}

fn parse_ensemble(text: &str, path: &Path) -> Result<EnsembleForecast> {
    let bad = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "position,horizon,member,value,observation" => {}
        _ => return Err(bad(1, "malformed header".into())),
    }
    let mut rows = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 5 {
            return Err(bad(n + 1, "ragged row".into()));
        }
        let int = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| bad(n + 1, format!("bad index `{s}`")))
        };
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| bad(n + 1, format!("non-numeric cell `{s}`")))
        };
        rows.push((
            int(cells[0])?,
            int(cells[1])?,
            int(cells[2])?,
            num(cells[3])?,
            num(cells[4])?,
        ));
    }
    if rows.is_empty() {
        return Err(bad(2, "no ensemble rows".into()));
    }
    let mut positions: Vec<usize> = rows.iter().map(|r| r.0).collect();
    positions.sort_unstable();
    positions.dedup();
    let n_h = rows.iter().map(|r| r.1).max().unwrap() + 1;
    let n_j = rows.iter().map(|r| r.2).max().unwrap() + 1;
    let n_r = positions.len();
    if rows.len() != n_r * n_h * n_j {
        return Err(bad(
            0,
            format!(
                "expected {} rows for a full ensemble, got {}",
                n_r * n_h * n_j,
                rows.len()
            ),
        ));
    }
    let mut members = vec![f64::NAN; n_j * n_h * n_r];
    let mut observations = vec![f64::NAN; n_h * n_r];
    for (pos, h, j, value, obs) in rows {
        let r = positions.binary_search(&pos).unwrap();
        members[(j * n_h + h) * n_r + r] = value;
        observations[h * n_r + r] = obs;
    }
    if members.iter().any(|v| v.is_nan()) {
        return Err(bad(0, "duplicate or missing ensemble rows".into()));
    }
    Ok(EnsembleForecast {
        positions,
        n_members: n_j,
        horizon: n_h - 1,
        members,
        observations,
        origin: None,
    })
}

/// Draw `members` parameter vectors per position (each reused over every
/// horizon) and evaluate them on the observed inputs `X_start ..= X_start+H`.
pub fn generate_ensemble(
    models: &[PositionModel],
    features: &[PositionFeatures],
    start: usize,
    horizon: usize,
    members: usize,
    seed: u64,
) -> Result<EnsembleForecast> {
    if models.len() != features.len() || models.is_empty() {
        return Err(Error::invalid(format!(
            "{} posteriors for {} feature sets",
            models.len(),
            features.len()
        )));
    }
    if members < 2 {
        return Err(Error::invalid("an ensemble needs at least two members"));
    }
    for (model, feats) in models.iter().zip(features) {
        if model.arch.input_dim != feats.train.dim || model.rho.dim() != model.arch.param_count() {
            return Err(Error::invalid(format!(
                "posterior/feature architecture mismatch at position {}",
                feats.position()
            )));
        }
        for h in 0..=horizon {
            if feats.example(start + h).is_none() {
                return Err(Error::invalid(format!(
                    "horizon out of range: example {} does not exist at position {}",
                    start + h,
                    feats.position()
                )));
            }
        }
    }
    let n_h = horizon + 1;
    let per_position: Vec<(Vec<f64>, Vec<f64>)> = models
        .par_iter()
        .zip(features)
        .map(|(model, feats)| {
            let mut s = rng::stream(seed, &[rng::stage::FORECAST, feats.position() as u64]);
            let mut ws = Workspace::new(&model.arch);
            let obs: Vec<f64> = (0..n_h)
                .map(|h| feats.example(start + h).unwrap().1)
                .collect();
            let mut vals = Vec::with_capacity(members * n_h);
            for _ in 0..members {
                let (theta, _) = model.rho.sample_theta(&mut s);
                for h in 0..n_h {
                    vals.push(ws.forward(&theta, feats.example(start + h).unwrap().0));
                }
            }
            (vals, obs)
        })
        .collect();
    let n_r = models.len();
    let mut out_members = vec![0.0; members * n_h * n_r];
    let mut observations = vec![0.0; n_h * n_r];
    for (r, (vals, obs)) in per_position.iter().enumerate() {
        for j in 0..members {
            for h in 0..n_h {
                out_members[(j * n_h + h) * n_r + r] = vals[j * n_h + h];
            }
        }
        for h in 0..n_h {
            observations[h * n_r + r] = obs[h];
        }
    }
    Ok(EnsembleForecast {
        positions: features.iter().map(PositionFeatures::position).collect(),
        n_members: members,
        horizon,
        members: out_members,
        observations,
        origin: None,
    })
}

/// Intersection of the future cones of every input coordinate of `X_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Footprint {
    /// Input grid points `(row, column)`.
    pub inputs: Vec<(usize, usize)>,
    /// Forecast target `(row, column)`.
    pub target: (usize, usize),
    /// Speed in columns per row.
    pub c: f64,
    /// Footprint grid points from the latest input row up to the row before
    /// the next target, clipped to the raster.
    pub points: Vec<(usize, usize)>,
}

impl Footprint {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        in_all_future_cones(&self.inputs, self.c, row, col)
    }
}

fn in_all_future_cones(inputs: &[(usize, usize)], c: f64, row: usize, col: usize) -> bool {
    inputs.iter().all(|&(r, x)| {
        row >= r && (col as f64 - x as f64).abs() <= c * (row - r) as f64 * (1.0 + 1e-12)
    })
}

/// Causal footprint of example `i` at position `x_star`.
pub fn causal_footprint(i: usize, plan: &EmbeddingPlan, x_star: usize) -> Result<Footprint> {
    if i == 0 || i > plan.n_examples() {
        return Err(Error::invalid(format!(
            "example index {i} outside 1..={}",
            plan.n_examples()
        )));
    }
    let target_row = plan.target_row(i);
    let inputs: Vec<(usize, usize)> =
        crate::embedding::build_index_template(x_star, plan.c, plan.p, plan.n_positions)?
            .into_iter()
            .map(|(dt, col)| ((target_row as i64 + dt) as usize, col))
            .collect();
    let first = inputs.iter().map(|p| p.0).max().unwrap();
    let last = (target_row + plan.a - 1).min(plan.n_times - 1);
    let mut points = Vec::new();
    for row in first..=last {
        for col in 0..plan.n_positions {
            if in_all_future_cones(&inputs, plan.c, row, col) {
                points.push((row, col));
            }
        }
    }
    let footprint = Footprint {
        inputs,
        target: (target_row, x_star),
        c: plan.c,
        points,
    };
    assert!(
        footprint.contains(target_row, x_star),
        "forecast target outside the causal footprint"
    );
    Ok(footprint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{extract_features, PlanOptions};
    use crate::raster::RasterSeries;
    use rand_distr::{Distribution, StandardNormal};

    fn small_problem(seed: u64) -> (EmbeddingPlan, Vec<PositionFeatures>) {
        let (n, p) = (200, 5);
        let mut s = rng::stream(seed, &[]);
        let vals: Vec<f64> = (0..n * p).map(|_| StandardNormal.sample(&mut s)).collect();
        let r = RasterSeries::from_rows(vals, n, p).unwrap();
        let opts = PlanOptions {
            n_test: 10,
            force_a: Some(4),
            ..PlanOptions::default()
        };
        let plan = EmbeddingPlan::new(n, p, 1.0, 1.0, &opts).unwrap();
        let feats = plan
            .positions_used
            .iter()
            .map(|&x| extract_features(&r, &plan, x).unwrap())
            .collect();
        (plan, feats)
    }

    fn models(feats: &[PositionFeatures], raw: f64) -> Vec<PositionModel> {
        feats
            .iter()
            .enumerate()
            .map(|(k, f)| {
                let arch = Architecture::new(f.train.dim, vec![4]);
                let d = arch.param_count();
                let mut s = rng::stream(k as u64, &[42]);
                PositionModel {
                    rho: GaussianPosterior {
                        mu: (0..d).map(|_| StandardNormal.sample(&mut s)).collect(),
                        raw_kappa: vec![raw; d],
                    },
                    arch,
                }
            })
            .collect()
    }

    #[test]
    fn degenerate_posterior_gives_identical_members() {
        let (plan, feats) = small_problem(1);
        let ens = generate_ensemble(
            &models(&feats, -80.0),
            &feats,
            plan.first_test_index(),
            3,
            5,
            9,
        )
        .unwrap();
        for r in 0..ens.n_positions() {
            for h in 0..=3 {
                let cell = ens.cell(h, r);
                assert!(cell.iter().all(|v| *v == cell[0]));
            }
        }
    }

    #[test]
    fn members_equal_direct_forward_evaluations() {
        let (plan, feats) = small_problem(2);
        let ms = models(&feats[..1], -0.5);
        let start = plan.first_test_index();
        let ens = generate_ensemble(&ms, &feats[..1], start, 0, 2, 5).unwrap();
        let mut s = rng::stream(5, &[rng::stage::FORECAST, feats[0].position() as u64]);
        let (x, y) = feats[0].example(start).unwrap();
        for j in 0..2 {
            let (theta, _) = ms[0].rho.sample_theta(&mut s);
            let direct = crate::network::forward(&ms[0].arch, &theta, x).unwrap();
            assert_eq!(ens.member(j, 0, 0), direct);
        }
        assert_eq!(ens.observation(0, 0), y);
    }

    #[test]
    fn theta_is_reused_across_horizons() {
        let (plan, mut feats) = small_problem(3);
        let start = plan.first_test_index();
        // identical inputs at every horizon imply identical member values
        let (x0, _) = feats[0].example(start).unwrap();
        let x0 = x0.to_vec();
        let test = &mut feats[0].test;
        for row in 0..test.len() {
            let d = test.dim;
            test.inputs[row * d..(row + 1) * d].copy_from_slice(&x0);
        }
        let ens =
            generate_ensemble(&models(&feats[..1], -0.5), &feats[..1], start, 4, 6, 1).unwrap();
        for j in 0..6 {
            for h in 1..=4 {
                assert_eq!(ens.member(j, h, 0), ens.member(j, 0, 0));
            }
        }
    }

    #[test]
    fn horizon_and_shape_errors() {
        let (plan, feats) = small_problem(4);
        let ms = models(&feats, -0.5);
        let start = plan.first_test_index();
        let last = plan.n_examples() - start;
        assert!(generate_ensemble(&ms, &feats, start, last, 3, 0).is_ok());
        assert!(generate_ensemble(&ms, &feats, start, last + 1, 3, 0).is_err());
        assert!(generate_ensemble(&ms, &feats, start, 0, 1, 0).is_err());
        let mut wrong = ms.clone();
        wrong[0].arch = Architecture::new(99, vec![4]);
        assert!(generate_ensemble(&wrong, &feats, start, 0, 3, 0).is_err());
    }

    #[test]
    fn forecast_is_deterministic_and_round_trips() {
        let (plan, feats) = small_problem(5);
        let ms = models(&feats, -0.5);
        let a = generate_ensemble(&ms, &feats, plan.first_test_index(), 5, 7, 3).unwrap();
        let b = generate_ensemble(&ms, &feats, plan.first_test_index(), 5, 7, 3).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ens.csv");
        a.save(&path).unwrap();
        assert_eq!(EnsembleForecast::load(&path).unwrap(), a);
        std::fs::write(
            &path,
            "position,horizon,member,value,observation\n0,0,0,1.0\n",
        )
        .unwrap();
        assert!(EnsembleForecast::load(&path).is_err());
    }

    fn plan_on(n: usize, p: usize, c: f64, pdepth: usize, a: usize) -> EmbeddingPlan {
        let opts = PlanOptions {
            p: pdepth,
            n_test: 1,
            force_a: Some(a),
            ..PlanOptions::default()
        };
        EmbeddingPlan::new(n, p, c, 1.0, &opts).unwrap()
    }

    #[test]
    fn target_lies_in_footprint() {
        let plan = plan_on(40, 5, 1.0, 1, 4);
        let fp = causal_footprint(3, &plan, 1).unwrap();
        assert_eq!(fp.inputs.len(), 3);
        assert!(fp.points.contains(&fp.target));
    }

    #[test]
    fn slow_cone_collapses_to_column() {
        let plan = plan_on(40, 7, 0.01, 2, 6);
        let fp = causal_footprint(2, &plan, 3).unwrap();
        // far enough after the inputs, only the column above x* remains
        assert!(fp.points.iter().all(|&(_, col)| col == 3));
    }

    #[test]
    fn footprint_matches_brute_force_on_small_grid() {
        for (c, pdepth, x_star) in [(1.0, 1, 5), (1.5, 2, 9), (0.5, 3, 10), (2.0, 1, 2)] {
            let plan = plan_on(20, 20, c, pdepth, 4);
            for i in 1..=plan.n_examples() {
                let target_row = i * plan.a - 1;
                if target_row < pdepth {
                    continue;
                }
                let fp = causal_footprint(i, &plan, x_star).unwrap();
                // enumerate input cells directly from the cone definition
                let mut inputs = Vec::new();
                for tau in 1..=pdepth {
                    for col in 0..20usize {
                        if (col as f64 - x_star as f64).abs() <= c * tau as f64 {
                            inputs.push((target_row - tau, col));
                        }
                    }
                }
                let mut expected = Vec::new();
                let first = target_row - 1;
                let last = (target_row + plan.a - 1).min(19);
                for row in first..=last {
                    for col in 0..20usize {
                        let ok = inputs.iter().all(|&(ir, ic)| {
                            row >= ir && (col as f64 - ic as f64).abs() <= c * (row - ir) as f64
                        });
                        if ok {
                            expected.push((row, col));
                        }
                    }
                }
                assert_eq!(fp.points, expected, "c={c} p={pdepth} i={i}");
                assert!(expected.contains(&(target_row, x_star)));
            }
        }
    }
}
