//! Space-time raster data model, CSV I/O and trend removal.
//!
//! A raster holds `N` time rows and `P` spatial columns. Row `r` (0-based) is
//! observed at time `t0 + (r + 1) * h_t`, so with `t0 = 0` and `h_t = 1` the
//! row index plus one is the time stamp.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SPACING_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct RasterSeries {
    values: Vec<f64>,
    n_times: usize,
    n_positions: usize,
    pub t0: f64,
    pub h_t: f64,
    positions: Vec<f64>,
    pub name: String,
}

impl RasterSeries {
    /// Build a raster from row-major values (`values[i * P + k]`).
    pub fn new(
        values: Vec<f64>,
        n_times: usize,
        positions: Vec<f64>,
        t0: f64,
        h_t: f64,
        name: impl Into<String>,
    ) -> Result<Self> {
        let n_positions = positions.len();
        if n_times == 0 || n_positions == 0 {
            return Err(Error::invalid(
                "raster needs at least one row and one column",
            ));
        }
        if values.len() != n_times * n_positions {
            return Err(Error::invalid(format!(
                "value count {} does not match {}x{} raster",
                values.len(),
                n_times,
                n_positions
            )));
        }
        if !(h_t > 0.0 && h_t.is_finite()) || !t0.is_finite() {
            return Err(Error::invalid("sampling step must be positive and finite"));
        }
        check_uniform_grid(&positions).map_err(Error::invalid)?;
        if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite value at row {}, column {}",
                idx / n_positions,
                idx % n_positions
            )));
        }
        Ok(Self {
            values,
            n_times,
            n_positions,
            t0,
            h_t,
            positions,
            name: name.into(),
        })
    }

    /// Unit-spaced raster with `t0 = 0`, `h_t = 1` and positions `0..P`.
    pub fn from_rows(values: Vec<f64>, n_times: usize, n_positions: usize) -> Result<Self> {
        let positions = (0..n_positions).map(|k| k as f64).collect();
        Self::new(values, n_times, positions, 0.0, 1.0, "raster")
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn n_positions(&self) -> usize {
        self.n_positions
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Grid spacing; 1 for a single-column raster.
    pub fn dx(&self) -> f64 {
        if self.n_positions < 2 {
            1.0
        } else {
            self.positions[1] - self.positions[0]
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n_positions + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.n_positions..(row + 1) * self.n_positions]
    }

    pub fn column(&self, col: usize) -> impl Iterator<Item = f64> + '_ {
        self.values
            .iter()
            .skip(col)
            .step_by(self.n_positions)
            .copied()
    }

    pub fn time_of_row(&self, row: usize) -> f64 {
        self.t0 + (row as f64 + 1.0) * self.h_t
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_raster(path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_raster(self, path)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::with_capacity(self.values.len() * 20);
        out.push_str("time");
        for x in &self.positions {
            write!(out, ",pos_{x}").unwrap();
        }
        out.push('\n');
        for r in 0..self.n_times {
            write!(out, "{}", self.time_of_row(r)).unwrap();
            for v in self.row(r) {
                write!(out, ",{v:?}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

fn check_uniform_grid(positions: &[f64]) -> std::result::Result<(), String> {
    if let Some(k) = positions.iter().position(|x| !x.is_finite()) {
        return Err(format!("position {k} is not finite"));
    }
    if positions.len() < 2 {
        return Ok(());
    }
    let dx = positions[1] - positions[0];
    if dx <= 0.0 {
        return Err("positions must be strictly increasing".into());
    }
    for k in 1..positions.len() {
        let step = positions[k] - positions[k - 1];
        if step <= 0.0 {
            return Err(format!(
                "positions must be strictly increasing (column {k})"
            ));
        }
        if (step - dx).abs() > SPACING_RTOL * dx.abs().max(positions[k].abs()) {
            return Err(format!("non-uniform grid at column {k}"));
        }
    }
    Ok(())
}

/// Read a raster CSV: header `time,pos_<x1>,...,pos_<xP>` followed by one row
/// per time stamp in strictly increasing order.
pub fn load_raster(path: impl AsRef<Path>) -> Result<RasterSeries> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "raster".into());
    parse_raster(&text, path, name)
}

pub(crate) fn parse_raster(text: &str, path: &Path, name: String) -> Result<RasterSeries> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty());

    let (hline, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "malformed header: file is empty".into()))?;
    let mut cols = header.split(',').map(str::trim);
    if cols.next() != Some("time") {
        return Err(parse_err(
            hline,
            "malformed header: first column must be `time`".into(),
        ));
    }
    let mut positions = Vec::new();
    for (k, col) in cols.enumerate() {
        let coord = col.strip_prefix("pos_").ok_or_else(|| {
            parse_err(
                hline,
                format!("malformed header: column {} is `{col}`", k + 1),
            )
        })?;
        let x: f64 = coord.parse().map_err(|_| {
            parse_err(
                hline,
                format!(
                    "malformed header: bad coordinate `{coord}` in column {}",
                    k + 1
                ),
            )
        })?;
        positions.push(x);
    }
    if positions.is_empty() {
        return Err(parse_err(
            hline,
            "malformed header: no position columns".into(),
        ));
    }
    check_uniform_grid(&positions).map_err(|m| parse_err(hline, m))?;

    let p = positions.len();
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (lineno, line) in lines {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != p + 1 {
            return Err(parse_err(
                lineno,
                format!(
                    "ragged row: expected {} cells, found {}",
                    p + 1,
                    cells.len()
                ),
            ));
        }
        let t: f64 = cells[0]
            .parse()
            .map_err(|_| parse_err(lineno, format!("non-numeric time stamp `{}`", cells[0])))?;
        if let Some(&prev) = times.last() {
            if t <= prev {
                return Err(parse_err(
                    lineno,
                    "time stamps must be strictly increasing".into(),
                ));
            }
        }
        times.push(t);
        for (k, cell) in cells[1..].iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                parse_err(
                    lineno,
                    format!("non-numeric cell `{cell}` in column {}", k + 1),
                )
            })?;
            if !v.is_finite() {
                return Err(parse_err(
                    lineno,
                    format!("non-finite cell in column {}", k + 1),
                ));
            }
            values.push(v);
        }
    }
    if times.is_empty() {
        return Err(parse_err(hline + 1, "raster has no data rows".into()));
    }
    let h_t = if times.len() > 1 {
        times[1] - times[0]
    } else {
        1.0
    };
    for w in 1..times.len() {
        let step = times[w] - times[w - 1];
        if (step - h_t).abs() > SPACING_RTOL * h_t.max(times[w].abs()) {
            return Err(parse_err(hline + 1 + w, "non-uniform time step".into()));
        }
    }
    let t0 = times[0] - h_t;
    RasterSeries::new(values, times.len(), positions, t0, h_t, name)
}

/// Write a raster in the CSV layout read by [`load_raster`], using the
/// shortest decimal representation that round-trips each double.
pub fn save_raster(r: &RasterSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, r.to_csv_string()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DetrendMode {
    None,
    #[default]
    PerPositionMean,
    GlobalMean,
}

impl std::str::FromStr for DetrendMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "per_position_mean" | "per-position-mean" => Ok(Self::PerPositionMean),
            "global_mean" | "global-mean" => Ok(Self::GlobalMean),
            other => Err(Error::Config(format!("unknown detrend mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetrendInfo {
    pub mode: DetrendMode,
    /// Constant-in-time trend subtracted from each column.
    pub removed: Vec<f64>,
}

/// Remove a constant-in-time trend from each column.
pub fn detrend(r: &RasterSeries, mode: DetrendMode) -> (RasterSeries, DetrendInfo) {
    let p = r.n_positions();
    let n = r.n_times() as f64;
    let removed = match mode {
        DetrendMode::None => vec![0.0; p],
        DetrendMode::PerPositionMean => (0..p).map(|k| r.column(k).sum::<f64>() / n).collect(),
        DetrendMode::GlobalMean => {
            let mean = r.values.iter().sum::<f64>() / r.values.len() as f64;
            vec![mean; p]
        }
    };
    let mut out = r.clone();
    for row in out.values.chunks_exact_mut(p) {
        for (v, m) in row.iter_mut().zip(&removed) {
            *v -= m;
        }
    }
    (out, DetrendInfo { mode, removed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn parse(text: &str) -> Result<RasterSeries> {
        parse_raster(text, Path::new("mem.csv"), "mem".into())
    }

    #[test]
    fn smallest_file() {
        let r = parse("time,pos_0\n1,0.5\n2,-0.5\n").unwrap();
        assert_eq!((r.n_times(), r.n_positions()), (2, 1));
        assert_eq!(r.values(), &[0.5, -0.5]);
        assert_eq!(r.t0, 0.0);
        assert_eq!(r.h_t, 1.0);
    }

    #[test]
    fn rejects_non_uniform_positions() {
        let err = parse("time,pos_0,pos_1,pos_3\n1,0,0,0\n").unwrap_err();
        assert!(err.to_string().contains("non-uniform grid"), "{err}");
    }

    #[test]
    fn rejects_malformed_input() {
        let cases = [
            ("t,pos_0\n1,2\n", "malformed header"),
            ("time,x0\n1,2\n", "malformed header"),
            ("time,pos_0,pos_1\n1,2\n", "ragged row"),
            ("time,pos_0\n1,abc\n", "non-numeric cell"),
            ("time,pos_0\n2,1\n1,1\n", "strictly increasing"),
            ("time,pos_0\n1,1\n2,1\n4,1\n", "non-uniform time step"),
        ];
        for (text, want) in cases {
            let err = parse(text).unwrap_err();
            assert!(err.to_string().contains(want), "{text:?}: {err}");
            assert!(err.is_config_error());
        }
        let err = parse("time,pos_0\n1,1\n2,x\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn detrend_constant_field() {
        let r = RasterSeries::from_rows(vec![7.0; 12], 4, 3).unwrap();
        let (z, info) = detrend(&r, DetrendMode::PerPositionMean);
        assert!(z.values().iter().all(|&v| v == 0.0));
        assert_eq!(info.removed, vec![7.0; 3]);
    }

    #[test]
    fn detrend_zero_mean_is_noop() {
        let r = RasterSeries::from_rows(vec![1.0, -2.0, -1.0, 2.0], 2, 2).unwrap();
        for mode in [
            DetrendMode::PerPositionMean,
            DetrendMode::GlobalMean,
            DetrendMode::None,
        ] {
            let (z, info) = detrend(&r, mode);
            assert_eq!(z.values(), r.values());
            assert!(info.removed.iter().all(|&m| m == 0.0));
        }
    }

    #[test]
    fn detrend_random_columns_have_zero_mean() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let vals: Vec<f64> = (0..400).map(|_| rng.random_range(-3.0..10.0)).collect();
        let r = RasterSeries::from_rows(vals, 100, 4).unwrap();
        let (z, _) = detrend(&r, DetrendMode::PerPositionMean);
        for k in 0..4 {
            let mean = z.column(k).sum::<f64>() / 100.0;
            assert!(mean.abs() < 1e-12, "column {k} mean {mean}");
        }
        let (g, info) = detrend(&r, DetrendMode::GlobalMean);
        assert!((g.values().iter().sum::<f64>() / 400.0).abs() < 1e-12);
        assert!(info.removed.windows(2).all(|w| w[0] == w[1]));
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_exact(
            n in 1usize..8,
            p in 1usize..5,
            seed in any::<u64>(),
            t0 in -5i32..5,
            dx in prop_oneof![Just(1.0f64), Just(2.5), Just(0.1)],
        ) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let vals: Vec<f64> = (0..n * p)
                .map(|_| rng.random::<f64>() * 10f64.powi(rng.random_range(-20..20)) - 0.5)
                .collect();
            let positions = (0..p).map(|k| k as f64 * dx).collect();
            let r = RasterSeries::new(vals, n, positions, t0 as f64, 1.0, "mem").unwrap();
            let back = parse(&r.to_csv_string()).unwrap();
            prop_assert_eq!(back, r);
        }

        #[test]
        fn detrend_is_idempotent(seed in any::<u64>(), global in any::<bool>()) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let vals: Vec<f64> = (0..60).map(|_| rng.random_range(-100.0..100.0)).collect();
            let r = RasterSeries::from_rows(vals, 20, 3).unwrap();
            let mode = if global { DetrendMode::GlobalMean } else { DetrendMode::PerPositionMean };
            let (once, _) = detrend(&r, mode);
            let (twice, _) = detrend(&once, mode);
            for (a, b) in once.values().iter().zip(twice.values()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
