//! End-to-end workflow: simulate or load a raster, detrend, estimate,
//! embed, select the reference distribution on the validation example,
//! train, forecast the test span and evaluate.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{
    extract_features, EmbeddingPlan, FeatureSet, PlanOptions, PositionFeatures,
};
use crate::error::{Error, Result};
use crate::estimation::{estimate_params, EstimatedParams};
use crate::forecast::{generate_ensemble, EnsembleForecast, PositionModel};
use crate::levy::LevyBasisSpec;
use crate::metrics::{self, crps, mean, EvaluationReport};
use crate::network::{ArchSpec, Architecture, GaussianPosterior, ReferenceDistribution};
use crate::raster::{detrend, DetrendMode, RasterSeries};
use crate::rng::{self, stage};
use crate::stou::{simulate, KernelScaling, SimGrid, StouModel};
use crate::training::{self, Dependence, PosteriorFile, TrainConfig, TrainReport};

pub const DEFAULT_S_GRID: [f64; 11] = [
    10.0, 30.0, 50.0, 70.0, 90.0, 110.0, 130.0, 150.0, 170.0, 190.0, 210.0,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    #[default]
    Simulate,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: SourceKind,
    pub path: Option<PathBuf>,
    pub detrend: DetrendMode,
    /// Write the (undetrended) raster into the output directory.
    pub save_raster: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub mean_reversion: f64,
    pub speed: f64,
    pub n_times: usize,
    pub n_positions: usize,
    pub dt: f64,
    pub dx: f64,
    pub refine: usize,
    pub trunc_tol: f64,
    pub scaling: KernelScaling,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            mean_reversion: 3.851,
            speed: 1.013,
            n_times: 100_000,
            n_positions: 10,
            dt: 1.0,
            dx: 1.0,
            refine: 4,
            trunc_tol: 1e-6,
            scaling: KernelScaling::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationConfig {
    /// Temporal lag in rows.
    pub tau: usize,
    /// Spatial lag in columns.
    pub u: usize,
    /// Replaces the plug-in decay rate when set.
    pub lambda: Option<f64>,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            tau: 1,
            u: 1,
            lambda: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub p: usize,
    pub n_test: usize,
    pub force_a: Option<usize>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            p: 1,
            n_test: 100,
            force_a: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architectures: Vec<ArchSpec>,
    /// Reference grid; `s` selects `N(0, s⁻¹ I)`.
    pub s_grid: Vec<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architectures: vec![ArchSpec {
                width: 10,
                layers: 2,
            }],
            s_grid: DEFAULT_S_GRID.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epsilon: f64,
    pub delta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs per grid point during reference selection; the chosen point
    /// is retrained with `epochs` when this differs.
    pub sweep_epochs: Option<usize>,
    pub bound_mc_draws: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epsilon: t.epsilon,
            delta: t.delta,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            sweep_epochs: None,
            bound_mc_draws: t.bound_mc_draws,
        }
    }
}

impl TrainingConfig {
    pub fn train_config(&self, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epsilon: self.epsilon,
            delta: self.delta,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs,
            seed,
            bound_mc_draws: self.bound_mc_draws,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastConfig {
    pub members: usize,
    /// Terminal horizon of the test trajectory; defaults to the full test span.
    pub horizon: Option<usize>,
    pub pit_bins: usize,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            members: 100,
            horizon: None,
            pit_bins: metrics::DEFAULT_BINS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub simulation: SimulationConfig,
    pub levy: LevyBasisSpec,
    pub estimation: EstimationConfig,
    pub embedding: EmbeddingConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub forecast: ForecastConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("run"),
            data: DataConfig {
                save_raster: true,
                ..DataConfig::default()
            },
            simulation: SimulationConfig::default(),
            levy: LevyBasisSpec::default(),
            estimation: EstimationConfig::default(),
            embedding: EmbeddingConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            forecast: ForecastConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.model.s_grid.is_empty() {
            return fail("model.s_grid must not be empty".into());
        }
        if let Some(s) = self
            .model
            .s_grid
            .iter()
            .find(|s| !(**s > 0.0 && s.is_finite()))
        {
            return fail(format!("model.s_grid values must be > 0, got {s}"));
        }
        if self.model.architectures.is_empty() {
            return fail("model.architectures must not be empty".into());
        }
        if self.forecast.members < 2 {
            return fail("forecast.members must be >= 2".into());
        }
        if self.forecast.pit_bins < 2 {
            return fail("forecast.pit_bins must be >= 2".into());
        }
        if self.embedding.p == 0 {
            return fail("embedding.p must be >= 1".into());
        }
        if self.estimation.tau == 0 || self.estimation.u == 0 {
            return fail("estimation lags must be >= 1".into());
        }
        if let Some(l) = self.estimation.lambda {
            if !(l > 0.0 && l.is_finite()) {
                return fail(format!("estimation.lambda must be > 0, got {l}"));
            }
        }
        if self.data.source == SourceKind::File && self.data.path.is_none() {
            return fail("data.path is required when data.source = \"file\"".into());
        }
        if self.training.sweep_epochs == Some(0) {
            return fail("training.sweep_epochs must be >= 1".into());
        }
        self.training
            .train_config(self.training.epochs, 0)
            .validate()?;
        if self.data.source == SourceKind::Simulate {
            self.levy.validate()?;
            self.stou_model()?;
            self.sim_grid().validate()?;
        }
        Ok(())
    }

    pub fn stou_model(&self) -> Result<StouModel> {
        StouModel::new(
            self.simulation.mean_reversion,
            self.simulation.speed,
            self.levy,
        )
    }

    pub fn sim_grid(&self) -> SimGrid {
        let s = &self.simulation;
        SimGrid {
            dt: s.dt,
            dx: s.dx,
            refine: s.refine,
            trunc_tol: s.trunc_tol,
            scaling: s.scaling,
            ..SimGrid::new(
                s.n_times,
                s.n_positions,
                rng::derive_seed(self.seed, &[stage::SIMULATE]),
            )
        }
    }

    pub fn plan_options(&self) -> PlanOptions {
        PlanOptions {
            p: self.embedding.p,
            epsilon: self.training.epsilon,
            delta: self.training.delta,
            n_test: self.embedding.n_test,
            force_a: self.embedding.force_a,
        }
    }
}

/// Fits a posterior for one position; the production implementation is
/// [`PacBayesTrainer`], tests may substitute instrumented stubs.
pub trait Trainer: Sync {
    fn fit(
        &self,
        data: &FeatureSet,
        arch: &Architecture,
        pi: &ReferenceDistribution,
        cfg: &TrainConfig,
        dep: &Dependence,
        mc_lip: f64,
    ) -> Result<(GaussianPosterior, TrainReport)>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PacBayesTrainer;

impl Trainer for PacBayesTrainer {
    fn fit(
        &self,
        data: &FeatureSet,
        arch: &Architecture,
        pi: &ReferenceDistribution,
        cfg: &TrainConfig,
        dep: &Dependence,
        mc_lip: f64,
    ) -> Result<(GaussianPosterior, TrainReport)> {
        training::train_with_lip(data, arch, pi, cfg, dep, mc_lip)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub s: f64,
    pub mc_lip: f64,
    pub validation_crps: f64,
    pub validation_rmse: f64,
}

/// Index of the smallest score; ties go to the smaller `s`.
pub fn argmin_reference(table: &[GridPoint]) -> Option<usize> {
    (0..table.len()).min_by(|&i, &j| {
        table[i]
            .validation_crps
            .total_cmp(&table[j].validation_crps)
            .then(table[i].s.total_cmp(&table[j].s))
    })
}

/// Inputs shared by every grid point of one architecture.
#[derive(Debug, Clone)]
pub struct ValidationSetup {
    pub arch: ArchSpec,
    pub arch_index: usize,
    pub training: TrainingConfig,
    pub epochs: usize,
    pub dep: Dependence,
    pub members: usize,
    pub master_seed: u64,
}

impl ValidationSetup {
    fn train_seed(&self, grid_index: usize, position: usize) -> u64 {
        rng::derive_seed(
            self.master_seed,
            &[
                stage::TRAIN,
                self.arch_index as u64,
                grid_index as u64,
                position as u64,
            ],
        )
    }

    fn lip_seed(&self, grid_index: usize) -> u64 {
        rng::derive_seed(
            self.master_seed,
            &[stage::MC_LIP, self.arch_index as u64, grid_index as u64],
        )
    }

    fn ensemble_seed(&self, grid_index: usize) -> u64 {
        rng::derive_seed(
            self.master_seed,
            &[stage::VALIDATE, self.arch_index as u64, grid_index as u64],
        )
    }
}

/// Posteriors of every position at one grid point.
#[derive(Debug, Clone)]
pub struct GridFit {
    pub grid_index: usize,
    pub s: f64,
    pub mc_lip: f64,
    pub fits: Vec<(GaussianPosterior, TrainReport)>,
}

#[derive(Debug, Clone)]
pub struct ValidationOutcome {
    pub s_star: f64,
    pub table: Vec<GridPoint>,
    /// Fits at the selected grid point.
    pub best: GridFit,
}

fn fit_grid_point<T: Trainer>(
    features: &[PositionFeatures],
    setup: &ValidationSetup,
    grid_index: usize,
    s: f64,
    epochs: usize,
    trainer: &T,
) -> Result<GridFit> {
    let dim = features[0].train.dim;
    let arch = setup.arch.with_input(dim);
    let pi = ReferenceDistribution::from_precision(s)?;
    let mc_lip = training::reference_lipschitz(&arch, &pi, setup.lip_seed(grid_index))?;
    let fits = features
        .par_iter()
        .map(|f| {
            let cfg = setup
                .training
                .train_config(epochs, setup.train_seed(grid_index, f.position()));
            trainer.fit(&f.train, &arch, &pi, &cfg, &setup.dep, mc_lip)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GridFit {
        grid_index,
        s,
        mc_lip,
        fits,
    })
}

fn models_of(fit: &GridFit, arch: &Architecture) -> Vec<PositionModel> {
    fit.fits
        .iter()
        .map(|(rho, _)| PositionModel {
            arch: arch.clone(),
            rho: rho.clone(),
        })
        .collect()
}

/// Ensemble at the validation index (horizon 0) for one grid point.
fn validation_ensemble(
    features: &[PositionFeatures],
    setup: &ValidationSetup,
    fit: &GridFit,
    validation_index: usize,
) -> Result<EnsembleForecast> {
    let arch = setup.arch.with_input(features[0].train.dim);
    generate_ensemble(
        &models_of(fit, &arch),
        features,
        validation_index,
        0,
        setup.members,
        setup.ensemble_seed(fit.grid_index),
    )
}

fn mean_crps_rmse(ens: &EnsembleForecast) -> (f64, f64) {
    let n_r = ens.n_positions();
    let mut c = Vec::with_capacity(n_r);
    for r in 0..n_r {
        let row: Vec<f64> = (0..ens.n_horizons())
            .map(|h| crps(&ens.cell(h, r), ens.observation(h, r)))
            .collect();
        c.push(mean(&row));
    }
    let rm: Vec<f64> = (0..n_r).map(|r| metrics::rmse(ens, r)).collect();
    (mean(&c), mean(&rm))
}

/// Grid search for the reference distribution: train every position at
/// each `s`, forecast the validation example and keep the `s` with the
/// lowest position-averaged CRPS (ties to the smaller `s`).
pub fn validate_reference<T: Trainer>(
    features: &[PositionFeatures],
    s_grid: &[f64],
    setup: &ValidationSetup,
    validation_index: usize,
    trainer: &T,
) -> Result<ValidationOutcome> {
    if features.is_empty() {
        return Err(Error::invalid("no positions to validate on"));
    }
    if s_grid.is_empty() {
        return Err(Error::Config("reference grid is empty".into()));
    }
    let mut table: Vec<GridPoint> = Vec::with_capacity(s_grid.len());
    let mut best: Option<GridFit> = None;
    for (k, &s) in s_grid.iter().enumerate() {
        let fit = fit_grid_point(features, setup, k, s, setup.epochs, trainer).map_err(|e| {
            let done: Vec<String> = table
                .iter()
                .map(|g| format!("s={} crps={}", g.s, g.validation_crps))
                .collect();
            let msg = format!(
                "training failed at grid point {}/{} (s={s}); completed [{}]: {e}",
                k + 1,
                s_grid.len(),
                done.join(", ")
            );
            match e {
                Error::Numeric(_) => Error::Numeric(msg),
                _ => Error::InvalidInput(msg),
            }
        })?;
        let ens = validation_ensemble(features, setup, &fit, validation_index)?;
        let (validation_crps, validation_rmse) = mean_crps_rmse(&ens);
        table.push(GridPoint {
            s,
            mc_lip: fit.mc_lip,
            validation_crps,
            validation_rmse,
        });
        if argmin_reference(&table) == Some(k) {
            best = Some(fit);
        }
    }
    let best = best.expect("non-empty grid has a minimum");
    Ok(ValidationOutcome {
        s_star: best.s,
        table,
        best,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionSummary {
    pub position: usize,
    pub initial_target: f64,
    pub first_epoch_target: f64,
    pub final_target: f64,
    pub kl: f64,
    pub rho_r: f64,
    pub pac_bound: f64,
    pub vacuous: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureArtifacts {
    pub validation_table: String,
    pub posteriors: Vec<String>,
    pub validation_ensemble: String,
    pub validation_report: String,
    pub test_ensemble: String,
    pub test_report: String,
    pub plots: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSummary {
    pub arch: ArchSpec,
    pub d: usize,
    pub s_star: f64,
    pub reference_variance: f64,
    pub mc_lip: f64,
    pub validation_table: Vec<GridPoint>,
    pub positions: Vec<PositionSummary>,
    pub target_mean: f64,
    pub pac_bound_mean: f64,
    pub pac_bound_max: f64,
    pub validation_crps: f64,
    pub validation_rmse: f64,
    pub test_crps: f64,
    pub test_rmse: f64,
    /// Number of test horizons `H + 1`.
    pub horizons: usize,
    pub test_to_validation_crps: f64,
    pub test_pit_p_value: f64,
    pub artifacts: ArchitectureArtifacts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageArtifacts {
    pub config: String,
    pub raster: Option<String>,
    pub detrend: String,
    pub params: String,
    pub plan: String,
    pub features: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: PipelineConfig,
    pub artifacts: StageArtifacts,
    pub estimated: EstimatedParams,
    pub lambda_used: f64,
    pub c_grid: f64,
    pub a: usize,
    pub m: usize,
    pub input_dim: usize,
    pub positions_used: Vec<usize>,
    pub decay_rule_met: bool,
    pub validation_index: usize,
    pub first_test_index: usize,
    pub validation_note: String,
    pub architectures: Vec<ArchitectureSummary>,
}

impl RunManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        crate::io::read_json(path)
    }
}

#[derive(Debug, Clone, Default, Serialize)]
struct Timings {
    stages: Vec<(String, f64)>,
}

impl Timings {
    fn lap(&mut self, name: &str, since: &mut Instant) {
        self.stages
            .push((name.to_string(), since.elapsed().as_secs_f64()));
        *since = Instant::now();
    }
}

#[derive(Debug, Serialize)]
struct FailureRecord<'a> {
    stage: &'a str,
    message: String,
}

fn rel(out: &Path, path: &Path) -> String {
    path.strip_prefix(out)
        .unwrap_or(path)
        .to_string_lossy()
        .into_owned()
}

fn arch_dir_name(arch: &ArchSpec) -> String {
    format!("arch_{}x{}", arch.width, arch.layers)
}

/// Run every stage with the production trainer.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunManifest> {
    run_pipeline_with(cfg, &PacBayesTrainer)
}

/// Run every stage; on failure a `failure.json` naming the stage is written
/// next to the partial artifacts.
pub fn run_pipeline_with<T: Trainer>(cfg: &PipelineConfig, trainer: &T) -> Result<RunManifest> {
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    crate::io::create_dir(&out)?;
    let mut stage_name = "setup";
    let result = run_stages(cfg, trainer, &out, &mut stage_name);
    if let Err(e) = &result {
        let record = FailureRecord {
            stage: stage_name,
            message: e.to_string(),
        };
        // best effort: the original error is what the caller needs
        let _ = crate::io::write_json(out.join("failure.json"), &record);
    }
    result
}

fn run_stages<T: Trainer>(
    cfg: &PipelineConfig,
    trainer: &T,
    out: &Path,
    stage_name: &mut &'static str,
) -> Result<RunManifest> {
    let _ = std::fs::remove_file(out.join("failure.json"));
    let mut timings = Timings::default();
    let mut clock = Instant::now();
    let config_path = out.join("config.toml");
    std::fs::write(&config_path, cfg.to_toml_string()?).map_err(|e| Error::io(&config_path, e))?;

    *stage_name = "data";
    let raster = match cfg.data.source {
        SourceKind::Simulate => simulate(&cfg.stou_model()?, &cfg.sim_grid())?,
        SourceKind::File => RasterSeries::load(cfg.data.path.as_ref().unwrap())?,
    };
    let raster_path = if cfg.data.save_raster {
        let p = out.join("raster.csv");
        raster.save(&p)?;
        Some(rel(out, &p))
    } else {
        None
    };
    timings.lap("data", &mut clock);

    *stage_name = "detrend";
    let (centred, info) = detrend(&raster, cfg.data.detrend);
    drop(raster);
    let detrend_path = out.join("detrend.json");
    crate::io::write_json(&detrend_path, &info)?;

    *stage_name = "estimate";
    let params = estimate_params(&centred, cfg.estimation.tau, cfg.estimation.u)?;
    let params_path = out.join("params.json");
    params.save(&params_path)?;
    let lambda = cfg.estimation.lambda.unwrap_or(params.lambda_star);
    timings.lap("estimate", &mut clock);

    *stage_name = "embed";
    let c_grid = params.c_star * centred.h_t / centred.dx();
    let plan = EmbeddingPlan::new(
        centred.n_times(),
        centred.n_positions(),
        c_grid,
        lambda,
        &cfg.plan_options(),
    )?;
    let feature_dir = out.join("features");
    crate::io::create_dir(&feature_dir)?;
    let plan_path = feature_dir.join("plan.json");
    plan.save(&plan_path)?;
    let features: Vec<PositionFeatures> = plan
        .positions_used
        .iter()
        .map(|&x| extract_features(&centred, &plan, x))
        .collect::<Result<_>>()?;
    drop(centred);
    let mut feature_paths = Vec::new();
    for f in &features {
        f.save_in(&feature_dir)?;
        for set in [&f.train, &f.validation, &f.test] {
            feature_paths.push(rel(
                out,
                &feature_dir.join(FeatureSet::file_name(set.position, set.role)),
            ));
        }
    }
    timings.lap("embed", &mut clock);

    let dep = Dependence::from_plan(&plan);
    let last_index = plan.n_examples();
    let first_test = plan.first_test_index();
    let span = last_index.checked_sub(first_test).ok_or_else(|| {
        Error::Config(format!(
            "no test examples: floor(N/a) = {last_index} < first test index {first_test}"
        ))
    })?;
    let horizon = match cfg.forecast.horizon {
        Some(h) if h > span => {
            return Err(Error::Config(format!(
                "forecast.horizon {h} exceeds the test span {span}"
            )));
        }
        Some(h) => h,
        None => span,
    };

    let mut summaries = Vec::new();
    for (arch_index, arch_spec) in cfg.model.architectures.iter().enumerate() {
        *stage_name = "validate";
        let arch = arch_spec.with_input(plan.input_dim);
        let setup = ValidationSetup {
            arch: *arch_spec,
            arch_index,
            training: cfg.training.clone(),
            epochs: cfg.training.sweep_epochs.unwrap_or(cfg.training.epochs),
            dep,
            members: cfg.forecast.members,
            master_seed: cfg.seed,
        };
        let outcome = validate_reference(
            &features,
            &cfg.model.s_grid,
            &setup,
            plan.validation_index(),
            trainer,
        )?;
        timings.lap(&format!("validate {arch_spec}"), &mut clock);

        *stage_name = "train";
        let chosen = if setup.epochs == cfg.training.epochs {
            outcome.best.clone()
        } else {
            fit_grid_point(
                &features,
                &setup,
                outcome.best.grid_index,
                outcome.s_star,
                cfg.training.epochs,
                trainer,
            )?
        };
        timings.lap(&format!("train {arch_spec}"), &mut clock);

        *stage_name = "forecast";
        let arch_dir = out.join(arch_dir_name(arch_spec));
        let post_dir = arch_dir.join("posteriors");
        crate::io::create_dir(&post_dir)?;
        let table_path = arch_dir.join("validation_grid.csv");
        let mut table_csv =
            String::from("s,reference_variance,mc_lip,validation_crps,validation_rmse\n");
        for g in &outcome.table {
            table_csv.push_str(&format!(
                "{},{:?},{:?},{:?},{:?}\n",
                g.s,
                1.0 / g.s,
                g.mc_lip,
                g.validation_crps,
                g.validation_rmse
            ));
        }
        std::fs::write(&table_path, table_csv).map_err(|e| Error::io(&table_path, e))?;

        let mut posterior_paths = Vec::new();
        let mut positions = Vec::new();
        for (f, (rho, report)) in features.iter().zip(&chosen.fits) {
            let file = PosteriorFile::new(
                *arch_spec,
                f.position(),
                outcome.s_star,
                rho,
                report.clone(),
                plan.input_dim,
            );
            let path = post_dir.join(PosteriorFile::file_name(f.position()));
            file.save(&path)?;
            posterior_paths.push(rel(out, &path));
            positions.push(PositionSummary {
                position: f.position(),
                initial_target: report.initial_target,
                first_epoch_target: report.target_curve[0],
                final_target: report.final_target,
                kl: report.kl,
                rho_r: report.rho_r,
                pac_bound: report.pac_bound,
                vacuous: report.vacuous,
            });
        }

        let val_ens = validation_ensemble(&features, &setup, &chosen, plan.validation_index())?;
        let models = models_of(&chosen, &arch);
        let forecast_seed = rng::derive_seed(cfg.seed, &[stage::FORECAST, arch_index as u64]);
        let test_ens = generate_ensemble(
            &models,
            &features,
            first_test,
            horizon,
            cfg.forecast.members,
            forecast_seed,
        )?;
        timings.lap(&format!("forecast {arch_spec}"), &mut clock);

        *stage_name = "evaluate";
        let pit_seed = rng::derive_seed(cfg.seed, &[stage::PIT, arch_index as u64]);
        let val_report = metrics::evaluate(
            &val_ens,
            pit_seed,
            cfg.forecast.pit_bins,
            &metrics::DEFAULT_LEVELS,
        )?;
        let test_report = metrics::evaluate(
            &test_ens,
            pit_seed,
            cfg.forecast.pit_bins,
            &metrics::DEFAULT_LEVELS,
        )?;
        let paths = [
            arch_dir.join("validation_ensemble.csv"),
            arch_dir.join("validation_report.json"),
            arch_dir.join("test_ensemble.csv"),
            arch_dir.join("test_report.json"),
        ];
        val_ens.save(&paths[0])?;
        val_report.save(&paths[1])?;
        test_ens.save(&paths[2])?;
        test_report.save(&paths[3])?;
        let plots = metrics::write_plot_data(&test_ens, &test_report, arch_dir.join("plots"))?;
        timings.lap(&format!("evaluate {arch_spec}"), &mut clock);

        summaries.push(summarize(
            arch_spec,
            &arch,
            &outcome,
            &chosen,
            positions,
            &val_report,
            &test_report,
            ArchitectureArtifacts {
                validation_table: rel(out, &table_path),
                posteriors: posterior_paths,
                validation_ensemble: rel(out, &paths[0]),
                validation_report: rel(out, &paths[1]),
                test_ensemble: rel(out, &paths[2]),
                test_report: rel(out, &paths[3]),
                plots: plots.iter().map(|p| rel(out, p)).collect(),
            },
        ));
    }

    *stage_name = "manifest";
    let manifest = RunManifest {
        config: cfg.clone(),
        artifacts: StageArtifacts {
            config: rel(out, &config_path),
            raster: raster_path,
            detrend: rel(out, &detrend_path),
            params: rel(out, &params_path),
            plan: rel(out, &plan_path),
            features: feature_paths,
        },
        estimated: params,
        lambda_used: lambda,
        c_grid,
        a: plan.a,
        m: plan.m,
        input_dim: plan.input_dim,
        positions_used: plan.positions_used.clone(),
        decay_rule_met: plan.decay_rule_met,
        validation_index: plan.validation_index(),
        first_test_index: first_test,
        validation_note:
            "validation scores use the single validation example per position (horizon 0)".into(),
        architectures: summaries,
    };
    manifest.save(out.join("manifest.json"))?;
    timings.lap("manifest", &mut clock);
    crate::io::write_json(out.join("timings.json"), &timings)?;
    Ok(manifest)
}

#[allow(clippy::too_many_arguments)]
fn summarize(
    spec: &ArchSpec,
    arch: &Architecture,
    outcome: &ValidationOutcome,
    chosen: &GridFit,
    positions: Vec<PositionSummary>,
    val: &EvaluationReport,
    test: &EvaluationReport,
    artifacts: ArchitectureArtifacts,
) -> ArchitectureSummary {
    let bounds: Vec<f64> = positions.iter().map(|p| p.pac_bound).collect();
    let targets: Vec<f64> = positions.iter().map(|p| p.final_target).collect();
    ArchitectureSummary {
        arch: *spec,
        d: arch.param_count(),
        s_star: outcome.s_star,
        reference_variance: 1.0 / outcome.s_star,
        mc_lip: chosen.mc_lip,
        validation_table: outcome.table.clone(),
        target_mean: mean(&targets),
        pac_bound_mean: mean(&bounds),
        pac_bound_max: bounds.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        positions,
        validation_crps: val.crps_mean,
        validation_rmse: val.rmse_mean,
        test_crps: test.crps_mean,
        test_rmse: test.rmse_mean,
        horizons: test.n_horizons,
        test_to_validation_crps: test.crps_mean / val.crps_mean,
        test_pit_p_value: test.pit_p_value,
        artifacts,
    }
}
