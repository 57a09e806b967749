use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use mmaf_core::embedding::{extract_features, EmbeddingPlan, PlanOptions, PositionFeatures};
use mmaf_core::estimation::{estimate_params, EstimatedParams};
use mmaf_core::forecast::{generate_ensemble, EnsembleForecast, PositionModel};
use mmaf_core::metrics;
use mmaf_core::network::{ArchSpec, ReferenceDistribution};
use mmaf_core::pipeline::{self, PacBayesTrainer, PipelineConfig, TrainingConfig, ValidationSetup};
use mmaf_core::raster::{detrend, DetrendMode, RasterSeries};
use mmaf_core::rng::{self, stage};
use mmaf_core::stou::{simulate, KernelScaling, SimGrid, StouModel};
use mmaf_core::training::{self, Dependence, PosteriorFile, TrainConfig};
use mmaf_core::{Error, LevyBasisSpec, Result};

#[derive(Parser)]
#[command(
    name = "mmaf",
    version,
    about = "Cone-embedded ensemble forecasting for STOU rasters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a STOU raster to CSV.
    Simulate(SimulateArgs),
    /// Estimate A, c and the decay rate from a raster.
    Estimate(EstimateArgs),
    /// Build cone-embedded feature files.
    Features(FeaturesArgs),
    /// Train one posterior per position.
    Train(TrainArgs),
    /// Select the reference distribution on the validation example.
    ValidatePrior(ValidatePriorArgs),
    /// Generate ensemble forecasts.
    Forecast(ForecastArgs),
    /// Score an ensemble forecast.
    Evaluate(EvaluateArgs),
    /// Run every stage from a TOML configuration.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long = "A")]
    mean_reversion: f64,
    #[arg(long = "c")]
    speed: f64,
    #[arg(long = "levy.kind", default_value = "gaussian")]
    levy_kind: String,
    #[arg(long = "levy.sigma2", default_value_t = 1.0)]
    levy_sigma2: f64,
    #[arg(long = "levy.alpha")]
    levy_alpha: Option<f64>,
    #[arg(long = "levy.beta")]
    levy_beta: Option<f64>,
    #[arg(long = "levy.delta")]
    levy_delta: Option<f64>,
    #[arg(long = "N")]
    n_times: usize,
    #[arg(long = "P")]
    n_positions: usize,
    #[arg(long, default_value_t = 4)]
    refine: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 1.0)]
    dt: f64,
    #[arg(long, default_value_t = 1.0)]
    dx: f64,
    /// Use raw cell-centre kernel weights without variance matching.
    #[arg(long)]
    center_weights: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 1)]
    tau: usize,
    #[arg(long, default_value_t = 1)]
    u: usize,
    #[arg(long, default_value = "per_position_mean")]
    detrend: DetrendMode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    params: PathBuf,
    #[arg(long, default_value_t = 1)]
    p: usize,
    #[arg(long, default_value_t = 3.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.025)]
    delta: f64,
    #[arg(long = "n-test", default_value_t = 100)]
    n_test: usize,
    #[arg(long = "force-a")]
    force_a: Option<usize>,
    /// Replace the estimated decay rate.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value = "per_position_mean")]
    detrend: DetrendMode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct TrainFlags {
    #[arg(long, default_value_t = 3.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.025)]
    delta: f64,
    #[arg(long, default_value_t = 1e-3)]
    eta: f64,
    #[arg(long, default_value_t = 1000)]
    batch: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long = "bound-draws", default_value_t = 100)]
    bound_draws: usize,
}

impl TrainFlags {
    fn section(&self) -> TrainingConfig {
        TrainingConfig {
            epsilon: self.epsilon,
            delta: self.delta,
            learning_rate: self.eta,
            batch_size: self.batch,
            epochs: self.epochs,
            sweep_epochs: None,
            bound_mc_draws: self.bound_draws,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value = "10^2")]
    arch: ArchSpec,
    /// Reference grid value; the reference is N(0, I / s).
    #[arg(long, default_value_t = 30.0)]
    s: f64,
    #[command(flatten)]
    flags: TrainFlags,
    /// Train only this position.
    #[arg(long)]
    position: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ValidatePriorArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value = "10^2")]
    arch: ArchSpec,
    #[arg(long = "s-grid", value_delimiter = ',', default_values_t = pipeline::DEFAULT_S_GRID)]
    s_grid: Vec<f64>,
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long = "J", default_value_t = 100)]
    members: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for the grid table and the posteriors at the selected s.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ForecastArgs {
    #[arg(long)]
    posteriors: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    start: usize,
    #[arg(long = "H", default_value_t = 0)]
    horizon: usize,
    #[arg(long = "J", default_value_t = 100)]
    members: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    ensemble: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    plots: Option<PathBuf>,
    #[arg(long, default_value_t = metrics::DEFAULT_BINS)]
    bins: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the configured output directory.
    #[arg(long = "output-dir")]
    output_dir: Option<PathBuf>,
    /// Epochs per grid point during reference selection.
    #[arg(long = "sweep-epochs")]
    sweep_epochs: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Features(a) => cmd_features(a),
        Command::Train(a) => cmd_train(a),
        Command::ValidatePrior(a) => cmd_validate_prior(a),
        Command::Forecast(a) => cmd_forecast(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Pipeline(a) => cmd_pipeline(a),
    }
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("serializable")
    );
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn levy_from(a: &SimulateArgs) -> Result<LevyBasisSpec> {
    match a.levy_kind.as_str() {
        "gaussian" => LevyBasisSpec::gaussian(a.levy_sigma2),
        "nig" => {
            let need = |v: Option<f64>, name: &str| {
                v.ok_or_else(|| {
                    Error::Config(format!("--levy.{name} is required for an NIG basis"))
                })
            };
            LevyBasisSpec::nig(
                need(a.levy_alpha, "alpha")?,
                need(a.levy_beta, "beta")?,
                need(a.levy_delta, "delta")?,
            )
        }
        other => Err(Error::Config(format!("unknown Lévy basis `{other}`"))),
    }
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let model = StouModel::new(a.mean_reversion, a.speed, levy_from(&a)?)?;
    let scaling = if a.center_weights {
        KernelScaling::Center
    } else {
        KernelScaling::VarianceMatched
    };
    let grid = SimGrid {
        dt: a.dt,
        dx: a.dx,
        refine: a.refine,
        trunc_tol: a.tol,
        scaling,
        ..SimGrid::new(a.n_times, a.n_positions, a.seed)
    };
    let raster = simulate(&model, &grid)?;
    raster.save(&a.out)?;
    eprintln!(
        "wrote {} x {} raster to {} (theoretical variance {:.6})",
        raster.n_times(),
        raster.n_positions(),
        a.out.display(),
        model.theoretical_variance()
    );
    Ok(())
}

fn load_centred(path: &Path, mode: DetrendMode) -> Result<RasterSeries> {
    Ok(detrend(&RasterSeries::load(path)?, mode).0)
}

fn cmd_estimate(a: EstimateArgs) -> Result<()> {
    let raster = load_centred(&a.input, a.detrend)?;
    let params = estimate_params(&raster, a.tau, a.u)?;
    params.save(&a.out)?;
    print_json(&params);
    Ok(())
}

fn cmd_features(a: FeaturesArgs) -> Result<()> {
    let raster = load_centred(&a.input, a.detrend)?;
    let params = EstimatedParams::load(&a.params)?;
    let opts = PlanOptions {
        p: a.p,
        epsilon: a.epsilon,
        delta: a.delta,
        n_test: a.n_test,
        force_a: a.force_a,
    };
    let c_grid = params.c_star * raster.h_t / raster.dx();
    let lambda = a.lambda.unwrap_or(params.lambda_star);
    let plan = EmbeddingPlan::new(
        raster.n_times(),
        raster.n_positions(),
        c_grid,
        lambda,
        &opts,
    )?;
    ensure_dir(&a.out)?;
    plan.save(a.out.join("plan.json"))?;
    for &x in &plan.positions_used {
        extract_features(&raster, &plan, x)?.save_in(&a.out)?;
    }
    print_json(&plan);
    Ok(())
}

fn load_features(dir: &Path) -> Result<(EmbeddingPlan, Vec<PositionFeatures>)> {
    let plan = EmbeddingPlan::load(dir.join("plan.json"))?;
    let feats = plan
        .positions_used
        .iter()
        .map(|&x| PositionFeatures::load_from(dir, x))
        .collect::<Result<Vec<_>>>()?;
    Ok((plan, feats))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (plan, mut feats) = load_features(&a.features)?;
    if let Some(k) = a.position {
        feats.retain(|f| f.position() == k);
        if feats.is_empty() {
            return Err(Error::Config(format!(
                "position {k} is not in the feature set"
            )));
        }
    }
    let arch = a.arch.with_input(plan.input_dim);
    let pi = ReferenceDistribution::from_precision(a.s)?;
    let dep = Dependence::from_plan(&plan);
    let section = a.flags.section();
    section.train_config(section.epochs, 0).validate()?;
    let mc_lip =
        training::reference_lipschitz(&arch, &pi, rng::derive_seed(a.seed, &[stage::MC_LIP]))?;
    ensure_dir(&a.out)?;
    let results = feats
        .par_iter()
        .map(|f| {
            let cfg: TrainConfig = section.train_config(
                section.epochs,
                rng::derive_seed(a.seed, &[stage::TRAIN, f.position() as u64]),
            );
            let (rho, report) = training::train_with_lip(&f.train, &arch, &pi, &cfg, &dep, mc_lip)?;
            let file = PosteriorFile::new(a.arch, f.position(), a.s, &rho, report, plan.input_dim);
            file.save(a.out.join(PosteriorFile::file_name(f.position())))?;
            Ok(file.report)
        })
        .collect::<Result<Vec<_>>>()?;
    for (f, r) in feats.iter().zip(&results) {
        eprintln!(
            "position {}: target {:.4} -> {:.4}, KL {:.3}, bound {:.4}{}",
            f.position(),
            r.target_curve[0],
            r.final_target,
            r.kl,
            r.pac_bound,
            if r.vacuous { " (vacuous)" } else { "" }
        );
    }
    Ok(())
}

fn cmd_validate_prior(a: ValidatePriorArgs) -> Result<()> {
    let (plan, feats) = load_features(&a.features)?;
    let section = a.flags.section();
    section.train_config(section.epochs, 0).validate()?;
    let setup = ValidationSetup {
        arch: a.arch,
        arch_index: 0,
        training: section.clone(),
        epochs: section.epochs,
        dep: Dependence::from_plan(&plan),
        members: a.members,
        master_seed: a.seed,
    };
    let outcome = pipeline::validate_reference(
        &feats,
        &a.s_grid,
        &setup,
        plan.validation_index(),
        &PacBayesTrainer,
    )?;
    ensure_dir(&a.out)?;
    let table_path = a.out.join("validation_grid.json");
    std::fs::write(
        &table_path,
        serde_json::to_string_pretty(&outcome.table).expect("serializable") + "\n",
    )
    .map_err(|e| Error::Io {
        path: table_path.clone(),
        source: e,
    })?;
    for (f, (rho, report)) in feats.iter().zip(&outcome.best.fits) {
        let file = PosteriorFile::new(
            a.arch,
            f.position(),
            outcome.s_star,
            rho,
            report.clone(),
            plan.input_dim,
        );
        file.save(a.out.join(PosteriorFile::file_name(f.position())))?;
    }
    println!("s* = {}", outcome.s_star);
    print_json(&outcome.table);
    Ok(())
}

fn cmd_forecast(a: ForecastArgs) -> Result<()> {
    let (_, feats) = load_features(&a.features)?;
    let models = feats
        .iter()
        .map(|f| {
            let file =
                PosteriorFile::load(a.posteriors.join(PosteriorFile::file_name(f.position())))?;
            Ok(PositionModel {
                arch: file.architecture(),
                rho: file.posterior(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ens: EnsembleForecast =
        generate_ensemble(&models, &feats, a.start, a.horizon, a.members, a.seed)?;
    ens.save(&a.out)?;
    eprintln!(
        "wrote {} members x {} horizons x {} positions to {}",
        ens.n_members,
        ens.n_horizons(),
        ens.n_positions(),
        a.out.display()
    );
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let ens = EnsembleForecast::load(&a.ensemble)?;
    let report = metrics::evaluate(&ens, a.seed, a.bins, &metrics::DEFAULT_LEVELS)?;
    report.save(&a.out)?;
    if let Some(dir) = &a.plots {
        metrics::write_plot_data(&ens, &report, dir)?;
    }
    println!(
        "CRPS {:.6}  RMSE {:.6}  PIT chi-square p {:.4}",
        report.crps_mean, report.rmse_mean, report.pit_p_value
    );
    Ok(())
}

fn cmd_pipeline(a: PipelineArgs) -> Result<()> {
    let mut cfg = PipelineConfig::load(&a.config)?;
    if let Some(dir) = a.output_dir {
        cfg.output_dir = dir;
    }
    if a.sweep_epochs.is_some() {
        cfg.training.sweep_epochs = a.sweep_epochs;
    }
    let manifest = pipeline::run_pipeline(&cfg)?;
    println!(
        "a = {}, m = {}, D = {}",
        manifest.a, manifest.m, manifest.input_dim
    );
    for s in &manifest.architectures {
        println!(
            "[{}] s* = {}  target {:.4}  bound {:.4}  val CRPS {:.5}  test CRPS {:.5}  test RMSE {:.5}  horizons {}",
            s.arch, s.s_star, s.target_mean, s.pac_bound_mean, s.validation_crps, s.test_crps, s.test_rmse, s.horizons
        );
    }
    println!(
        "manifest: {}",
        cfg.output_dir.join("manifest.json").display()
    );
    Ok(())
}
