//! Guided learning for spatio-temporal forecasting: simulate and estimate
//! spatio-temporal Ornstein–Uhlenbeck rasters, embed their influence cones
//! as features, fit stochastic networks under a PAC-Bayesian target and
//! evaluate the resulting ensemble forecasts.

pub mod embedding;
pub mod error;
pub mod estimation;
pub mod forecast;
mod io;
pub mod levy;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod raster;
pub mod rng;
pub mod stou;
pub mod training;

pub use embedding::{EmbeddingPlan, FeatureSet, PlanOptions, PositionFeatures, Role};
pub use error::{Error, Result};
pub use estimation::EstimatedParams;
pub use forecast::{EnsembleForecast, PositionModel};
pub use levy::LevyBasisSpec;
pub use metrics::EvaluationReport;
pub use network::{ArchSpec, Architecture, GaussianPosterior, ReferenceDistribution};
pub use pipeline::{PipelineConfig, RunManifest};
pub use raster::{DetrendMode, RasterSeries};
pub use stou::{KernelScaling, SimGrid, StouModel};
pub use training::{Dependence, PosteriorFile, TrainConfig, TrainReport};
