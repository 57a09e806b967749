//! Shared fixtures for the kernel benchmarks.

use mmaf_core::rng::stream;
use mmaf_core::{Architecture, FeatureSet, GaussianPosterior, Role};
use rand::Rng;

/// `n` examples of dimension `dim` with inputs and targets uniform on `[-1, 1)`.
pub fn random_features(n: usize, dim: usize, seed: u64) -> FeatureSet {
    let mut rng = stream(seed, &[0]);
    FeatureSet {
        position: 0,
        role: Role::Train,
        dim,
        inputs: (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        targets: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        indices: (1..=n).collect(),
    }
}

/// Posterior with small random means, the state training starts from after a
/// few steps.
pub fn random_posterior(arch: &Architecture, seed: u64) -> GaussianPosterior {
    let mut rng = stream(seed, &[1]);
    let mut rho = GaussianPosterior::initial(arch.param_count());
    for m in &mut rho.mu {
        *m = rng.random_range(-0.3..0.3);
    }
    rho
}

/// A parameter vector drawn from `rho`.
pub fn sample_theta(rho: &GaussianPosterior, seed: u64) -> Vec<f64> {
    rho.sample_theta(&mut stream(seed, &[2])).0
}
