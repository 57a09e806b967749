//! PAC-Bayesian training of a diagonal-Gaussian generalized posterior with a
//! single-draw pathwise risk gradient and Adam, plus post-training bound
//! reporting.

use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingPlan, FeatureSet, Role};
use crate::error::{Error, Result};
use crate::network::{
    kl, mc_lip_reference, sigmoid, softplus, ArchSpec, Architecture, GaussianPosterior,
    ReferenceDistribution, Workspace,
};
use crate::rng;

pub use crate::network::truncated_loss;

/// Draws used for the Monte Carlo estimate of `π[Lip(h_θ)]`.
pub const LIP_MC_DRAWS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epsilon: f64,
    pub delta: f64,
    pub learning_rate: f64,
    /// Examples per batch; 0 means full batch.
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub seed: u64,
    pub bound_mc_draws: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epsilon: 3.0,
            delta: 0.025,
            learning_rate: 1e-3,
            batch_size: 1000,
            epochs: 30,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            seed: 0,
            bound_mc_draws: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return fail(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return fail(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        // zero is accepted so that a run can be checked to leave the initialization untouched
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!(
                "learning rate must be >= 0, got {}",
                self.learning_rate
            ));
        }
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.eps_adam <= 0.0
        {
            return fail("Adam requires beta1, beta2 in [0, 1) and eps_adam > 0".into());
        }
        if self.bound_mc_draws == 0 {
            return fail("bound_mc_draws must be >= 1".into());
        }
        Ok(())
    }

    /// Chronological batch ranges over `m` examples.
    pub fn batches(&self, m: usize) -> Vec<Range<usize>> {
        let size = if self.batch_size == 0 {
            m
        } else {
            self.batch_size.min(m)
        };
        (0..m.div_ceil(size))
            .map(|k| k * size..((k + 1) * size).min(m))
            .collect()
    }
}

/// Dependence inputs of the bound, taken from the embedding plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dependence {
    pub lambda: f64,
    pub a: usize,
    pub p: usize,
}

impl Dependence {
    pub fn from_plan(plan: &EmbeddingPlan) -> Self {
        Self {
            lambda: plan.lambda,
            a: plan.a,
            p: plan.p,
        }
    }

    /// `exp(-λ (a - p))`.
    pub fn decay(&self) -> f64 {
        (-self.lambda * (self.a as f64 - self.p as f64)).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub final_target: f64,
    /// Target value at the initialization, before any update.
    pub initial_target: f64,
    /// Full training set target after each epoch.
    pub target_curve: Vec<f64>,
    pub kl: f64,
    pub mc_lip: f64,
    pub pac_bound: f64,
    pub rho_r: f64,
    pub wallclock_secs: f64,
    pub vacuous: bool,
}

/// `(KL + sqrt((2 KL + 1)(mc_lip D + 1))) / sqrt(m)`.
pub fn penalty_from_kl(kl: f64, mc_lip: f64, input_dim: usize, m: usize) -> f64 {
    let lip = mc_lip * input_dim as f64 + 1.0;
    (kl + ((2.0 * kl + 1.0) * lip).sqrt()) / (m as f64).sqrt()
}

fn penalty_slope(kl: f64, mc_lip: f64, input_dim: usize, m: usize) -> f64 {
    let lip = mc_lip * input_dim as f64 + 1.0;
    (1.0 + (lip / (2.0 * kl + 1.0)).sqrt()) / (m as f64).sqrt()
}

/// Training target `r̂ + (KL + sqrt((2 KL + 1)(mc_lip D + 1))) / sqrt(m)`.
pub fn target_value(
    rho: &GaussianPosterior,
    pi: &ReferenceDistribution,
    r_hat: f64,
    mc_lip: f64,
    input_dim: usize,
    m: usize,
) -> f64 {
    r_hat + penalty_from_kl(kl(rho, pi), mc_lip, input_dim, m)
}

/// Mean truncated loss of `h_θ` over `rows` of a feature set.
pub fn empirical_risk(
    ws: &mut Workspace,
    theta: &[f64],
    data: &FeatureSet,
    rows: Range<usize>,
    epsilon: f64,
) -> f64 {
    let n = rows.len();
    let total: f64 = rows
        .map(|r| truncated_loss(ws.forward(theta, data.input(r)), data.targets[r], epsilon))
        .sum();
    total / n as f64
}

/// Gradient of the training objective with respect to `(μ, raw_kappa)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveGradient {
    pub value: f64,
    pub mu: Vec<f64>,
    pub raw_kappa: Vec<f64>,
}

/// The training target over one batch with the reparameterization noise held
/// fixed, as a deterministic function of `(μ, raw_kappa)`.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub arch: &'a Architecture,
    pub data: &'a FeatureSet,
    pub pi: ReferenceDistribution,
    pub mc_lip: f64,
    pub epsilon: f64,
}

impl Objective<'_> {
    pub fn m(&self) -> usize {
        self.data.len()
    }

    pub fn penalty(&self, rho: &GaussianPosterior) -> f64 {
        penalty_from_kl(
            kl(rho, &self.pi),
            self.mc_lip,
            self.arch.input_dim,
            self.m(),
        )
    }

    /// Analytic gradient of the penalty; it depends on ρ only through KL.
    pub fn penalty_gradient(&self, rho: &GaussianPosterior) -> (Vec<f64>, Vec<f64>) {
        let s = self.pi.variance;
        let slope = penalty_slope(
            kl(rho, &self.pi),
            self.mc_lip,
            self.arch.input_dim,
            self.m(),
        );
        let g_mu = rho.mu.iter().map(|m| slope * m / s).collect();
        let g_raw = rho
            .raw_kappa
            .iter()
            .map(|&r| {
                let sd = softplus(r);
                slope * (sd / s - 1.0 / sd) * sigmoid(r)
            })
            .collect();
        (g_mu, g_raw)
    }

    pub fn value(&self, rho: &GaussianPosterior, noise: &[f64], batch: Range<usize>) -> f64 {
        let theta = rho.theta_from_noise(noise);
        let mut ws = Workspace::new(self.arch);
        empirical_risk(&mut ws, &theta, self.data, batch, self.epsilon) + self.penalty(rho)
    }

    pub fn gradient(
        &self,
        rho: &GaussianPosterior,
        noise: &[f64],
        batch: Range<usize>,
        ws: &mut Workspace,
    ) -> ObjectiveGradient {
        let theta = rho.theta_from_noise(noise);
        let n = batch.len() as f64;
        let mut g_theta = vec![0.0; theta.len()];
        let mut risk = 0.0;
        for r in batch {
            risk += ws.loss_and_grad(
                &theta,
                self.data.input(r),
                self.data.targets[r],
                self.epsilon,
                1.0 / n,
                &mut g_theta,
            );
        }
        let (mut g_mu, mut g_raw) = self.penalty_gradient(rho);
        for i in 0..theta.len() {
            g_mu[i] += g_theta[i];
            g_raw[i] += g_theta[i] * noise[i] * sigmoid(rho.raw_kappa[i]);
        }
        ObjectiveGradient {
            value: risk / n + self.penalty(rho),
            mu: g_mu,
            raw_kappa: g_raw,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], offset: usize, cfg: &TrainConfig) {
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grad).enumerate() {
            let k = offset + i;
            self.m[k] = cfg.beta1 * self.m[k] + (1.0 - cfg.beta1) * g;
            self.v[k] = cfg.beta2 * self.v[k] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[k] / c1;
            let v_hat = self.v[k] / c2;
            *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps_adam);
        }
    }
}

/// Posterior plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub rho: GaussianPosterior,
    adam: Adam,
}

impl TrainState {
    pub fn new(rho: GaussianPosterior) -> Self {
        let d = rho.dim();
        Self {
            rho,
            adam: Adam::new(2 * d),
        }
    }

    pub fn steps(&self) -> i32 {
        self.adam.t
    }
}

/// One Adam update from a single posterior draw on a chronological batch.
/// Returns the objective value at the pre-update parameters.
pub fn step<R: Rng + ?Sized>(
    state: &mut TrainState,
    objective: &Objective<'_>,
    batch: Range<usize>,
    cfg: &TrainConfig,
    rng: &mut R,
    ws: &mut Workspace,
) -> Result<f64> {
    if batch.is_empty() || batch.end > objective.m() {
        return Err(Error::invalid(format!(
            "batch {batch:?} outside 0..{}",
            objective.m()
        )));
    }
    let (_, noise) = state.rho.sample_theta(rng);
    let grad = objective.gradient(&state.rho, &noise, batch.clone(), ws);
    let bad = grad
        .mu
        .iter()
        .chain(&grad.raw_kappa)
        .position(|g| !g.is_finite());
    if let Some(i) = bad.or_else(|| (!grad.value.is_finite()).then_some(0)) {
        return Err(Error::Numeric(format!(
            "non-finite gradient at step {} (batch {batch:?}, coordinate {i}, objective {}, KL {})",
            state.adam.t + 1,
            grad.value,
            kl(&state.rho, &objective.pi)
        )));
    }
    let d = state.rho.dim();
    state.adam.t += 1;
    state.adam.update(&mut state.rho.mu, &grad.mu, 0, cfg);
    state
        .adam
        .update(&mut state.rho.raw_kappa, &grad.raw_kappa, d, cfg);
    Ok(grad.value)
}

/// Post-training bound components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub rho_r: f64,
    pub kl: f64,
    pub bound: f64,
}

/// Assemble the bound from its empirical and divergence parts.
pub fn pac_bound_from_parts(
    rho_r: f64,
    kl: f64,
    mc_lip: f64,
    input_dim: usize,
    m: usize,
    cfg: &TrainConfig,
    dep: &Dependence,
) -> f64 {
    let sqrt_m = (m as f64).sqrt();
    let lip = mc_lip * input_dim as f64 + 1.0;
    let dependence = (cfg.epsilon / cfg.delta * 2.0 * lip * dep.decay() * (2.0 * kl + 1.0)).sqrt();
    rho_r
        + (kl + (1.0 / cfg.delta).ln()) / sqrt_m
        + cfg.epsilon * cfg.epsilon / (2.0 * sqrt_m)
        + dependence
}

/// Generalization bound for a trained posterior; `ρ*[r]` is averaged over
/// `cfg.bound_mc_draws` posterior draws on the full training set.
#[allow(clippy::too_many_arguments)]
pub fn pac_bound<R: Rng + ?Sized>(
    rho: &GaussianPosterior,
    pi: &ReferenceDistribution,
    data: &FeatureSet,
    arch: &Architecture,
    cfg: &TrainConfig,
    mc_lip: f64,
    dep: &Dependence,
    rng: &mut R,
) -> BoundReport {
    let mut ws = Workspace::new(arch);
    let total: f64 = (0..cfg.bound_mc_draws)
        .map(|_| {
            let (theta, _) = rho.sample_theta(rng);
            empirical_risk(&mut ws, &theta, data, 0..data.len(), cfg.epsilon)
        })
        .sum();
    let rho_r = total / cfg.bound_mc_draws as f64;
    let kl = kl(rho, pi);
    BoundReport {
        rho_r,
        kl,
        bound: pac_bound_from_parts(rho_r, kl, mc_lip, arch.input_dim, data.len(), cfg, dep),
    }
}

fn check_training_data(data: &FeatureSet, arch: &Architecture) -> Result<()> {
    if data.role != Role::Train {
        return Err(Error::invalid(format!(
            "expected training features, got {}",
            data.role.as_str()
        )));
    }
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if data.dim != arch.input_dim {
        return Err(Error::invalid(format!(
            "feature dimension {} does not match network input {}",
            data.dim, arch.input_dim
        )));
    }
    Ok(())
}

/// Estimate `π[Lip(h_θ)]` from the stream reserved for `seed`.
pub fn reference_lipschitz(
    arch: &Architecture,
    pi: &ReferenceDistribution,
    seed: u64,
) -> Result<f64> {
    mc_lip_reference(
        arch,
        pi,
        LIP_MC_DRAWS,
        &mut rng::stream(seed, &[rng::stage::MC_LIP]),
    )
}

/// Train with `mc_lip` estimated from `cfg.seed`.
pub fn train(
    data: &FeatureSet,
    arch: &Architecture,
    pi: &ReferenceDistribution,
    cfg: &TrainConfig,
    dep: &Dependence,
) -> Result<(GaussianPosterior, TrainReport)> {
    let mc_lip = reference_lipschitz(arch, pi, cfg.seed)?;
    train_with_lip(data, arch, pi, cfg, dep, mc_lip)
}

/// Train from `N(0, ¼ I)` given a precomputed `π[Lip(h_θ)]` estimate.
pub fn train_with_lip(
    data: &FeatureSet,
    arch: &Architecture,
    pi: &ReferenceDistribution,
    cfg: &TrainConfig,
    dep: &Dependence,
    mc_lip: f64,
) -> Result<(GaussianPosterior, TrainReport)> {
    cfg.validate()?;
    check_training_data(data, arch)?;
    let started = Instant::now();
    let objective = Objective {
        arch,
        data,
        pi: *pi,
        mc_lip,
        epsilon: cfg.epsilon,
    };
    let m = data.len();
    let mut steps_rng = rng::stream(cfg.seed, &[rng::stage::TRAIN, 0]);
    let mut log_rng = rng::stream(cfg.seed, &[rng::stage::TRAIN, 1]);
    let mut bound_rng = rng::stream(cfg.seed, &[rng::stage::BOUND]);
    let mut ws = Workspace::new(arch);

    let mut full_target = |rho: &GaussianPosterior, ws: &mut Workspace| {
        let (theta, _) = rho.sample_theta(&mut log_rng);
        empirical_risk(ws, &theta, data, 0..m, cfg.epsilon) + objective.penalty(rho)
    };

    let mut state = TrainState::new(GaussianPosterior::initial(arch.param_count()));
    let initial_target = full_target(&state.rho, &mut ws);
    let batches = cfg.batches(m);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        for batch in &batches {
            step(
                &mut state,
                &objective,
                batch.clone(),
                cfg,
                &mut steps_rng,
                &mut ws,
            )?;
        }
        curve.push(full_target(&state.rho, &mut ws));
    }

    let rho = state.rho;
    let bound = pac_bound(&rho, pi, data, arch, cfg, mc_lip, dep, &mut bound_rng);
    let report = TrainReport {
        final_target: *curve.last().unwrap(),
        initial_target,
        target_curve: curve,
        kl: bound.kl,
        mc_lip,
        pac_bound: bound.bound,
        rho_r: bound.rho_r,
        wallclock_secs: started.elapsed().as_secs_f64(),
        vacuous: bound.bound >= cfg.epsilon,
    };
    Ok((rho, report))
}

/// A trained posterior as persisted on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorFile {
    pub arch: ArchSpec,
    pub input_dim: usize,
    pub position: usize,
    /// Reference grid value; the reference is `N(0, s⁻¹ I)`.
    pub s: f64,
    pub reference_variance: f64,
    pub d: usize,
    pub mu: Vec<f64>,
    pub raw_kappa: Vec<f64>,
    pub report: TrainReport,
}

impl PosteriorFile {
    pub fn new(
        arch: ArchSpec,
        position: usize,
        s: f64,
        rho: &GaussianPosterior,
        report: TrainReport,
        input_dim: usize,
    ) -> Self {
        Self {
            arch,
            input_dim,
            position,
            s,
            reference_variance: 1.0 / s,
            d: rho.dim(),
            mu: rho.mu.clone(),
            raw_kappa: rho.raw_kappa.clone(),
            report,
        }
    }

    pub fn file_name(position: usize) -> String {
        format!("posterior_pos{position}.json")
    }

    pub fn architecture(&self) -> Architecture {
        self.arch.with_input(self.input_dim)
    }

    pub fn posterior(&self) -> GaussianPosterior {
        GaussianPosterior {
            mu: self.mu.clone(),
            raw_kappa: self.raw_kappa.clone(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file: Self = crate::io::read_json(path)?;
        let d = file.architecture().param_count();
        if file.d != d || file.mu.len() != d || file.raw_kappa.len() != d {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: format!(
                    "posterior arrays do not match architecture {} (d = {d})",
                    file.arch
                ),
            });
        }
        Ok(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn toy_set(xs: &[f64], ys: &[f64]) -> FeatureSet {
        FeatureSet {
            position: 0,
            role: Role::Train,
            dim: 1,
            inputs: xs.to_vec(),
            targets: ys.to_vec(),
            indices: (1..=xs.len()).collect(),
        }
    }

    fn random_set(n: usize, dim: usize, seed: u64) -> FeatureSet {
        let mut s = rng::stream(seed, &[]);
        let inputs: Vec<f64> = (0..n * dim)
            .map(|_| StandardNormal.sample(&mut s))
            .collect();
        let targets = (0..n)
            .map(|r| {
                inputs[r * dim] * 0.5 + {
                    let z: f64 = StandardNormal.sample(&mut s);
                    0.3 * z
                }
            })
            .collect();
        FeatureSet {
            position: 0,
            role: Role::Train,
            dim,
            inputs,
            targets,
            indices: (1..=n).collect(),
        }
    }

    const NO_DEPENDENCE: Dependence = Dependence {
        lambda: f64::INFINITY,
        a: 2,
        p: 1,
    };

    #[test]
    fn truncated_loss_examples() {
        assert_eq!(truncated_loss(5.0, 1.0, 3.0), 3.0);
        assert_eq!(truncated_loss(2.0, 1.0, 3.0), 1.0);
        assert_eq!(truncated_loss(0.7, 0.7, 3.0), 0.0);
    }

    #[test]
    fn target_arithmetic() {
        assert!((penalty_from_kl(0.0, 1.0, 3, 4) - 1.0).abs() < 1e-15);
        assert!((penalty_from_kl(0.0, 0.0, 17, 1) - 1.0).abs() < 1e-15);
        let mut last = penalty_from_kl(0.0, 0.4, 3, 100);
        for k in 1..50 {
            let next = penalty_from_kl(k as f64 * 0.3, 0.4, 3, 100);
            assert!(next > last);
            last = next;
        }
        let rho = GaussianPosterior::isotropic(4, 2.0);
        let pi = ReferenceDistribution::new(2.0).unwrap();
        assert!((target_value(&rho, &pi, 0.25, 1.0, 3, 4) - 1.25).abs() < 1e-12);
    }

    #[test]
    fn batches_are_chronological_and_cover() {
        let cfg = TrainConfig {
            batch_size: 4,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.batches(10), vec![0..4, 4..8, 8..10]);
        let full = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert_eq!(full.batches(7), vec![0..7]);
    }

    fn perturbed_posterior(d: usize, seed: u64) -> GaussianPosterior {
        let mut s = rng::stream(seed, &[]);
        GaussianPosterior {
            mu: (0..d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut s);
                    0.5 * z
                })
                .collect(),
            raw_kappa: (0..d)
                .map(|_| {
                    -0.5 + {
                        let z: f64 = StandardNormal.sample(&mut s);
                        0.3 * z
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let arch = Architecture::new(3, vec![4]);
        let data = random_set(50, 3, 2);
        let obj = Objective {
            arch: &arch,
            data: &data,
            pi: ReferenceDistribution::new(0.1).unwrap(),
            mc_lip: 0.8,
            epsilon: 3.0,
        };
        let rho = perturbed_posterior(arch.param_count(), 4);
        let (g_mu, g_raw) = obj.penalty_gradient(&rho);
        let h = 1e-5;
        for i in 0..rho.dim() {
            for (which, g) in [(0, g_mu[i]), (1, g_raw[i])] {
                let mut up = rho.clone();
                let mut dn = rho.clone();
                let (u, d) = if which == 0 {
                    (&mut up.mu[i], &mut dn.mu[i])
                } else {
                    (&mut up.raw_kappa[i], &mut dn.raw_kappa[i])
                };
                *u += h;
                *d -= h;
                let fd = (obj.penalty(&up) - obj.penalty(&dn)) / (2.0 * h);
                let err = (fd - g).abs() / g.abs().max(1e-12);
                assert!(err < 1e-8, "coordinate {i}/{which}: {g} vs {fd}");
            }
        }
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let arch = Architecture::new(3, vec![5, 4]);
        let data = random_set(40, 3, 8);
        let obj = Objective {
            arch: &arch,
            data: &data,
            pi: ReferenceDistribution::new(0.2).unwrap(),
            mc_lip: 1.3,
            epsilon: 1.0,
        };
        let d = arch.param_count();
        let rho = perturbed_posterior(d, 9);
        let mut s = rng::stream(10, &[]);
        let noise: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut s)).collect();
        let mut ws = Workspace::new(&arch);
        let g = obj.gradient(&rho, &noise, 5..35, &mut ws);
        let h = 1e-6;
        let mut diff2 = 0.0;
        let mut norm2 = 0.0;
        for i in 0..d {
            for which in 0..2 {
                let mut up = rho.clone();
                let mut dn = rho.clone();
                if which == 0 {
                    up.mu[i] += h;
                    dn.mu[i] -= h;
                } else {
                    up.raw_kappa[i] += h;
                    dn.raw_kappa[i] -= h;
                }
                let fd =
                    (obj.value(&up, &noise, 5..35) - obj.value(&dn, &noise, 5..35)) / (2.0 * h);
                let an = if which == 0 { g.mu[i] } else { g.raw_kappa[i] };
                diff2 += (fd - an).powi(2);
                norm2 += fd * fd;
            }
        }
        assert!(
            (diff2 / norm2).sqrt() < 1e-4,
            "relative error {}",
            (diff2 / norm2).sqrt()
        );
    }

    #[test]
    fn zero_learning_rate_keeps_initialization() {
        let arch = Architecture::new(2, vec![3]);
        let data = random_set(30, 2, 1);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 1,
            batch_size: 7,
            ..TrainConfig::default()
        };
        let pi = ReferenceDistribution::from_precision(30.0).unwrap();
        let (rho, report) = train(&data, &arch, &pi, &cfg, &NO_DEPENDENCE).unwrap();
        assert_eq!(rho, GaussianPosterior::initial(arch.param_count()));
        assert_eq!(report.target_curve.len(), 1);
        assert!(TrainConfig { epochs: 0, ..cfg }.validate().is_err());
    }

    #[test]
    fn plateau_loss_only_shrinks_mean() {
        let arch = Architecture::new(1, vec![2]);
        // targets far beyond ε: every loss sits on the plateau
        let data = toy_set(&[0.1, 0.2, 0.3], &[1e6, 1e6, 1e6]);
        let obj = Objective {
            arch: &arch,
            data: &data,
            pi: ReferenceDistribution::new(1.0).unwrap(),
            mc_lip: 1.0,
            epsilon: 3.0,
        };
        let mut rho = GaussianPosterior::initial(arch.param_count());
        rho.mu = vec![0.8, -0.6, 0.4, -0.9, 0.7, 0.5, -0.3];
        let before: Vec<f64> = rho.mu.iter().map(|m| m.abs()).collect();
        let mut state = TrainState::new(rho);
        let cfg = TrainConfig {
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let mut s = rng::stream(3, &[]);
        let mut ws = Workspace::new(&arch);
        step(&mut state, &obj, 0..3, &cfg, &mut s, &mut ws).unwrap();
        for (b, a) in before.iter().zip(&state.rho.mu) {
            assert!(a.abs() < *b);
        }
    }

    #[test]
    fn linear_toy_reduces_risk() {
        let xs: Vec<f64> = (0..200).map(|i| 0.05 + i as f64 / 200.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x).collect();
        let data = toy_set(&xs, &ys);
        let arch = Architecture::new(1, vec![1]);
        let pi = ReferenceDistribution::new(1.0).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.02,
            batch_size: 20,
            epochs: 40,
            seed: 12,
            ..TrainConfig::default()
        };
        let (rho, report) = train(&data, &arch, &pi, &cfg, &NO_DEPENDENCE).unwrap();
        let mut s = rng::stream(99, &[]);
        let init = pac_bound(
            &GaussianPosterior::initial(3),
            &pi,
            &data,
            &arch,
            &cfg,
            report.mc_lip,
            &NO_DEPENDENCE,
            &mut s,
        );
        assert!(
            report.rho_r < init.rho_r,
            "{} vs {}",
            report.rho_r,
            init.rho_r
        );
        assert!(rho.mu[2] * rho.mu[0] > 0.0);
    }

    #[test]
    fn training_is_deterministic() {
        let arch = Architecture::new(3, vec![4, 4]);
        let data = random_set(120, 3, 6);
        let pi = ReferenceDistribution::from_precision(10.0).unwrap();
        let cfg = TrainConfig {
            learning_rate: 5e-3,
            batch_size: 25,
            epochs: 3,
            seed: 77,
            ..TrainConfig::default()
        };
        let (a, ra) = train(&data, &arch, &pi, &cfg, &NO_DEPENDENCE).unwrap();
        let (b, rb) = train(&data, &arch, &pi, &cfg, &NO_DEPENDENCE).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.target_curve, rb.target_curve);
        assert_eq!(ra.pac_bound, rb.pac_bound);
    }

    #[test]
    fn bound_components() {
        let cfg = TrainConfig::default();
        let m = 400;
        let base = 0.2 + (1.5 + (40f64).ln()) / 20.0 + 9.0 / 40.0;
        let limit = pac_bound_from_parts(0.2, 1.5, 0.7, 3, m, &cfg, &NO_DEPENDENCE);
        assert!((limit - base).abs() < 1e-12);
        let dep = Dependence {
            lambda: 0.5,
            a: 5,
            p: 1,
        };
        let with = pac_bound_from_parts(0.2, 1.5, 0.7, 3, m, &cfg, &dep);
        let extra = (3.0 / 0.025 * 2.0 * (0.7 * 3.0 + 1.0) * (-2.0f64).exp() * 4.0).sqrt();
        assert!((with - base - extra).abs() < 1e-12);
        assert!(with >= 0.2);
    }

    #[test]
    fn rejects_mismatched_data() {
        let arch = Architecture::new(2, vec![3]);
        let data = random_set(10, 3, 0);
        let pi = ReferenceDistribution::new(1.0).unwrap();
        assert!(train(&data, &arch, &pi, &TrainConfig::default(), &NO_DEPENDENCE).is_err());
        let mut val = random_set(10, 2, 0);
        val.role = Role::Validation;
        assert!(train(&val, &arch, &pi, &TrainConfig::default(), &NO_DEPENDENCE).is_err());
    }

    #[test]
    fn posterior_file_round_trip() {
        let arch = ArchSpec {
            width: 3,
            layers: 1,
        };
        let rho = perturbed_posterior(arch.with_input(2).param_count(), 1);
        let report = TrainReport {
            final_target: 1.0,
            initial_target: 2.0,
            target_curve: vec![1.5, 1.0],
            kl: 0.3,
            mc_lip: 0.9,
            pac_bound: 1.2,
            rho_r: 0.1,
            wallclock_secs: 0.0,
            vacuous: false,
        };
        let file = PosteriorFile::new(arch, 4, 30.0, &rho, report, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(PosteriorFile::file_name(4));
        file.save(&path).unwrap();
        assert_eq!(PosteriorFile::load(&path).unwrap(), file);
        let mut broken = file.clone();
        broken.mu.pop();
        broken.save(&path).unwrap();
        assert!(PosteriorFile::load(&path).is_err());
    }
}
