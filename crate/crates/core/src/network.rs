//! Feed-forward ReLU networks over a flat parameter vector and the
//! diagonal-Gaussian family used as the generalized posterior.
//!
//! Parameter layout (layer-major): `W1` row-major (`n1 × D`), `b1`, `W2`,
//! `b2`, ..., `Wℓ`, `bℓ`, `W(ℓ+1)` (`1 × nℓ`). The output layer has no bias.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
}

/// Hidden-layer specification `w^l` (`l` layers of width `w`), independent of
/// the input dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ArchSpec {
    pub width: usize,
    pub layers: usize,
}

impl ArchSpec {
    pub fn with_input(self, input_dim: usize) -> Architecture {
        Architecture::new(input_dim, vec![self.width; self.layers])
    }
}

impl FromStr for ArchSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("architecture `{s}` is not of the form `w^l`"));
        let (w, l) = s.trim().split_once('^').ok_or_else(bad)?;
        let width: usize = w.trim().parse().map_err(|_| bad())?;
        let layers: usize = l.trim().parse().map_err(|_| bad())?;
        if width == 0 || layers == 0 {
            return Err(bad());
        }
        Ok(Self { width, layers })
    }
}

impl TryFrom<String> for ArchSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ArchSpec> for String {
    fn from(a: ArchSpec) -> String {
        a.to_string()
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}^{}", self.width, self.layers)
    }
}

/// Offsets of one layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct LayerSlot {
    rows: usize,
    cols: usize,
    weight: usize,
    bias: Option<usize>,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden: Vec<usize>) -> Self {
        Self { input_dim, hidden }
    }

    /// Widths `n0 = D, n1, ..., nℓ, 1`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend(&self.hidden);
        w.push(1);
        w
    }

    pub fn param_count(&self) -> usize {
        let w = self.widths();
        let weights: usize = w.windows(2).map(|p| p[0] * p[1]).sum();
        weights + self.hidden.iter().sum::<usize>()
    }

    fn slots(&self) -> Vec<LayerSlot> {
        let w = self.widths();
        let last = w.len() - 2;
        let mut offset = 0;
        let mut slots = Vec::with_capacity(w.len() - 1);
        for (i, pair) in w.windows(2).enumerate() {
            let (cols, rows) = (pair[0], pair[1]);
            let weight = offset;
            offset += rows * cols;
            let bias = (i < last).then(|| {
                let b = offset;
                offset += rows;
                b
            });
            slots.push(LayerSlot {
                rows,
                cols,
                weight,
                bias,
            });
        }
        slots
    }

    /// Ranges of the weight matrices `(offset, rows, cols)` in layer order.
    pub fn weight_blocks(&self) -> Vec<(usize, usize, usize)> {
        self.slots()
            .iter()
            .map(|s| (s.weight, s.rows, s.cols))
            .collect()
    }

    fn check(&self, theta: &[f64], x: &[f64]) -> Result<()> {
        if theta.len() != self.param_count() {
            return Err(Error::invalid(format!(
                "parameter vector has length {}, architecture needs {}",
                theta.len(),
                self.param_count()
            )));
        }
        if x.len() != self.input_dim {
            return Err(Error::invalid(format!(
                "input has length {}, architecture expects {}",
                x.len(),
                self.input_dim
            )));
        }
        Ok(())
    }
}

/// Scratch buffers for repeated forward/backward passes.
#[derive(Debug, Clone)]
pub struct Workspace {
    slots: Vec<LayerSlot>,
    /// Post-activation outputs per hidden layer.
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_next: Vec<f64>,
}

impl Workspace {
    pub fn new(arch: &Architecture) -> Self {
        let slots = arch.slots();
        let widest = arch.widths().into_iter().max().unwrap_or(1);
        Self {
            acts: arch.hidden.iter().map(|&n| vec![0.0; n]).collect(),
            slots,
            delta: vec![0.0; widest],
            delta_next: vec![0.0; widest],
        }
    }

    /// Network output; keeps hidden activations for a following backward pass.
    pub fn forward(&mut self, theta: &[f64], x: &[f64]) -> f64 {
        let n_hidden = self.acts.len();
        for li in 0..n_hidden {
            let s = self.slots[li];
            let (prev, rest) = self.acts.split_at_mut(li);
            let input: &[f64] = if li == 0 { x } else { &prev[li - 1] };
            let out = &mut rest[0];
            let bias = &theta[s.bias.unwrap()..s.bias.unwrap() + s.rows];
            for r in 0..s.rows {
                let row = &theta[s.weight + r * s.cols..s.weight + (r + 1) * s.cols];
                let z = dot(row, input) + bias[r];
                out[r] = if z > 0.0 { z } else { 0.0 };
            }
        }
        let s = self.slots[n_hidden];
        let input: &[f64] = if n_hidden == 0 {
            x
        } else {
            &self.acts[n_hidden - 1]
        };
        dot(&theta[s.weight..s.weight + s.cols], input)
    }

    /// Add `scale · ∇θ h(x)` into `grad`; must follow `forward` on the same input.
    pub fn accumulate_output_grad(
        &mut self,
        theta: &[f64],
        x: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) {
        let n_hidden = self.acts.len();
        let s = self.slots[n_hidden];
        let input: &[f64] = if n_hidden == 0 {
            x
        } else {
            &self.acts[n_hidden - 1]
        };
        for (g, a) in grad[s.weight..s.weight + s.cols].iter_mut().zip(input) {
            *g += scale * a;
        }
        if n_hidden == 0 {
            return;
        }
        // delta holds ∂(scale·h)/∂(post-activation) of the layer being processed
        for (d, w) in self.delta[..s.cols]
            .iter_mut()
            .zip(&theta[s.weight..s.weight + s.cols])
        {
            *d = scale * w;
        }
        for li in (0..n_hidden).rev() {
            let s = self.slots[li];
            let out = &self.acts[li];
            // ReLU derivative (subgradient 0 at the kink)
            for (d, &a) in self.delta[..s.rows].iter_mut().zip(&out[..s.rows]) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
            let input: &[f64] = if li == 0 { x } else { &self.acts[li - 1] };
            let bias = s.bias.unwrap();
            for r in 0..s.rows {
                let d = self.delta[r];
                if d == 0.0 {
                    continue;
                }
                grad[bias + r] += d;
                let grow = &mut grad[s.weight + r * s.cols..s.weight + (r + 1) * s.cols];
                for (g, a) in grow.iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            if li > 0 {
                let next = &mut self.delta_next[..s.cols];
                next.iter_mut().for_each(|v| *v = 0.0);
                for r in 0..s.rows {
                    let d = self.delta[r];
                    if d == 0.0 {
                        continue;
                    }
                    let row = &theta[s.weight + r * s.cols..s.weight + (r + 1) * s.cols];
                    for (n, w) in next.iter_mut().zip(row) {
                        *n += d * w;
                    }
                }
                std::mem::swap(&mut self.delta, &mut self.delta_next);
            }
        }
    }

    /// Distance of `(θ, x, y)` to the nearest non-differentiable point: the
    /// smallest of every hidden pre-activation magnitude, `|h - y|` and
    /// `|ε - |h - y||`.
    pub fn kink_margin(&mut self, theta: &[f64], x: &[f64], y: f64, epsilon: f64) -> f64 {
        let mut margin = f64::INFINITY;
        let n_hidden = self.acts.len();
        for li in 0..n_hidden {
            let s = self.slots[li];
            let (prev, rest) = self.acts.split_at_mut(li);
            let input: &[f64] = if li == 0 { x } else { &prev[li - 1] };
            let out = &mut rest[0];
            let bias = s.bias.unwrap();
            for r in 0..s.rows {
                let row = &theta[s.weight + r * s.cols..s.weight + (r + 1) * s.cols];
                let z = dot(row, input) + theta[bias + r];
                margin = margin.min(z.abs());
                out[r] = z.max(0.0);
            }
        }
        let s = self.slots[n_hidden];
        let input: &[f64] = if n_hidden == 0 {
            x
        } else {
            &self.acts[n_hidden - 1]
        };
        let diff = (dot(&theta[s.weight..s.weight + s.cols], input) - y).abs();
        margin.min(diff).min((epsilon - diff).abs())
    }

    /// Truncated absolute loss at `(x, y)`; adds `scale · ∇θ loss` into `grad`.
    pub fn loss_and_grad(
        &mut self,
        theta: &[f64],
        x: &[f64],
        y: f64,
        epsilon: f64,
        scale: f64,
        grad: &mut [f64],
    ) -> f64 {
        let diff = self.forward(theta, x) - y;
        let abs = diff.abs();
        if abs >= epsilon {
            return epsilon;
        }
        if diff != 0.0 {
            self.accumulate_output_grad(theta, x, scale * diff.signum(), grad);
        }
        abs
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `h_θ(x)`.
pub fn forward(arch: &Architecture, theta: &[f64], x: &[f64]) -> Result<f64> {
    arch.check(theta, x)?;
    Ok(Workspace::new(arch).forward(theta, x))
}

/// `|x - y| ∧ ε`.
pub fn truncated_loss(prediction: f64, target: f64, epsilon: f64) -> f64 {
    (prediction - target).abs().min(epsilon)
}

/// Gradient of `|h_θ(x) - y| ∧ ε` with respect to θ (zero on the plateau and at kinks).
pub fn backward(
    arch: &Architecture,
    theta: &[f64],
    x: &[f64],
    y: f64,
    epsilon: f64,
) -> Result<Vec<f64>> {
    arch.check(theta, x)?;
    let mut grad = vec![0.0; theta.len()];
    Workspace::new(arch).loss_and_grad(theta, x, y, epsilon, 1.0, &mut grad);
    Ok(grad)
}

const POWER_TOL: f64 = 1e-8;
const POWER_MAX_ITERS: usize = 200;

/// Largest singular value of a row-major `rows × cols` matrix by power
/// iteration on `WᵀW` from the normalized all-ones vector.
pub fn spectral_norm(m: &[f64], rows: usize, cols: usize) -> f64 {
    debug_assert_eq!(m.len(), rows * cols);
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
    let mut u = vec![0.0; rows];
    let mut sigma = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        for (r, ur) in u.iter_mut().enumerate() {
            *ur = dot(&m[r * cols..(r + 1) * cols], &v);
        }
        let nu = norm(&u);
        if nu == 0.0 {
            return 0.0;
        }
        u.iter_mut().for_each(|x| *x /= nu);
        v.iter_mut().for_each(|x| *x = 0.0);
        for (r, &ur) in u.iter().enumerate() {
            for (vc, w) in v.iter_mut().zip(&m[r * cols..(r + 1) * cols]) {
                *vc += ur * w;
            }
        }
        let next = norm(&v);
        if next == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= next);
        let done = (next - sigma).abs() <= POWER_TOL * next;
        sigma = next;
        if done {
            break;
        }
    }
    sigma
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `Π ||W(i)||₂` over all weight matrices, an upper bound on `Lip(h_θ)`.
pub fn lipschitz_bound(arch: &Architecture, theta: &[f64]) -> Result<f64> {
    if theta.len() != arch.param_count() {
        return Err(Error::invalid(
            "parameter vector length does not match architecture",
        ));
    }
    Ok(arch
        .weight_blocks()
        .into_iter()
        .map(|(off, rows, cols)| spectral_norm(&theta[off..off + rows * cols], rows, cols))
        .product())
}

/// Isotropic zero-mean Gaussian reference distribution `N(0, variance · I)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceDistribution {
    pub variance: f64,
}

impl ReferenceDistribution {
    pub fn new(variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::Config(format!(
                "reference variance must be > 0, got {variance}"
            )));
        }
        Ok(Self { variance })
    }

    /// `N(0, s⁻¹ I)` for a grid value `s`.
    pub fn from_precision(s: f64) -> Result<Self> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Config(format!(
                "reference precision must be > 0, got {s}"
            )));
        }
        Self::new(1.0 / s)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of softplus for positive arguments.
fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// `N(μ, diag(κ))` with `κ = softplus(raw_kappa)²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mu: Vec<f64>,
    pub raw_kappa: Vec<f64>,
}

impl GaussianPosterior {
    /// `μ = 0`, `κ = variance` in every coordinate.
    pub fn isotropic(d: usize, variance: f64) -> Self {
        let raw = softplus_inv(variance.sqrt());
        Self {
            mu: vec![0.0; d],
            raw_kappa: vec![raw; d],
        }
    }

    /// Training initialization `N(0, ¼ I)`.
    pub fn initial(d: usize) -> Self {
        Self::isotropic(d, 0.25)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Standard deviation `sqrt(κ_i)`.
    pub fn std_dev(&self, i: usize) -> f64 {
        softplus(self.raw_kappa[i])
    }

    pub fn kappa(&self, i: usize) -> f64 {
        self.std_dev(i).powi(2)
    }

    /// θ = μ + sqrt(κ) ⊙ ε, returned with the noise ε.
    pub fn sample_theta<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let eps: Vec<f64> = (0..self.dim())
            .map(|_| StandardNormal.sample(rng))
            .collect();
        let theta = self.theta_from_noise(&eps);
        (theta, eps)
    }

    pub fn theta_from_noise(&self, eps: &[f64]) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.raw_kappa)
            .zip(eps)
            .map(|((m, r), e)| m + softplus(*r) * e)
            .collect()
    }
}

/// `KL(ρ, π) = ½ Σ (ln(s/κ_i) − 1 + κ_i/s + μ_i²/s)`.
pub fn kl(rho: &GaussianPosterior, pi: &ReferenceDistribution) -> f64 {
    let s = pi.variance;
    0.5 * rho
        .mu
        .iter()
        .zip(&rho.raw_kappa)
        .map(|(m, r)| {
            let sd = softplus(*r);
            let k = sd * sd;
            2.0 * (s.sqrt() / sd).ln() - 1.0 + k / s + m * m / s
        })
        .sum::<f64>()
}

/// Monte Carlo estimate of `π[Lip(h_θ)]` from `n` draws of the weight matrices.
pub fn mc_lip_reference<R: Rng + ?Sized>(
    arch: &Architecture,
    pi: &ReferenceDistribution,
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("Monte Carlo size must be >= 1"));
    }
    let sd = pi.variance.sqrt();
    let blocks = arch.weight_blocks();
    let mut buf = Vec::new();
    let mut total = 0.0;
    for _ in 0..n {
        let mut prod = 1.0;
        for &(_, rows, cols) in &blocks {
            buf.clear();
            buf.extend((0..rows * cols).map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                sd * z
            }));
            prod *= spectral_norm(&buf, rows, cols);
        }
        total += prod;
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn random_theta(arch: &Architecture, seed: u64, scale: f64) -> Vec<f64> {
        let mut s = rng::stream(seed, &[]);
        (0..arch.param_count())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut s);
                scale * z
            })
            .collect()
    }

    /// Straightforward matrix-by-matrix evaluation, written independently of
    /// the workspace code path.
    fn reference_forward(arch: &Architecture, theta: &[f64], x: &[f64]) -> f64 {
        let widths = arch.widths();
        let mut h = x.to_vec();
        let mut off = 0;
        for l in 0..widths.len() - 1 {
            let (n_in, n_out) = (widths[l], widths[l + 1]);
            let w: Vec<Vec<f64>> = (0..n_out)
                .map(|r| theta[off + r * n_in..off + (r + 1) * n_in].to_vec())
                .collect();
            off += n_in * n_out;
            let mut z: Vec<f64> = w
                .iter()
                .map(|row| row.iter().zip(&h).map(|(a, b)| a * b).sum())
                .collect();
            if l + 1 < widths.len() - 1 {
                for (zi, b) in z.iter_mut().zip(&theta[off..off + n_out]) {
                    *zi = (*zi + b).max(0.0);
                }
                off += n_out;
            }
            h = z;
        }
        assert_eq!(off, theta.len());
        h[0]
    }

    #[test]
    fn parameter_count_excludes_output_bias() {
        let arch = ArchSpec::from_str("10^2").unwrap().with_input(3);
        assert_eq!(arch.param_count(), 3 * 10 + 10 + 10 * 10 + 10 + 10);
        assert_eq!("300^2".parse::<ArchSpec>().unwrap().to_string(), "300^2");
        assert!("10x2".parse::<ArchSpec>().is_err());
        assert!("0^2".parse::<ArchSpec>().is_err());
    }

    #[test]
    fn zero_parameters_give_zero() {
        let arch = Architecture::new(4, vec![5, 3]);
        let theta = vec![0.0; arch.param_count()];
        assert_eq!(forward(&arch, &theta, &[1.0, -2.0, 3.0, 0.5]).unwrap(), 0.0);
    }

    #[test]
    fn relu_kills_negative_input() {
        let arch = Architecture::new(1, vec![1]);
        // W1 = [1], b1 = 0, W2 = [1]
        assert_eq!(forward(&arch, &[1.0, 0.0, 1.0], &[-3.0]).unwrap(), 0.0);
        assert_eq!(forward(&arch, &[1.0, 0.0, 1.0], &[2.0]).unwrap(), 2.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let arch = Architecture::new(2, vec![3]);
        assert!(forward(&arch, &[0.0; 5], &[1.0, 2.0]).is_err());
        assert!(forward(&arch, &vec![0.0; arch.param_count()], &[1.0]).is_err());
        assert!(backward(&arch, &[0.0; 5], &[1.0, 2.0], 0.0, 1.0).is_err());
    }

    #[test]
    fn forward_matches_reference_implementation() {
        for (i, hidden) in [vec![4], vec![6, 5], vec![3, 3, 3]].into_iter().enumerate() {
            let arch = Architecture::new(5, hidden);
            let theta = random_theta(&arch, i as u64, 0.7);
            let x = random_theta(&Architecture::new(5, vec![]), 100 + i as u64, 1.0);
            let x = &x[..5];
            let a = forward(&arch, &theta, x).unwrap();
            let b = reference_forward(&arch, &theta, x);
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn plateau_has_zero_gradient() {
        let arch = Architecture::new(2, vec![4]);
        let theta = random_theta(&arch, 3, 1.0);
        let h = forward(&arch, &theta, &[0.3, -0.2]).unwrap();
        let g = backward(&arch, &theta, &[0.3, -0.2], h + 10.0, 3.0).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_path_gradient() {
        // h(x) = w2 relu(w1 x + b1); with w1 = 1, b1 = 0, x = 1: h = w2
        let arch = Architecture::new(1, vec![1]);
        let w = 0.5;
        let g = backward(&arch, &[1.0, 0.0, w], &[1.0], 0.0, 3.0).unwrap();
        assert_eq!(g[2], 1.0);
        assert_eq!(g[0], w);
        assert_eq!(g[1], w);
    }

    /// Central differences of the truncated loss, rejecting points near kinks.
    fn fd_check(arch: &Architecture, seed: u64) -> Option<f64> {
        let theta = random_theta(arch, seed, 0.6);
        let x = &random_theta(&Architecture::new(arch.input_dim, vec![]), seed + 999, 1.0)
            [..arch.input_dim];
        let h = forward(arch, &theta, x).unwrap();
        let y = h - 0.7;
        let eps = 3.0;
        let mut ws = Workspace::new(arch);
        ws.forward(&theta, x);
        // reject inputs with pre-activations close to zero
        let mut probe = theta.clone();
        let step = 1e-6;
        let g = backward(arch, &theta, x, y, eps).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..theta.len() {
            probe[i] = theta[i] + step;
            let up = truncated_loss(forward(arch, &probe, x).unwrap(), y, eps);
            probe[i] = theta[i] - step;
            let dn = truncated_loss(forward(arch, &probe, x).unwrap(), y, eps);
            probe[i] = theta[i];
            let fd = (up - dn) / (2.0 * step);
            let err = (fd - g[i]).abs() / g[i].abs().max(fd.abs()).max(1e-3);
            if err > 1e-3 {
                // a kink was crossed within ±step
                return None;
            }
            worst = worst.max(err);
        }
        Some(worst)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let arch = Architecture::new(3, vec![6, 4]);
        let mut checked = 0;
        for seed in 0..1000 {
            if let Some(err) = fd_check(&arch, seed) {
                assert!(err < 1e-5, "seed {seed}: rel err {err}");
                checked += 1;
            }
        }
        assert!(checked > 900, "only {checked} smooth points");
    }

    #[test]
    fn spectral_norm_closed_forms() {
        assert!((spectral_norm(&[2.0], 1, 1) - 2.0).abs() < 1e-12);
        assert_eq!(spectral_norm(&[0.0; 6], 2, 3), 0.0);
        let arch = Architecture::new(2, vec![2]);
        // W1 = 3 I, b1 = 0, W2 = [1, 1]
        let theta = [3.0, 0.0, 0.0, 3.0, 0.0, 0.0, 1.0, 1.0];
        let lip = lipschitz_bound(&arch, &theta).unwrap();
        assert!((lip - 3.0 * 2f64.sqrt()).abs() < 1e-9, "{lip}");
    }

    #[test]
    fn spectral_norm_matches_svd() {
        for seed in 0..20 {
            let arch = Architecture::new(20, vec![]);
            let mut s = rng::stream(seed, &[1]);
            let data: Vec<f64> = (0..400).map(|_| StandardNormal.sample(&mut s)).collect();
            let _ = arch;
            let m = nalgebra::DMatrix::from_row_slice(20, 20, &data);
            let top = m.singular_values().max();
            let est = spectral_norm(&data, 20, 20);
            assert!(
                (est - top).abs() / top < 1e-6,
                "seed {seed}: {est} vs {top}"
            );
        }
    }

    proptest! {
        #[test]
        fn forward_respects_lipschitz_bound(seed in any::<u64>(), scale in 0.1f64..2.0) {
            let arch = Architecture::new(4, vec![5, 5]);
            let theta = random_theta(&arch, seed, scale);
            let lip = lipschitz_bound(&arch, &theta).unwrap();
            let mut s = rng::stream(seed, &[9]);
            for _ in 0..20 {
                let x: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut s)).collect();
                let y: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut s)).collect();
                let dist = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let gap = (forward(&arch, &theta, &x).unwrap() - forward(&arch, &theta, &y).unwrap()).abs();
                prop_assert!(gap <= lip * dist * (1.0 + 1e-9) + 1e-12);
            }
        }

        #[test]
        fn kl_permutation_invariant(seed in any::<u64>()) {
            let mut s = rng::stream(seed, &[2]);
            let d = 7;
            let rho = GaussianPosterior {
                mu: (0..d).map(|_| StandardNormal.sample(&mut s)).collect(),
                raw_kappa: (0..d).map(|_| StandardNormal.sample(&mut s)).collect(),
            };
            let mut perm: Vec<usize> = (0..d).collect();
            perm.rotate_left((seed % d as u64) as usize);
            perm.swap(0, d - 1);
            let shuffled = GaussianPosterior {
                mu: perm.iter().map(|&i| rho.mu[i]).collect(),
                raw_kappa: perm.iter().map(|&i| rho.raw_kappa[i]).collect(),
            };
            let pi = ReferenceDistribution::new(0.3).unwrap();
            prop_assert!((kl(&rho, &pi) - kl(&shuffled, &pi)).abs() < 1e-12);
            prop_assert!(kl(&rho, &pi) >= 0.0);
        }
    }

    #[test]
    fn kl_closed_form_values() {
        let pi = ReferenceDistribution::new(2.0).unwrap();
        let at_ref = GaussianPosterior::isotropic(5, 2.0);
        assert!(kl(&at_ref, &pi).abs() < 1e-12);
        let one = GaussianPosterior {
            mu: vec![1.0],
            raw_kappa: vec![softplus_inv(1.0)],
        };
        let unit = ReferenceDistribution::new(1.0).unwrap();
        assert!((kl(&one, &unit) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut s = rng::stream(11, &[]);
        let d = 3;
        let rho = GaussianPosterior {
            mu: vec![0.4, -0.2, 0.1],
            raw_kappa: vec![-0.5, 0.3, -1.0],
        };
        let pi = ReferenceDistribution::new(0.8).unwrap();
        let n = 100_000;
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            let (theta, _) = rho.sample_theta(&mut s);
            let mut log_ratio = 0.0;
            for (i, &t) in theta.iter().enumerate().take(d) {
                let k = rho.kappa(i);
                let lq = -0.5 * (k.ln() + (t - rho.mu[i]).powi(2) / k);
                let lp = -0.5 * (pi.variance.ln() + t.powi(2) / pi.variance);
                log_ratio += lq - lp;
            }
            vals.push(log_ratio);
        }
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - kl(&rho, &pi)).abs() < 3.0 * se,
            "{mean} vs {}",
            kl(&rho, &pi)
        );
    }

    #[test]
    fn initial_posterior_has_quarter_variance() {
        let rho = GaussianPosterior::initial(4);
        for i in 0..4 {
            assert!((rho.kappa(i) - 0.25).abs() < 1e-14);
        }
    }

    #[test]
    fn sampling_moments() {
        let rho = GaussianPosterior {
            mu: vec![1.0, -2.0],
            raw_kappa: vec![0.2, -1.3],
        };
        let mut s = rng::stream(5, &[]);
        let n = 100_000;
        let draws: Vec<Vec<f64>> = (0..n).map(|_| rho.sample_theta(&mut s).0).collect();
        for i in 0..2 {
            let xs: Vec<f64> = draws.iter().map(|t| t[i]).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            let k = rho.kappa(i);
            assert!((mean - rho.mu[i]).abs() < 3.0 * (k / n as f64).sqrt());
            assert!(
                (var - k).abs() < 3.0 * k * (2.0 / n as f64).sqrt(),
                "{var} vs {k}"
            );
        }
        let collapsed = GaussianPosterior {
            mu: vec![0.5],
            raw_kappa: vec![-60.0],
        };
        let (theta, _) = collapsed.sample_theta(&mut s);
        assert!((theta[0] - 0.5).abs() < 1e-20);
    }

    #[test]
    fn mc_lip_reference_single_layer() {
        let arch = Architecture::new(1, vec![]);
        let unit = ReferenceDistribution::new(1.0).unwrap();
        let n = 100_000;
        let mut s = rng::stream(17, &[]);
        let est = mc_lip_reference(&arch, &unit, n, &mut s).unwrap();
        // E|N(0,1)| with standard error sqrt((1 - 2/π) / n)
        let want = (2.0 / std::f64::consts::PI).sqrt();
        let se = ((1.0 - 2.0 / std::f64::consts::PI) / n as f64).sqrt();
        assert!((est - want).abs() < 3.0 * se, "{est}");
        let mut s = rng::stream(17, &[]);
        let doubled =
            mc_lip_reference(&arch, &ReferenceDistribution::new(2.0).unwrap(), n, &mut s).unwrap();
        assert!((doubled / est - 2f64.sqrt()).abs() < 1e-12);
        let tiny = mc_lip_reference(
            &arch,
            &ReferenceDistribution::new(1e-30).unwrap(),
            10,
            &mut s,
        )
        .unwrap();
        assert!(tiny < 1e-14);
    }
}
