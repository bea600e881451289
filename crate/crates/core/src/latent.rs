//! Latent variables and codes: distributions, reparametrized sampling and
//! divergences.
//!
//! Each operation comes in two flavours. The plain functions work on owned
//! values and are what evaluation and the CLI use. The `*_var` functions
//! build the same math on a [`Graph`] so gradients reach the network heads;
//! their noise is passed in explicitly, which is what lets a gradient check
//! hold the draws fixed.

use rand::Rng;
use rand_distr::{Gumbel, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VoltaError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Diagonal Gaussian over `n` latent variables, `σ = exp(log_sigma)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

impl GaussianPosterior {
    pub fn new(mu: Vec<f64>, log_sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != log_sigma.len() {
            return Err(VoltaError::Dimension {
                op: "gaussian posterior",
                lhs: vec![mu.len()],
                rhs: vec![log_sigma.len()],
            });
        }
        Ok(Self { mu, log_sigma })
    }

    /// `N(0, 1)` in every dimension.
    pub fn standard(n: usize) -> Self {
        Self {
            mu: vec![0.0; n],
            log_sigma: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.iter().map(|l| l.exp()).collect()
    }
}

/// `n_vars` independent categoricals over `k` classes, stored as logits.
///
/// A logit of `-inf` encodes a probability of exactly zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalPosterior {
    pub logits: Vec<f64>,
    pub n_vars: usize,
    pub k: usize,
}

impl CategoricalPosterior {
    pub fn new(n_vars: usize, k: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != n_vars * k {
            return Err(VoltaError::Dimension {
                op: "categorical posterior",
                lhs: vec![n_vars, k],
                rhs: vec![logits.len()],
            });
        }
        Ok(Self { logits, n_vars, k })
    }

    pub fn uniform(n_vars: usize, k: usize) -> Self {
        Self {
            logits: vec![0.0; n_vars * k],
            n_vars,
            k,
        }
    }

    /// Builds logits `ln π` from probabilities; each row must sum to 1.
    pub fn from_probs(n_vars: usize, k: usize, probs: &[f64]) -> Result<Self> {
        if probs.len() != n_vars * k {
            return Err(VoltaError::Dimension {
                op: "categorical posterior",
                lhs: vec![n_vars, k],
                rhs: vec![probs.len()],
            });
        }
        for row in probs.chunks(k.max(1)) {
            let s: f64 = row.iter().sum();
            if row.iter().any(|p| *p < 0.0) || (s - 1.0).abs() > 1e-9 {
                return Err(VoltaError::Contract(format!(
                    "categorical row {row:?} is not a distribution"
                )));
            }
        }
        Ok(Self {
            logits: probs.iter().map(|p| p.ln()).collect(),
            n_vars,
            k,
        })
    }

    /// Row-wise softmax, `[n_vars × k]` flattened.
    pub fn probs(&self) -> Vec<f64> {
        self.logits.chunks(self.k.max(1)).flat_map(softmax).collect()
    }

    /// Row-wise log-softmax, `[n_vars × k]` flattened.
    pub fn log_probs(&self) -> Vec<f64> {
        self.logits.chunks(self.k.max(1)).flat_map(log_softmax).collect()
    }
}

/// Latent codes `c_g ∈ [−1, 1]^{n_cg}` and `n_ca` categorical codes over `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCodes {
    pub continuous: Vec<f64>,
    pub discrete: Vec<usize>,
    pub k: usize,
}

impl LatentCodes {
    pub fn empty() -> Self {
        Self {
            continuous: vec![],
            discrete: vec![],
            k: 0,
        }
    }

    /// Discrete codes as concatenated one-hot rows.
    pub fn one_hot(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.discrete.len() * self.k];
        for (j, &c) in self.discrete.iter().enumerate() {
            out[j * self.k + c] = 1.0;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.continuous.iter().find(|c| !(-1.0..=1.0).contains(*c)) {
            return Err(VoltaError::Contract(format!("continuous code {c} outside [-1, 1]")));
        }
        if let Some(&c) = self.discrete.iter().find(|&&c| c >= self.k) {
            return Err(VoltaError::Index {
                what: "discrete code",
                index: c,
                size: self.k,
            });
        }
        Ok(())
    }
}

/// A reparametrized draw: Gaussian `z_g` and relaxed one-hot `z_a` rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSample {
    pub z_g: Vec<f64>,
    /// `[n_za × k]`, each row on the simplex.
    pub z_a: Vec<f64>,
    pub n_za: usize,
    pub k: usize,
    pub tau: f64,
}

impl LatentSample {
    /// Replaces every `z_a` row with the one-hot of its argmax.
    pub fn harden(&self) -> LatentSample {
        let mut out = self.clone();
        for row in out.z_a.chunks_mut(self.k.max(1)) {
            let best = argmax(row);
            row.iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = if i == best { 1.0 } else { 0.0 });
        }
        out
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - lse).collect()
}

pub fn draw_normals<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Standard Gumbel draws, `−ln(−ln U)`.
pub fn draw_gumbels<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit Gumbel is valid");
    (0..n).map(|_| rng.sample(gumbel)).collect()
}

/// `z = μ + σ·ε`, `ε ~ N(0, 1)`.
pub fn sample_gaussian<R: Rng + ?Sized>(post: &GaussianPosterior, rng: &mut R) -> Vec<f64> {
    let eps = draw_normals(post.len(), rng);
    post.mu
        .iter()
        .zip(&post.log_sigma)
        .zip(eps)
        .map(|((m, l), e)| m + l.exp() * e)
        .collect()
}

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(VoltaError::Contract(format!(
            "Gumbel-Softmax temperature must be > 0, got {tau}"
        )));
    }
    Ok(())
}

/// Relaxed one-hot rows `softmax((G + ln π) / τ)`.
pub fn sample_gumbel_softmax<R: Rng + ?Sized>(post: &CategoricalPosterior, tau: f64, rng: &mut R) -> Result<Vec<f64>> {
    check_tau(tau)?;
    let g = draw_gumbels(post.logits.len(), rng);
    let lp = post.log_probs();
    let mut out = Vec::with_capacity(lp.len());
    for (row, noise) in lp.chunks(post.k.max(1)).zip(g.chunks(post.k.max(1))) {
        let scaled: Vec<f64> = row.iter().zip(noise).map(|(l, n)| (n + l) / tau).collect();
        out.extend(softmax(&scaled));
    }
    Ok(out)
}

/// Draws `c_g ~ Uni(−1, 1)` and uniform categorical `c_a`.
pub fn sample_codes<R: Rng + ?Sized>(n_cg: usize, n_ca: usize, k: usize, rng: &mut R) -> Result<LatentCodes> {
    if n_ca > 0 && k == 0 {
        return Err(VoltaError::Contract("discrete codes need k > 0".into()));
    }
    let uni = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
    Ok(LatentCodes {
        continuous: (0..n_cg).map(|_| rng.sample(uni)).collect(),
        discrete: (0..n_ca).map(|_| rng.random_range(0..k)).collect(),
        k,
    })
}

/// Per-dimension `KL(q ‖ p)` between diagonal Gaussians.
pub fn kl_gaussian(q: &GaussianPosterior, p: &GaussianPosterior) -> Result<Vec<f64>> {
    if q.len() != p.len() {
        return Err(VoltaError::Dimension {
            op: "kl_gaussian",
            lhs: vec![q.len()],
            rhs: vec![p.len()],
        });
    }
    Ok((0..q.len())
        .map(|i| {
            let (lq, lp) = (q.log_sigma[i], p.log_sigma[i]);
            let d = q.mu[i] - p.mu[i];
            let kl = lp - lq + ((2.0 * lq).exp() + d * d) / (2.0 * (2.0 * lp).exp()) - 0.5;
            kl.max(0.0)
        })
        .collect())
}

/// Per-variable `KL(q ‖ p)` between categoricals, with `0·ln 0 = 0`.
pub fn kl_categorical(q: &CategoricalPosterior, p: &CategoricalPosterior) -> Result<Vec<f64>> {
    if q.n_vars != p.n_vars || q.k != p.k {
        return Err(VoltaError::Dimension {
            op: "kl_categorical",
            lhs: vec![q.n_vars, q.k],
            rhs: vec![p.n_vars, p.k],
        });
    }
    let (pq, lq, lp) = (q.probs(), q.log_probs(), p.log_probs());
    let mut out = Vec::with_capacity(q.n_vars);
    for j in 0..q.n_vars {
        let mut kl = 0.0;
        for i in j * q.k..(j + 1) * q.k {
            if pq[i] == 0.0 {
                continue;
            }
            if lp[i] == f64::NEG_INFINITY {
                return Err(VoltaError::InfiniteDivergence(format!(
                    "variable {j}, category {}: prior probability is 0",
                    i - j * q.k
                )));
            }
            kl += pq[i] * (lq[i] - lp[i]);
        }
        out.push(kl.max(0.0));
    }
    Ok(out)
}

/// Output of a recovery head for one code.
#[derive(Clone, Debug, PartialEq)]
pub enum RecoveryParam {
    /// Mean of a unit-variance Gaussian.
    Mean(f64),
    Logits(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CodeValue {
    Continuous(f64),
    Discrete(usize),
}

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `ln q_θ(c)`: `N(θ, 1)` density for continuous codes, `ln softmax(θ)[c]`
/// for discrete ones.
pub fn code_log_likelihood(theta: &RecoveryParam, code: CodeValue) -> Result<f64> {
    match (theta, code) {
        (RecoveryParam::Mean(m), CodeValue::Continuous(c)) => Ok(-HALF_LN_2PI - 0.5 * (c - m) * (c - m)),
        (RecoveryParam::Logits(l), CodeValue::Discrete(c)) => {
            if c >= l.len() {
                return Err(VoltaError::Index {
                    what: "discrete code",
                    index: c,
                    size: l.len(),
                });
            }
            Ok(log_softmax(l)[c])
        }
        _ => Err(VoltaError::Contract(
            "recovery parameter and code belong to different families".into(),
        )),
    }
}

/// Componentwise interpolation between two samples.
///
/// `z_g` is mixed linearly; each `z_a` row is mixed on the simplex and
/// renormalized. The endpoints return the inputs unchanged.
pub fn interpolate_latents(a: &LatentSample, b: &LatentSample, alpha: f64) -> Result<LatentSample> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(VoltaError::Contract(format!("alpha {alpha} outside [0, 1]")));
    }
    if a.z_g.len() != b.z_g.len() || a.z_a.len() != b.z_a.len() || a.k != b.k {
        return Err(VoltaError::Dimension {
            op: "interpolate_latents",
            lhs: vec![a.z_g.len(), a.z_a.len()],
            rhs: vec![b.z_g.len(), b.z_a.len()],
        });
    }
    if alpha == 0.0 {
        return Ok(a.clone());
    }
    if alpha == 1.0 {
        return Ok(b.clone());
    }
    let mix = |x: &f64, y: &f64| (1.0 - alpha) * x + alpha * y;
    let z_g = a.z_g.iter().zip(&b.z_g).map(|(x, y)| mix(x, y)).collect();
    let mut z_a: Vec<f64> = a.z_a.iter().zip(&b.z_a).map(|(x, y)| mix(x, y)).collect();
    for row in z_a.chunks_mut(a.k.max(1)) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    Ok(LatentSample {
        z_g,
        z_a,
        n_za: a.n_za,
        k: a.k,
        tau: a.tau,
    })
}

/// Gaussian head outputs on a graph, each `[n]`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mu: Var,
    pub log_sigma: Var,
}

/// Categorical head output on a graph, `[n_vars × k]` logits.
#[derive(Clone, Copy, Debug)]
pub struct CategoricalVars {
    pub logits: Var,
}

/// Differentiable `μ + exp(log σ)·ε` with the draws `eps` held fixed.
pub fn sample_gaussian_var(g: &mut Graph, head: GaussianVars, eps: &[f64]) -> Result<Var> {
    let sigma = g.exp(head.log_sigma);
    let noise = g.constant(&Tensor::new(g.shape(sigma).to_vec(), eps.to_vec())?);
    let scaled = g.mul(sigma, noise)?;
    g.add(head.mu, scaled)
}

/// Differentiable Gumbel-Softmax with fixed Gumbel draws.
pub fn gumbel_softmax_var(g: &mut Graph, head: CategoricalVars, gumbels: &[f64], tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let lp = g.log_softmax(head.logits, 1)?;
    let noise = Tensor::new(g.shape(lp).to_vec(), gumbels.to_vec())?;
    let perturbed = g.add_const(lp, &noise)?;
    let scaled = g.scale(perturbed, 1.0 / tau);
    g.softmax(scaled, 1)
}

/// Per-dimension Gaussian KL on a graph, `[n]`.
pub fn kl_gaussian_var(g: &mut Graph, q: GaussianVars, p: GaussianVars) -> Result<Var> {
    let log_ratio = g.sub(p.log_sigma, q.log_sigma)?;
    let two_lq = g.scale(q.log_sigma, 2.0);
    let var_q = g.exp(two_lq);
    let d = g.sub(q.mu, p.mu)?;
    let d2 = g.mul(d, d)?;
    let num = g.add(var_q, d2)?;
    let neg_two_lp = g.scale(p.log_sigma, -2.0);
    let inv_var_p = g.exp(neg_two_lp);
    let frac = g.mul(num, inv_var_p)?;
    let half = g.scale(frac, 0.5);
    let sum = g.add(log_ratio, half)?;
    Ok(g.add_scalar(sum, -0.5))
}

/// Per-variable categorical KL on a graph, `[n_vars]`.
pub fn kl_categorical_var(g: &mut Graph, q: CategoricalVars, p: CategoricalVars) -> Result<Var> {
    let lq = g.log_softmax(q.logits, 1)?;
    let lp = g.log_softmax(p.logits, 1)?;
    let pq = g.exp(lq);
    let diff = g.sub(lq, lp)?;
    let terms = g.mul(pq, diff)?;
    let rows = g.shape(terms)[0];
    let k = g.shape(terms)[1] as f64;
    let mean = g.mean(terms, Some(1))?;
    let sum = g.scale(mean, k);
    g.reshape(sum, &[rows])
}
