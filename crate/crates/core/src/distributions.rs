//! Diagonal Gaussians, the categorical posterior, and the closed-form KL
//! terms of the objective, expressed as graph operations so gradients flow
//! through them.

use crate::error::{Error, Result};
use crate::tensor::{Graph, RandomSource, Tensor, Var};

/// Gumbel-Softmax temperature used unless a config overrides it.
pub const DEFAULT_TEMPERATURE: f32 = 0.67;

const GUMBEL_U_MIN: f64 = 1e-10;
const GUMBEL_U_MAX: f64 = 1.0 - 1e-7;

/// Factorized Gaussian `N(mu, diag(exp(logvar)))`.
#[derive(Clone, Copy, Debug)]
pub struct DiagonalGaussian {
    pub mu: Var,
    pub logvar: Var,
}

impl DiagonalGaussian {
    pub fn new(g: &Graph, mu: Var, logvar: Var) -> Result<Self> {
        if g.shape(mu) != g.shape(logvar) {
            return Err(Error::shape(
                "diagonal_gaussian",
                format!("mu {:?} vs logvar {:?}", g.shape(mu), g.shape(logvar)),
            ));
        }
        Ok(DiagonalGaussian { mu, logvar })
    }
}

/// `q(c|x)`: logits plus their softmax and log-softmax.
#[derive(Clone, Copy, Debug)]
pub struct CategoricalPosterior {
    pub logits: Var,
    pub probs: Var,
    pub log_probs: Var,
}

impl CategoricalPosterior {
    pub fn from_logits(g: &mut Graph, logits: Var) -> Result<Self> {
        let probs = g.softmax(logits)?;
        let log_probs = g.log_softmax(logits)?;
        Ok(CategoricalPosterior {
            logits,
            probs,
            log_probs,
        })
    }

    pub fn num_classes(&self, g: &Graph) -> usize {
        *g.shape(self.logits).last().unwrap_or(&0)
    }
}

/// Means of the mixture prior `p(w | c = e_i) = N(mu_i, I)`, shape `[d, private_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorMeans {
    pub mu: Tensor,
}

impl PriorMeans {
    pub fn zeros(classes: usize, private_dim: usize) -> Self {
        PriorMeans {
            mu: Tensor::zeros(&[classes, private_dim]),
        }
    }

    /// Standard-normal draws.
    pub fn random(classes: usize, private_dim: usize, rng: &mut RandomSource) -> Self {
        PriorMeans {
            mu: rng.normal_tensor(&[classes, private_dim]),
        }
    }

    pub fn from_tensor(mu: Tensor) -> Result<Self> {
        if mu.rank() != 2 || !mu.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "prior means must be a finite [d, private_dim] matrix, got {:?}",
                mu.shape()
            )));
        }
        Ok(PriorMeans { mu })
    }

    pub fn classes(&self) -> usize {
        self.mu.shape()[0]
    }

    pub fn private_dim(&self) -> usize {
        self.mu.shape()[1]
    }

    pub fn mode(&self, i: usize) -> &[f32] {
        self.mu.row(i)
    }
}

/// `KL(q || N(prior_mu, I))` summed over the last axis.
///
/// `prior_mu` is broadcast over leading axes, so a `[batch, d, dim]` posterior
/// against `[d, dim]` means yields per-mode KLs of shape `[batch, d]`. With no
/// prior mean the standard normal is used.
pub fn gaussian_kl_to_prior(g: &mut Graph, q: &DiagonalGaussian, prior_mu: Option<Var>) -> Result<Var> {
    let centred = match prior_mu {
        Some(m) => g.sub(q.mu, m)?,
        None => q.mu,
    };
    let sq = g.square(centred)?;
    let var = g.exp(q.logvar)?;
    let t = g.add(sq, var)?;
    let t = g.sub(t, q.logvar)?;
    let t = g.add_scalar(t, -1.0)?;
    let s = g.sum_last(t)?;
    g.mul_scalar(s, 0.5)
}

/// `KL(q(c|x) || Uniform(d)) = sum_i a_i log a_i + log d`, per example.
///
/// Computed from log-probabilities, so classes with vanishing probability
/// contribute exactly zero.
pub fn categorical_kl_to_uniform(g: &mut Graph, c: &CategoricalPosterior) -> Result<Var> {
    let d = c.num_classes(g);
    let plogp = g.mul(c.probs, c.log_probs)?;
    let neg_entropy = g.sum_last(plogp)?;
    g.add_scalar(neg_entropy, (d as f32).ln())
}

/// `sum_i alpha_i * per_mode_kl_i`, per example.
pub fn mixture_kl_expectation(g: &mut Graph, alpha: Var, per_mode_kl: Var) -> Result<Var> {
    if g.shape(alpha) != g.shape(per_mode_kl) {
        return Err(Error::shape(
            "mixture_kl_expectation",
            format!("alpha {:?} vs per-mode KL {:?}", g.shape(alpha), g.shape(per_mode_kl)),
        ));
    }
    let weighted = g.mul(alpha, per_mode_kl)?;
    g.sum_last(weighted)
}

/// `mu + exp(logvar / 2) * eps` for a given standard-normal `eps`.
pub fn gaussian_reparam_with_noise(g: &mut Graph, q: &DiagonalGaussian, eps: Tensor) -> Result<Var> {
    if eps.shape() != g.shape(q.mu) {
        return Err(Error::shape(
            "gaussian_reparam",
            format!("noise {:?} vs mean {:?}", eps.shape(), g.shape(q.mu)),
        ));
    }
    let half = g.mul_scalar(q.logvar, 0.5)?;
    let std = g.exp(half)?;
    let eps = g.constant(eps);
    let scaled = g.mul(std, eps)?;
    g.add(q.mu, scaled)
}

pub fn gaussian_reparam(g: &mut Graph, q: &DiagonalGaussian, rng: &mut RandomSource) -> Result<Var> {
    let eps = rng.normal_tensor(g.shape(q.mu));
    gaussian_reparam_with_noise(g, q, eps)
}

/// One Gumbel(0, 1) draw, with the uniform clamped away from 0 and 1.
pub fn gumbel_noise(rng: &mut RandomSource) -> f32 {
    let u = rng.uniform().clamp(GUMBEL_U_MIN, GUMBEL_U_MAX);
    (-libm::log(-libm::log(u))) as f32
}

/// `softmax((logits + noise) / tau)` over the last axis.
pub fn gumbel_softmax_with_noise(g: &mut Graph, logits: Var, temperature: f32, noise: Tensor) -> Result<Var> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "Gumbel-Softmax temperature must be positive, got {temperature}"
        )));
    }
    let noise = g.constant(noise);
    let perturbed = g.add(logits, noise)?;
    let scaled = g.mul_scalar(perturbed, 1.0 / temperature)?;
    g.softmax(scaled)
}

pub fn gumbel_softmax_sample(g: &mut Graph, logits: Var, temperature: f32, rng: &mut RandomSource) -> Result<Var> {
    let noise = Tensor::from_fn(g.shape(logits), |_| gumbel_noise(rng));
    gumbel_softmax_with_noise(g, logits, temperature, noise)
}

/// `log N(x; mu, diag(exp(logvar)))` in f64.
pub fn log_normal_density(x: &[f32], mu: &[f32], logvar: &[f32]) -> f64 {
    const LOG_2PI: f64 = 1.837_877_066_409_345_3;
    x.iter()
        .zip(mu)
        .zip(logvar)
        .map(|((&x, &m), &lv)| {
            let (x, m, lv) = (x as f64, m as f64, lv as f64);
            -0.5 * (LOG_2PI + lv + (x - m) * (x - m) / lv.exp())
        })
        .sum()
}

/// Log-density of the unit-variance Gaussian centred at `mu`.
pub fn log_standard_normal_density(x: &[f32], mu: &[f32]) -> f64 {
    const LOG_2PI: f64 = 1.837_877_066_409_345_3;
    x.iter()
        .zip(mu)
        .map(|(&x, &m)| {
            let d = x as f64 - m as f64;
            -0.5 * (LOG_2PI + d * d)
        })
        .sum()
}

/// Lowest index of the largest value.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
