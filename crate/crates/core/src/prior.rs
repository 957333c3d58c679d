//! Closed-form re-estimation of the mixture prior means and the schedules
//! that decide when to apply it.

use serde::{Deserialize, Serialize};

use crate::data::ImageDataset;
use crate::distributions::PriorMeans;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::{RandomSource, Tensor};

/// Responsibility below which a mode keeps its previous mean.
pub const MIN_RESPONSIBILITY: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    FixedZero,
    FixedRandom,
    WarmupOnce,
    EmPeriodic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorUpdatePolicy {
    pub mode: PriorMode,
    /// Fraction of the run between updates.
    #[serde(default = "default_fraction")]
    pub fraction: f64,
}

fn default_fraction() -> f64 {
    0.1
}

impl PriorUpdatePolicy {
    pub fn new(mode: PriorMode) -> Self {
        PriorUpdatePolicy {
            mode,
            fraction: default_fraction(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "prior update fraction must lie in (0, 1), got {}",
                self.fraction
            )));
        }
        Ok(())
    }

    /// Epochs between updates: `ceil(fraction * total_epochs)`, at least 1.
    pub fn period(&self, total_epochs: usize) -> usize {
        ((self.fraction * total_epochs as f64).ceil() as usize).max(1)
    }

    /// Whether an update runs after finishing 1-based epoch `epoch`.
    pub fn fires(&self, epoch: usize, total_epochs: usize) -> bool {
        if epoch == 0 || epoch > total_epochs {
            return false;
        }
        let k = self.period(total_epochs);
        match self.mode {
            PriorMode::FixedZero | PriorMode::FixedRandom => false,
            PriorMode::WarmupOnce => epoch == k,
            PriorMode::EmPeriodic => epoch.is_multiple_of(k),
        }
    }

    /// Starting means. Adaptive modes start from the variant's default.
    pub fn initial(&self, model: &Model, rng: &mut RandomSource) -> PriorMeans {
        let cfg = model.config();
        match self.mode {
            PriorMode::FixedZero => PriorMeans::zeros(cfg.discrete_dim, cfg.private_dim),
            PriorMode::FixedRandom => PriorMeans::random(cfg.discrete_dim, cfg.private_dim, rng),
            PriorMode::WarmupOnce | PriorMode::EmPeriodic => model.prior().clone(),
        }
    }
}

/// Responsibility-weighted mean of the encoder's mode means:
/// `mu*_i = sum_n alpha_ni mu_i(x_n) / sum_n alpha_ni`.
///
/// `alpha` is `[N, d]`, `w_mu` is `[N, d, Pr]`. Modes whose total
/// responsibility is below [`MIN_RESPONSIBILITY`] keep `previous`.
pub fn mu_star(alpha: &Tensor, w_mu: &Tensor, previous: &PriorMeans) -> Result<PriorMeans> {
    let (n, d) = match *alpha.shape() {
        [n, d] => (n, d),
        ref s => return Err(Error::shape("mu_star", format!("alpha must be [N, d], got {s:?}"))),
    };
    if n == 0 {
        return Err(Error::InvalidArgument("mu_star needs at least one example".into()));
    }
    let p = previous.private_dim();
    if w_mu.shape() != [n, d, p] || previous.classes() != d {
        return Err(Error::shape(
            "mu_star",
            format!(
                "alpha {:?}, mode means {:?}, previous prior {:?}",
                alpha.shape(),
                w_mu.shape(),
                previous.mu.shape()
            ),
        ));
    }
    let mut num = vec![0.0f64; d * p];
    let mut den = vec![0.0f64; d];
    for (a_row, m_row) in alpha.data().chunks(d).zip(w_mu.data().chunks(d * p)) {
        for i in 0..d {
            let a = a_row[i] as f64;
            den[i] += a;
            for j in 0..p {
                num[i * p + j] += a * m_row[i * p + j] as f64;
            }
        }
    }
    let mut mu = previous.mu.clone();
    for i in 0..d {
        if den[i] >= MIN_RESPONSIBILITY {
            for j in 0..p {
                mu.data_mut()[i * p + j] = (num[i * p + j] / den[i]) as f32;
            }
        }
    }
    PriorMeans::from_tensor(mu)
}

/// Dataset mean of `sum_i alpha_ni KL(N(mu_i(x_n), sigma_i^2(x_n)) || N(prior_i, I))`.
pub fn expected_private_kl(alpha: &Tensor, w_mu: &Tensor, w_logvar: &Tensor, prior: &PriorMeans) -> f64 {
    let (n, d) = (alpha.shape()[0], alpha.shape()[1]);
    let p = prior.private_dim();
    let mut total = 0.0f64;
    for s in 0..n {
        for i in 0..d {
            let a = alpha.data()[s * d + i] as f64;
            let mut kl = 0.0;
            for j in 0..p {
                let at = (s * d + i) * p + j;
                let diff = w_mu.data()[at] as f64 - prior.mu.data()[i * p + j] as f64;
                let lv = w_logvar.data()[at] as f64;
                kl += 0.5 * (diff * diff + lv.exp() - lv - 1.0);
            }
            total += a * kl;
        }
    }
    total / n as f64
}

/// Re-estimates the model's prior from `data` when the policy fires after
/// `epoch`. Returns whether an update happened.
pub fn apply_policy(
    policy: &PriorUpdatePolicy,
    epoch: usize,
    total_epochs: usize,
    model: &mut Model,
    data: &ImageDataset,
    batch: usize,
) -> Result<bool> {
    if !model.config().has_private() || !policy.fires(epoch, total_epochs) {
        return Ok(false);
    }
    let codes = model.encode_dataset_means(data, batch)?;
    let w_mu = codes
        .w_mu
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("model has no private variable".into()))?;
    let updated = mu_star(&codes.alpha, w_mu, model.prior())?;
    model.set_prior(updated)?;
    Ok(true)
}
