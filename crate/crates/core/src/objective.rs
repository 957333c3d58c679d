//! Capacity-annealed training objectives.
//!
//! Losses are minimized: `total = recon + sum_g beta_g |KL_g - C_g(iter)|`,
//! where `recon` is the Bernoulli negative log-likelihood and every term is a
//! batch mean in nats per example.

use serde::{Deserialize, Serialize};

use crate::distributions::{categorical_kl_to_uniform, gaussian_kl_to_prior, mixture_kl_expectation, PriorMeans};
use crate::error::{Error, Result};
use crate::models::{EncoderOutput, LatentNoise, Model, Variant};
use crate::tensor::{Adam, Graph, Tensor, Var};

/// Capacity rising linearly from 0 to `target` over `ramp_iters` iterations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapacitySchedule {
    pub target: f32,
    pub ramp_iters: u64,
}

impl CapacitySchedule {
    pub fn new(target: f32, ramp_iters: u64) -> Result<Self> {
        let s = CapacitySchedule { target, ramp_iters };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target.is_finite() && self.target >= 0.0) || self.ramp_iters == 0 {
            return Err(Error::InvalidArgument(format!(
                "capacity needs a finite non-negative target and a positive ramp, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn at(&self, iter: u64) -> f32 {
        capacity_at(self, iter)
    }
}

pub fn capacity_at(schedule: &CapacitySchedule, iter: u64) -> f32 {
    if iter >= schedule.ramp_iters {
        schedule.target
    } else {
        (schedule.target as f64 * iter as f64 / schedule.ramp_iters as f64) as f32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta_z: f32,
    pub beta_w: f32,
    pub beta_c: f32,
    pub capacity_z: CapacitySchedule,
    pub capacity_w: CapacitySchedule,
    pub capacity_c: CapacitySchedule,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [
            ("beta_z", self.beta_z),
            ("beta_w", self.beta_w),
            ("beta_c", self.beta_c),
        ] {
            if !(b.is_finite() && b >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and non-negative, got {b}"
                )));
            }
        }
        self.capacity_z.validate()?;
        self.capacity_w.validate()?;
        self.capacity_c.validate()
    }
}

/// Batch-mean loss terms of one step. KLs keep their natural sign.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl_z: f64,
    pub kl_w: f64,
    pub kl_c: f64,
    pub capacity_z: f64,
    pub capacity_w: f64,
    pub capacity_c: f64,
    /// `beta_g * |kl_g - capacity_g|`
    pub penalty_z: f64,
    pub penalty_w: f64,
    pub penalty_c: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "iter,recon,kl_z,kl_w,kl_c,C_z,C_w,C_c,total";

    pub fn csv_row(&self, iter: u64) -> String {
        format!(
            "{iter},{},{},{},{},{},{},{},{}",
            self.recon, self.kl_z, self.kl_w, self.kl_c, self.capacity_z, self.capacity_w, self.capacity_c, self.total
        )
    }

    /// `total` recomputed from the parts.
    pub fn assembled_total(&self) -> f64 {
        self.recon + self.penalty_z + self.penalty_w + self.penalty_c
    }
}

/// Bernoulli negative log-likelihood of `x` under `sigmoid(logits)`, summed
/// over pixels: shape `[batch]`.
pub fn reconstruction_loss(g: &mut Graph, x: &Tensor, logits: Var) -> Result<Var> {
    let per_pixel = g.bce_with_logits(logits, x)?;
    let batch = x.shape().first().copied().unwrap_or(0);
    if batch == 0 {
        return Err(Error::shape("reconstruction_loss", "empty batch"));
    }
    let flat = g.reshape(per_pixel, &[batch, x.len() / batch])?;
    g.sum_last(flat)
}

/// The graph node of the objective together with its breakdown.
#[derive(Clone, Copy, Debug)]
pub struct Loss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

struct Penalty {
    kl: f64,
    capacity: f64,
    penalty: f64,
    node: Var,
}

/// `beta |mean(kl) - capacity|`.
fn penalty(g: &mut Graph, per_example_kl: Var, beta: f32, capacity: f32) -> Result<Penalty> {
    let kl = g.mean(per_example_kl)?;
    let shifted = g.add_scalar(kl, -capacity)?;
    let gap = g.abs(shifted)?;
    let node = g.mul_scalar(gap, beta)?;
    Ok(Penalty {
        kl: g.value(kl).data()[0] as f64,
        capacity: capacity as f64,
        penalty: g.value(node).data()[0] as f64,
        node,
    })
}

fn assemble(g: &mut Graph, recon: Var, terms: [Option<Penalty>; 3]) -> Result<Loss> {
    let recon_mean = g.mean(recon)?;
    let mut total = recon_mean;
    let mut b = LossBreakdown {
        recon: g.value(recon_mean).data()[0] as f64,
        ..LossBreakdown::default()
    };
    for (slot, term) in terms.into_iter().enumerate() {
        let Some(t) = term else { continue };
        total = g.add(total, t.node)?;
        let (kl, cap, pen) = match slot {
            0 => (&mut b.kl_z, &mut b.capacity_z, &mut b.penalty_z),
            1 => (&mut b.kl_w, &mut b.capacity_w, &mut b.penalty_w),
            _ => (&mut b.kl_c, &mut b.capacity_c, &mut b.penalty_c),
        };
        *kl = t.kl;
        *cap = t.capacity;
        *pen = t.penalty;
    }
    b.total = g.value(total).data()[0] as f64;
    Ok(Loss { total, breakdown: b })
}

/// Discond-VAE objective. The private KL is the `alpha`-weighted sum of
/// per-mode KLs against `N(mu_i, I)`.
pub fn discond_loss(
    g: &mut Graph,
    x: &Tensor,
    out: &EncoderOutput,
    logits: Var,
    prior: &PriorMeans,
    weights: &LossWeights,
    iter: u64,
) -> Result<Loss> {
    let w = out
        .w
        .ok_or_else(|| Error::InvalidArgument("discond_loss needs a private-variable posterior".into()))?;
    let recon = reconstruction_loss(g, x, logits)?;
    let kl_z = gaussian_kl_to_prior(g, &out.z, None)?;
    let prior_mu = g.constant(prior.mu.clone());
    let per_mode = gaussian_kl_to_prior(g, &w, Some(prior_mu))?;
    let kl_w = mixture_kl_expectation(g, out.c.probs, per_mode)?;
    let kl_c = categorical_kl_to_uniform(g, &out.c)?;
    let terms = [
        Some(penalty(g, kl_z, weights.beta_z, weights.capacity_z.at(iter))?),
        Some(penalty(g, kl_w, weights.beta_w, weights.capacity_w.at(iter))?),
        Some(penalty(g, kl_c, weights.beta_c, weights.capacity_c.at(iter))?),
    ];
    assemble(g, recon, terms)
}

/// JointVAE objective: public and discrete penalties only.
pub fn jointvae_loss(
    g: &mut Graph,
    x: &Tensor,
    out: &EncoderOutput,
    logits: Var,
    weights: &LossWeights,
    iter: u64,
) -> Result<Loss> {
    let recon = reconstruction_loss(g, x, logits)?;
    let kl_z = gaussian_kl_to_prior(g, &out.z, None)?;
    let kl_c = categorical_kl_to_uniform(g, &out.c)?;
    let terms = [
        Some(penalty(g, kl_z, weights.beta_z, weights.capacity_z.at(iter))?),
        None,
        Some(penalty(g, kl_c, weights.beta_c, weights.capacity_c.at(iter))?),
    ];
    assemble(g, recon, terms)
}

/// The objective matching `model`'s variant.
pub fn model_loss(
    g: &mut Graph,
    model: &Model,
    x: &Tensor,
    out: &EncoderOutput,
    logits: Var,
    weights: &LossWeights,
    iter: u64,
) -> Result<Loss> {
    match model.config().variant {
        Variant::Exact | Variant::Approx => discond_loss(g, x, out, logits, model.prior(), weights, iter),
        Variant::Joint => jointvae_loss(g, x, out, logits, weights, iter),
    }
}

/// One optimizer update on batch `x` with the given latent noise.
pub fn train_step(
    model: &mut Model,
    optimizer: &mut Adam,
    x: &Tensor,
    weights: &LossWeights,
    iter: u64,
    noise: &LatentNoise,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let out = model.encode(&mut g, x)?;
    let sample = model.reparameterize(&mut g, &out, noise)?;
    let logits = model.decode(&mut g, &sample)?;
    let loss = model_loss(&mut g, model, x, &out, logits, weights, iter)?;
    if !loss.breakdown.total.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    let grads = g.backward(loss.total)?;
    model.params_mut().load_grads(&g, &grads);
    optimizer.step(model.params_mut());
    Ok(loss.breakdown)
}
