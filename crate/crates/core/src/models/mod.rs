//! Encoder/decoder networks for the exact and approx Discond-VAE variants and
//! the JointVAE baseline, the two private-variable reparametrizations, and
//! latent traversals.
//!
//! Continuous posteriors over the private variable are carried as
//! `[batch, d, private_dim]`: mode `i` of the Gaussian mixture lives in row `i`.

mod network;
mod traversal;

use serde::{Deserialize, Serialize};

use crate::data::ImageDataset;
use crate::distributions::{
    self, argmax, gaussian_reparam_with_noise, gumbel_noise, gumbel_softmax_with_noise, CategoricalPosterior,
    DiagonalGaussian, PriorMeans,
};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParameterSet, RandomSource, Tensor, Var};

pub use traversal::{write_grid_png, TraversalAxis};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Exact,
    Approx,
    Joint,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Exact => "exact",
            Variant::Approx => "approx",
            Variant::Joint => "joint",
        }
    }
}

/// Feature extractor and generator family. `Mlp` swaps the conv stacks for a
/// single hidden layer on each side, which keeps gradient checks cheap.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    #[default]
    Conv,
    Mlp {
        hidden: usize,
    },
}

fn default_channels() -> usize {
    1
}

fn default_temperature() -> f32 {
    distributions::DEFAULT_TEMPERATURE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub public_dim: usize,
    pub private_dim: usize,
    pub discrete_dim: usize,
    pub image_extent: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default)]
    pub backbone: Backbone,
    /// Gumbel-Softmax temperature.
    #[serde(default = "default_temperature")]
    pub temperature: f32,
}

impl ModelConfig {
    pub fn new(
        variant: Variant,
        public_dim: usize,
        private_dim: usize,
        discrete_dim: usize,
        image_extent: usize,
    ) -> Self {
        ModelConfig {
            variant,
            public_dim,
            private_dim,
            discrete_dim,
            image_extent,
            channels: 1,
            backbone: Backbone::Conv,
            temperature: default_temperature(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.discrete_dim < 2 {
            return bad(format!("discrete_dim must be at least 2, got {}", self.discrete_dim));
        }
        match self.variant {
            Variant::Joint if self.private_dim != 0 => {
                return bad(format!(
                    "joint variant has no private variable, got private_dim {}",
                    self.private_dim
                ))
            }
            Variant::Exact | Variant::Approx if self.private_dim == 0 => {
                return bad(format!("{} variant needs private_dim >= 1", self.variant.name()))
            }
            _ => {}
        }
        if self.channels == 0 {
            return bad("channels must be positive".into());
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        match self.backbone {
            Backbone::Conv if self.image_extent != 32 && self.image_extent != 64 => bad(format!(
                "conv backbone supports image extent 32 or 64, got {}",
                self.image_extent
            )),
            Backbone::Mlp { hidden } if hidden == 0 || self.image_extent == 0 => {
                bad("mlp backbone needs positive hidden width and image extent".into())
            }
            _ => Ok(()),
        }
    }

    pub fn has_private(&self) -> bool {
        self.variant != Variant::Joint
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.image_extent * self.image_extent
    }
}

/// Variational parameters for one batch.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `[batch, Pb]`
    pub z: DiagonalGaussian,
    /// `[batch, d, Pr]`; absent for the joint variant.
    pub w: Option<DiagonalGaussian>,
    pub c: CategoricalPosterior,
}

/// Standard-normal and Gumbel draws consumed by one reparametrization.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentNoise {
    /// `[batch, Pb]`
    pub z: Tensor,
    /// `[batch, d, Pr]`, one draw per mixture mode.
    pub w: Option<Tensor>,
    /// `[batch, d]`
    pub gumbel: Tensor,
}

impl LatentNoise {
    pub fn sample(cfg: &ModelConfig, batch: usize, rng: &mut RandomSource) -> Self {
        let z = rng.normal_tensor(&[batch, cfg.public_dim]);
        let w = cfg
            .has_private()
            .then(|| rng.normal_tensor(&[batch, cfg.discrete_dim, cfg.private_dim]));
        let gumbel = Tensor::from_fn(&[batch, cfg.discrete_dim], |_| gumbel_noise(rng));
        LatentNoise { z, w, gumbel }
    }

    pub fn zeros(cfg: &ModelConfig, batch: usize) -> Self {
        LatentNoise {
            z: Tensor::zeros(&[batch, cfg.public_dim]),
            w: cfg
                .has_private()
                .then(|| Tensor::zeros(&[batch, cfg.discrete_dim, cfg.private_dim])),
            gumbel: Tensor::zeros(&[batch, cfg.discrete_dim]),
        }
    }
}

/// One draw of the latents fed to the decoder.
#[derive(Clone, Debug)]
pub struct LatentSample {
    /// `[batch, Pb]`
    pub z: Var,
    /// `[batch, Pr]`
    pub w: Option<Var>,
    /// `[batch, d]`: relaxed `pi`, or `one-hot(j)` for the exact variant.
    pub discrete: Var,
    /// Mode picked per example by the exact reparametrization.
    pub selected: Option<Vec<usize>>,
}

/// Posterior means, detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanCodes {
    /// `[batch, Pb]`
    pub z_mu: Tensor,
    /// `[batch, d, Pr]`
    pub w_mu: Option<Tensor>,
    /// `[batch, d]`
    pub alpha: Tensor,
}

impl MeanCodes {
    /// Most likely class per example, lowest index on ties.
    pub fn classes(&self) -> Vec<usize> {
        let d = self.alpha.shape()[1];
        self.alpha.data().chunks(d).map(argmax).collect()
    }

    /// Mean of the private variable under mode `mode` for example `n`.
    pub fn private_mode(&self, n: usize, mode: usize) -> Option<&[f32]> {
        self.w_mu.as_ref().map(|w| {
            let (d, p) = (w.shape()[1], w.shape()[2]);
            let base = (n * d + mode) * p;
            &w.data()[base..base + p]
        })
    }
}

/// Network parameters, the mixture prior, and the architecture they belong to.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParameterSet,
    prior: PriorMeans,
}

impl Model {
    /// Kaiming-uniform weights, zero biases. The prior starts at zero for the
    /// exact variant and at standard-normal draws for the approx variant.
    pub fn new(config: ModelConfig, rng: &mut RandomSource) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterSet::new();
        for (name, shape) in network::parameter_shapes(&config) {
            let fan_in: usize = shape[1..].iter().product();
            let value = if name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else {
                let bound = (6.0 / fan_in.max(1) as f32).sqrt();
                rng.uniform_tensor(&shape, -bound, bound)
            };
            params.insert(name, value)?;
        }
        let (d, p) = (config.discrete_dim, config.private_dim);
        let prior = match config.variant {
            Variant::Approx => PriorMeans::random(d, p, &mut rng.derive(0x9e10)),
            _ => PriorMeans::zeros(d, p),
        };
        Ok(Model { config, params, prior })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn prior(&self) -> &PriorMeans {
        &self.prior
    }

    pub fn set_prior(&mut self, prior: PriorMeans) -> Result<()> {
        if prior.mu.shape() != [self.config.discrete_dim, self.config.private_dim] {
            return Err(Error::shape(
                "set_prior",
                format!(
                    "expected [{}, {}], found {:?}",
                    self.config.discrete_dim,
                    self.config.private_dim,
                    prior.mu.shape()
                ),
            ));
        }
        self.prior = prior;
        Ok(())
    }

    pub fn encode(&self, g: &mut Graph, x: &Tensor) -> Result<EncoderOutput> {
        network::encode(self, g, x)
    }

    pub fn decode(&self, g: &mut Graph, sample: &LatentSample) -> Result<Var> {
        network::decode(self, g, sample)
    }

    /// `w` comes from the mode of the most likely class.
    pub fn reparam_exact(&self, g: &mut Graph, out: &EncoderOutput, noise: &LatentNoise) -> Result<LatentSample> {
        let d = self.config.discrete_dim;
        let alpha = g.value(out.c.probs);
        let batch = alpha.shape()[0];
        let selected: Vec<usize> = alpha.data().chunks(d).map(argmax).collect();
        let one_hot = one_hot(&selected, d);
        let weights = g.constant(one_hot);
        let mut sample = self.reparam_with_weights(g, out, weights, noise)?;
        debug_assert_eq!(selected.len(), batch);
        sample.selected = Some(selected);
        Ok(sample)
    }

    /// Every mode is sampled and mixed by Gumbel-Softmax weights.
    pub fn reparam_approx(&self, g: &mut Graph, out: &EncoderOutput, noise: &LatentNoise) -> Result<LatentSample> {
        let pi = gumbel_softmax_with_noise(g, out.c.logits, self.config.temperature, noise.gumbel.clone())?;
        self.reparam_with_weights(g, out, pi, noise)
    }

    /// `w = sum_i weights_i * (mu_i + sigma_i * eps_i)` with the given `[batch, d]` weights.
    pub fn reparam_with_weights(
        &self,
        g: &mut Graph,
        out: &EncoderOutput,
        weights: Var,
        noise: &LatentNoise,
    ) -> Result<LatentSample> {
        let z = gaussian_reparam_with_noise(g, &out.z, noise.z.clone())?;
        let w = match (&out.w, &noise.w) {
            (Some(q), Some(eps)) => {
                let modes = gaussian_reparam_with_noise(g, q, eps.clone())?;
                Some(mix_modes(g, modes, weights)?)
            }
            (None, _) => None,
            (Some(_), None) => return Err(Error::InvalidArgument("missing private-variable noise".into())),
        };
        Ok(LatentSample {
            z,
            w,
            discrete: weights,
            selected: None,
        })
    }

    /// The sampling rule of this model's variant.
    pub fn reparameterize(&self, g: &mut Graph, out: &EncoderOutput, noise: &LatentNoise) -> Result<LatentSample> {
        match self.config.variant {
            Variant::Exact => self.reparam_exact(g, out, noise),
            Variant::Approx | Variant::Joint => self.reparam_approx(g, out, noise),
        }
    }

    /// Posterior means for a batch.
    pub fn encode_means(&self, x: &Tensor) -> Result<MeanCodes> {
        let mut g = Graph::new();
        let out = self.encode(&mut g, x)?;
        Ok(MeanCodes {
            z_mu: g.value(out.z.mu).clone(),
            w_mu: out.w.map(|w| g.value(w.mu).clone()),
            alpha: g.value(out.c.probs).clone(),
        })
    }

    /// Posterior means for a whole image stack, `batch` examples at a time.
    pub fn encode_means_batched(&self, images: &Tensor, batch: usize) -> Result<MeanCodes> {
        let n = images.shape()[0];
        let per = images.len() / n.max(1);
        let mut shape = images.shape().to_vec();
        self.encode_means_chunked(n, batch, |start, end| {
            shape[0] = end - start;
            Tensor::new(&shape, images.data()[start * per..end * per].to_vec())
        })
    }

    /// Posterior means for every example of `data`, `batch` at a time.
    pub fn encode_dataset_means(&self, data: &ImageDataset, batch: usize) -> Result<MeanCodes> {
        self.encode_means_chunked(data.len(), batch, |start, end| {
            Ok(data.batch(&(start..end).collect::<Vec<_>>()))
        })
    }

    fn encode_means_chunked(
        &self,
        n: usize,
        batch: usize,
        mut chunk: impl FnMut(usize, usize) -> Result<Tensor>,
    ) -> Result<MeanCodes> {
        let mut z = Vec::new();
        let mut w = Vec::new();
        let mut alpha = Vec::new();
        for start in (0..n).step_by(batch.max(1)) {
            let end = (start + batch).min(n);
            let codes = self.encode_means(&chunk(start, end)?)?;
            z.extend_from_slice(codes.z_mu.data());
            if let Some(t) = &codes.w_mu {
                w.extend_from_slice(t.data());
            }
            alpha.extend_from_slice(codes.alpha.data());
        }
        let cfg = &self.config;
        Ok(MeanCodes {
            z_mu: Tensor::new(&[n, cfg.public_dim], z)?,
            w_mu: if cfg.has_private() {
                Some(Tensor::new(&[n, cfg.discrete_dim, cfg.private_dim], w)?)
            } else {
                None
            },
            alpha: Tensor::new(&[n, cfg.discrete_dim], alpha)?,
        })
    }

    /// Predicted class per example: `argmax alpha`, lowest index on ties.
    pub fn classify(&self, x: &Tensor) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let out = self.encode(&mut g, x)?;
        let d = self.config.discrete_dim;
        Ok(g.value(out.c.logits).data().chunks(d).map(argmax).collect())
    }

    /// Decoder logits for fixed latent values.
    pub fn decode_codes(&self, z: Tensor, w: Option<Tensor>, discrete: Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let sample = LatentSample {
            z: g.constant(z),
            w: w.map(|w| g.constant(w)),
            discrete: g.constant(discrete),
            selected: None,
        };
        let logits = self.decode(&mut g, &sample)?;
        Ok(g.value(logits).clone())
    }
}

/// `[n, d]` matrix with a single one per row.
pub fn one_hot(classes: &[usize], d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[classes.len(), d]);
    for (row, &c) in t.data_mut().chunks_mut(d).zip(classes) {
        row[c] = 1.0;
    }
    t
}

/// Repeats `v: [..., 1, ...]` `times` times along `axis`.
fn tile(g: &mut Graph, v: Var, axis: usize, times: usize) -> Result<Var> {
    g.concat(&vec![v; times], axis)
}

/// `sum_i weights[:, i] * modes[:, i, :]` for `modes: [b, d, p]`, `weights: [b, d]`.
fn mix_modes(g: &mut Graph, modes: Var, weights: Var) -> Result<Var> {
    let (b, d, p) = match *g.shape(modes) {
        [b, d, p] => (b, d, p),
        ref s => return Err(Error::shape("mix_modes", format!("modes must be rank 3, got {s:?}"))),
    };
    if g.shape(weights) != [b, d] {
        return Err(Error::shape(
            "mix_modes",
            format!("weights {:?} vs modes {:?}", g.shape(weights), [b, d, p]),
        ));
    }
    let wt = g.reshape(weights, &[b, d, 1])?;
    let wt = tile(g, wt, 2, p)?;
    let weighted = g.mul(modes, wt)?;
    let flat = g.reshape(weighted, &[b, d * p])?;
    // Row k of the selector picks coordinate k out of every mode block.
    let selector = Tensor::from_fn(&[p, d * p], |idx| {
        if (idx % (d * p)) % p == idx / (d * p) {
            1.0
        } else {
            0.0
        }
    });
    let selector = g.constant(selector);
    g.linear(flat, selector, None)
}

/// Private decoder input of the exact variant: `w` scaled into every mode
/// block by `discrete`, followed by `discrete` itself. For a one-hot
/// `discrete` this is `w` in block `j`, zeros elsewhere, then `one-hot(j)`.
fn block_layout(g: &mut Graph, w: Var, discrete: Var) -> Result<Var> {
    let (b, p) = match *g.shape(w) {
        [b, p] => (b, p),
        ref s => return Err(Error::shape("block_layout", format!("w must be rank 2, got {s:?}"))),
    };
    let d = g.shape(discrete)[1];
    let w3 = g.reshape(w, &[b, 1, p])?;
    let tiled = tile(g, w3, 1, d)?;
    let wt = g.reshape(discrete, &[b, d, 1])?;
    let wt = tile(g, wt, 2, p)?;
    let blocks = g.mul(tiled, wt)?;
    let blocks = g.reshape(blocks, &[b, d * p])?;
    g.concat(&[blocks, discrete], 1)
}

#[cfg(test)]
mod tests;
