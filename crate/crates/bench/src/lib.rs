//! Shared fixtures for the benchmarks.

use discond::models::{LatentNoise, Model, ModelConfig, Variant};
use discond::objective::{CapacitySchedule, LossWeights};
use discond::tensor::{Adam, AdamConfig};
use discond::{RandomSource, Tensor};

/// Exact-variant model with the CondSprites 5/3/2 sizes at the given extent.
pub fn condsprites_model(extent: usize, seed: u64) -> Model {
    let cfg = ModelConfig::new(Variant::Exact, 5, 3, 2, extent);
    Model::new(cfg, &mut RandomSource::new(seed)).expect("valid config")
}

pub fn weights() -> LossWeights {
    let c = |target| CapacitySchedule::new(target, 25_000).expect("valid schedule");
    LossWeights {
        beta_z: 30.0,
        beta_w: 30.0,
        beta_c: 30.0,
        capacity_z: c(30.0),
        capacity_w: c(30.0),
        capacity_c: c(5.0),
    }
}

/// Sparse binary images resembling sprites.
pub fn binary_batch(batch: usize, extent: usize, seed: u64) -> Tensor {
    let mut rng = RandomSource::new(seed);
    Tensor::from_fn(&[batch, 1, extent, extent], |_| (rng.uniform() < 0.1) as u8 as f32)
}

pub struct StepFixture {
    pub model: Model,
    pub adam: Adam,
    pub x: Tensor,
    pub noise: LatentNoise,
}

pub fn step_fixture(extent: usize, batch: usize) -> StepFixture {
    let model = condsprites_model(extent, 1);
    let adam = Adam::new(AdamConfig::with_lr(5e-4), model.params());
    let noise = LatentNoise::sample(model.config(), batch, &mut RandomSource::new(2));
    StepFixture {
        x: binary_batch(batch, extent, 3),
        model,
        adam,
        noise,
    }
}
