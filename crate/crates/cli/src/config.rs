//! Run configuration and the named hyperparameter presets.

use std::path::Path;

use discond::models::{Backbone, ModelConfig, Variant};
use discond::objective::{CapacitySchedule, LossWeights};
use discond::prior::{PriorMode, PriorUpdatePolicy};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    CondSprites,
    DSprites,
    Mnist,
}

impl Dataset {
    pub fn name(self) -> &'static str {
        match self {
            Dataset::CondSprites => "condsprites",
            Dataset::DSprites => "dsprites",
            Dataset::Mnist => "mnist",
        }
    }

    /// Native image extent after preprocessing.
    pub fn extent(self) -> usize {
        match self {
            Dataset::CondSprites | Dataset::DSprites => 64,
            Dataset::Mnist => 32,
        }
    }
}

fn default_seeds() -> usize {
    10
}

fn default_batch() -> usize {
    256
}

/// Evaluation protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// Number of evaluation repetitions; repetition `r` uses seed `seed + r`.
    #[serde(default = "default_seeds")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_vote_batch")]
    pub vote_batch: usize,
    #[serde(default = "default_train_votes")]
    pub train_votes: usize,
    #[serde(default = "default_eval_votes")]
    pub eval_votes: usize,
    #[serde(default = "default_bins")]
    pub mig_bins: usize,
    #[serde(default = "default_min_class")]
    pub min_class_examples: usize,
    #[serde(default = "default_nll_samples")]
    pub nll_samples: usize,
    /// Test examples scored for NLL, taken from the front of the split.
    #[serde(default = "default_nll_examples")]
    pub nll_examples: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
}

fn default_vote_batch() -> usize {
    64
}
fn default_train_votes() -> usize {
    800
}
fn default_eval_votes() -> usize {
    200
}
fn default_bins() -> usize {
    discond::metrics::DEFAULT_MIG_BINS
}
fn default_min_class() -> usize {
    discond::metrics::DEFAULT_MIN_CLASS_EXAMPLES
}
fn default_nll_samples() -> usize {
    100
}
fn default_nll_examples() -> usize {
    500
}

impl Default for EvalSettings {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Dataset,
    pub variant: Variant,
    pub public_dim: usize,
    #[serde(default)]
    pub private_dim: usize,
    pub discrete_dim: usize,
    pub image_extent: usize,
    #[serde(default)]
    pub backbone: Backbone,
    #[serde(default = "default_temperature")]
    pub temperature: f32,
    pub beta_z: f32,
    #[serde(default)]
    pub beta_w: f32,
    pub beta_c: f32,
    pub capacity_z: f32,
    #[serde(default)]
    pub capacity_w: f32,
    pub capacity_c: f32,
    pub capacity_ramp_iters: u64,
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Defaults to fixed means: zero for the exact variant, random for the others.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<PriorUpdatePolicy>,
    /// Stop after this many optimizer steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iters: Option<u64>,
    /// Train on a seeded random subset of this many examples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<usize>,
    #[serde(default)]
    pub eval: EvalSettings,
}

fn default_temperature() -> f32 {
    discond::distributions::DEFAULT_TEMPERATURE
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        let mut m = ModelConfig::new(
            self.variant,
            self.public_dim,
            self.private_dim,
            self.discrete_dim,
            self.image_extent,
        );
        m.backbone = self.backbone;
        m.temperature = self.temperature;
        m
    }

    pub fn loss_weights(&self) -> CliResult<LossWeights> {
        let c = |target| CapacitySchedule::new(target, self.capacity_ramp_iters);
        let w = LossWeights {
            beta_z: self.beta_z,
            beta_w: self.beta_w,
            beta_c: self.beta_c,
            capacity_z: c(self.capacity_z)?,
            capacity_w: c(self.capacity_w)?,
            capacity_c: c(self.capacity_c)?,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn prior_policy(&self) -> PriorUpdatePolicy {
        self.prior.unwrap_or_else(|| {
            PriorUpdatePolicy::new(match self.variant {
                Variant::Exact | Variant::Joint => PriorMode::FixedZero,
                Variant::Approx => PriorMode::FixedRandom,
            })
        })
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model_config().validate()?;
        self.loss_weights()?;
        self.prior_policy().validate()?;
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid("epochs and batch size must be positive"));
        }
        if self.max_iters == Some(0) || self.subset == Some(0) {
            return Err(invalid("max_iters and subset must be positive when given"));
        }
        if self.variant == Variant::Joint && (self.private_dim != 0 || self.beta_w != 0.0 || self.capacity_w != 0.0) {
            return Err(invalid(
                "the joint variant has no private variable; private_dim, beta_w and capacity_w must be 0",
            ));
        }
        let e = &self.eval;
        if e.repetitions == 0 || e.batch == 0 || e.nll_samples == 0 {
            return Err(invalid("eval repetitions, batch and nll_samples must be positive"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        RunConfig::from_json(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// One column of the hyperparameter tables.
struct Row {
    dataset: Dataset,
    pb: usize,
    pr: usize,
    beta: [f32; 3],
    capacity: [f32; 3],
}

const fn row(dataset: Dataset, pb: usize, pr: usize, beta: [f32; 3], capacity: [f32; 3]) -> Row {
    Row {
        dataset,
        pb,
        pr,
        beta,
        capacity,
    }
}

use Dataset::{CondSprites as CS, DSprites as DS, Mnist as MN};

const EXACT: [Row; 11] = [
    row(CS, 10, 3, [30.0, 30.0, 30.0], [30.0, 30.0, 5.0]),
    row(CS, 8, 2, [30.0, 30.0, 40.0], [30.0, 30.0, 5.0]),
    row(CS, 5, 3, [30.0, 30.0, 30.0], [30.0, 30.0, 5.0]),
    row(CS, 3, 2, [30.0, 30.0, 40.0], [30.0, 30.0, 10.0]),
    row(DS, 6, 2, [200.0, 200.0, 200.0], [20.0, 20.0, 1.1]),
    row(DS, 4, 2, [100.0, 100.0, 100.0], [20.0, 20.0, 1.1]),
    row(DS, 2, 2, [200.0, 200.0, 200.0], [20.0, 20.0, 1.1]),
    row(MN, 10, 3, [25.0, 25.0, 5.0], [5.0, 5.0, 25.0]),
    row(MN, 8, 2, [25.0, 25.0, 2.5], [5.0, 5.0, 25.0]),
    row(MN, 4, 3, [25.0, 25.0, 5.0], [5.0, 5.0, 25.0]),
    row(MN, 2, 2, [25.0, 25.0, 3.0], [5.0, 5.0, 25.0]),
];

const APPROX: [Row; 11] = [
    row(CS, 10, 3, [10.0, 20.0, 20.0], [20.0, 20.0, 5.0]),
    row(CS, 8, 2, [10.0, 20.0, 20.0], [20.0, 20.0, 5.0]),
    row(CS, 5, 3, [10.0, 20.0, 20.0], [20.0, 20.0, 5.0]),
    row(CS, 3, 2, [20.0, 40.0, 40.0], [10.0, 10.0, 5.0]),
    row(DS, 6, 2, [20.0, 40.0, 40.0], [10.0, 10.0, 5.0]),
    row(DS, 4, 2, [20.0, 40.0, 40.0], [10.0, 10.0, 5.0]),
    row(DS, 2, 2, [20.0, 40.0, 40.0], [10.0, 10.0, 5.0]),
    row(MN, 10, 3, [30.0, 60.0, 60.0], [10.0, 10.0, 10.0]),
    row(MN, 8, 2, [10.0, 20.0, 20.0], [10.0, 10.0, 10.0]),
    row(MN, 4, 3, [20.0, 40.0, 40.0], [10.0, 10.0, 5.0]),
    row(MN, 2, 2, [10.0, 20.0, 20.0], [10.0, 10.0, 10.0]),
];

/// `beta` and `capacity` hold `[z, c]` in the first and last slots.
const JOINT: [Row; 6] = [
    row(CS, 10, 0, [30.0, 0.0, 30.0], [30.0, 0.0, 5.0]),
    row(CS, 5, 0, [30.0, 0.0, 30.0], [30.0, 0.0, 5.0]),
    row(DS, 6, 0, [150.0, 0.0, 150.0], [40.0, 0.0, 1.1]),
    row(DS, 4, 0, [150.0, 0.0, 150.0], [40.0, 0.0, 1.1]),
    row(MN, 10, 0, [30.0, 0.0, 30.0], [5.0, 0.0, 5.0]),
    row(MN, 4, 0, [30.0, 0.0, 30.0], [5.0, 0.0, 5.0]),
];

fn discrete_dim(dataset: Dataset) -> usize {
    match dataset {
        Dataset::CondSprites => 2,
        Dataset::DSprites => 3,
        Dataset::Mnist => 10,
    }
}

fn ramp(dataset: Dataset) -> u64 {
    match dataset {
        Dataset::DSprites => 300_000,
        _ => 25_000,
    }
}

/// `(learning rate, epochs)` per variant and dataset.
fn schedule(variant: Variant, dataset: Dataset) -> (f32, usize) {
    match (variant, dataset) {
        (Variant::Approx, Dataset::Mnist) => (2e-3, 100),
        (Variant::Approx, Dataset::DSprites) => (1e-3, 20),
        (Variant::Approx, Dataset::CondSprites) => (1e-3, 300),
        (_, Dataset::Mnist) => (5e-4, 100),
        (_, Dataset::DSprites) => (5e-4, 30),
        (_, Dataset::CondSprites) => (5e-4, 200),
    }
}

fn preset_name(variant: Variant, r: &Row) -> String {
    match variant {
        Variant::Joint => format!("joint-{}-pb{}", r.dataset.name(), r.pb),
        v => format!("{}-{}-pb{}-pr{}", v.name(), r.dataset.name(), r.pb, r.pr),
    }
}

fn preset_config(variant: Variant, r: &Row) -> RunConfig {
    let (learning_rate, epochs) = schedule(variant, r.dataset);
    RunConfig {
        dataset: r.dataset,
        variant,
        public_dim: r.pb,
        private_dim: r.pr,
        discrete_dim: discrete_dim(r.dataset),
        image_extent: r.dataset.extent(),
        backbone: Backbone::Conv,
        temperature: default_temperature(),
        beta_z: r.beta[0],
        beta_w: r.beta[1],
        beta_c: r.beta[2],
        capacity_z: r.capacity[0],
        capacity_w: r.capacity[1],
        capacity_c: r.capacity[2],
        capacity_ramp_iters: ramp(r.dataset),
        learning_rate,
        epochs,
        batch_size: 64,
        seed: 0,
        prior: None,
        max_iters: None,
        subset: None,
        eval: EvalSettings::default(),
    }
}

/// Every named preset, in table order.
pub fn presets() -> Vec<(String, RunConfig)> {
    let mut out = Vec::new();
    for (variant, rows) in [
        (Variant::Exact, &EXACT[..]),
        (Variant::Approx, &APPROX[..]),
        (Variant::Joint, &JOINT[..]),
    ] {
        for r in rows {
            out.push((preset_name(variant, r), preset_config(variant, r)));
        }
    }
    out
}

pub fn preset(name: &str) -> CliResult<RunConfig> {
    presets()
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, c)| c)
        .ok_or_else(|| {
            let names: Vec<String> = presets().into_iter().map(|(n, _)| n).collect();
            invalid(format!("unknown preset {name:?}; available: {}", names.join(", ")))
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_examples() {
        let c = preset("exact-condsprites-pb5-pr3").unwrap();
        assert_eq!((c.beta_z, c.beta_w, c.beta_c), (30.0, 30.0, 30.0));
        assert_eq!((c.capacity_z, c.capacity_w, c.capacity_c), (30.0, 30.0, 5.0));
        assert_eq!(c.capacity_ramp_iters, 25_000);
        let j = preset("joint-mnist-pb10").unwrap();
        assert_eq!((j.beta_z, j.beta_c, j.capacity_z, j.capacity_c), (30.0, 30.0, 5.0, 5.0));
        assert_eq!(j.capacity_ramp_iters, 25_000);
        assert!(preset("exact-mnist-pb3-pr3").is_err());
    }

    #[test]
    fn every_preset_validates_and_round_trips() {
        let all = presets();
        assert_eq!(all.len(), 28);
        for (name, cfg) in all {
            cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg, "{name}");
        }
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&preset("exact-mnist-pb2-pr2").unwrap().to_json()).unwrap();
        v["betaz"] = 1.into();
        assert!(RunConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn default_prior_follows_variant() {
        assert_eq!(
            preset("exact-mnist-pb2-pr2").unwrap().prior_policy().mode,
            PriorMode::FixedZero
        );
        assert_eq!(
            preset("approx-mnist-pb2-pr2").unwrap().prior_policy().mode,
            PriorMode::FixedRandom
        );
    }
}
