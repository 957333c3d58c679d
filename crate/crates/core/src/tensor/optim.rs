use super::{Container, ParameterSet, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam without weight decay. Moment buffers are keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: ParameterMoments,
    second: ParameterMoments,
}

type ParameterMoments = std::collections::BTreeMap<String, Vec<f32>>;

impl Adam {
    pub fn new(config: AdamConfig, params: &ParameterSet) -> Self {
        let zeros = |p: &ParameterSet| {
            p.iter()
                .map(|(n, p)| (n.to_string(), vec![0.0; p.value.len()]))
                .collect()
        };
        Adam {
            config,
            step: 0,
            first: zeros(params),
            second: zeros(params),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParameterSet) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - (beta1 as f64).powi(t);
        let bias2 = 1.0 - (beta2 as f64).powi(t);
        let step_size = (lr as f64 / bias1) as f32;
        let bias2_sqrt = bias2.sqrt() as f32;
        for (name, p) in params.iter_mut() {
            let m = self.first.get_mut(name).expect("adam: parameter set changed");
            let v = self.second.get_mut(name).expect("adam: parameter set changed");
            let value = p.value.data_mut();
            for (((x, g), m), v) in value.iter_mut().zip(p.grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let denom = v.sqrt() / bias2_sqrt + eps;
                *x -= step_size * *m / denom;
            }
        }
    }

    /// Moments and step count, for inclusion in a checkpoint.
    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        for (name, m) in &self.first {
            c.insert(format!("adam.m/{name}"), Tensor::new(&[m.len()], m.clone()).unwrap());
        }
        for (name, v) in &self.second {
            c.insert(format!("adam.v/{name}"), Tensor::new(&[v.len()], v.clone()).unwrap());
        }
        // 16-bit limbs stay exact in f32.
        let limbs = (0..4).map(|i| ((self.step >> (16 * i)) & 0xffff) as f32).collect();
        c.insert("adam.step", Tensor::new(&[4], limbs).unwrap());
        c
    }

    pub fn load(&mut self, container: &Container) -> Result<()> {
        let limbs = container.require("adam.step")?;
        if limbs.len() != 4 {
            return Err(Error::format("optimizer state", "adam.step must hold 4 limbs"));
        }
        self.step = limbs
            .data()
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, &v)| acc | ((v as u64) << (16 * i)));
        for (prefix, moments) in [("adam.m/", &mut self.first), ("adam.v/", &mut self.second)] {
            for (name, buf) in moments.iter_mut() {
                let t = container.require(&format!("{prefix}{name}"))?;
                if t.len() != buf.len() {
                    return Err(Error::shape(
                        "optimizer state",
                        format!("{prefix}{name}: expected {} values, found {}", buf.len(), t.len()),
                    ));
                }
                buf.copy_from_slice(t.data());
            }
        }
        Ok(())
    }
}
