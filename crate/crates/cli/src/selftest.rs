//! Quick end-to-end sanity checks that need no datasets.

use discond::data::FactorTable;
use discond::distributions::{argmax, gumbel_softmax_sample};
use discond::metrics::{factorvae_metric, FactorVaeConfig};
use discond::models::{Backbone, LatentNoise, Model, ModelConfig, Variant};
use discond::objective::train_step;
use discond::tensor::{Adam, AdamConfig, Container};
use discond::{Graph, RandomSource, Tensor};

use crate::config::presets;

pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<String, String>) -> Check {
    match f() {
        Ok(detail) => Check {
            name,
            passed: true,
            detail,
        },
        Err(detail) => Check {
            name,
            passed: false,
            detail,
        },
    }
}

fn capacity_presets() -> Result<String, String> {
    let all = presets();
    for (name, cfg) in &all {
        let w = cfg.loss_weights().map_err(|e| format!("{name}: {e}"))?;
        for s in [w.capacity_z, w.capacity_w, w.capacity_c] {
            let r = s.ramp_iters;
            if s.at(0) != 0.0 || s.at(r / 2) != s.target / 2.0 || s.at(r) != s.target || s.at(10 * r) != s.target {
                return Err(format!("{name}: schedule {s:?} off its end points"));
            }
        }
    }
    Ok(format!("{} presets", all.len()))
}

fn gumbel_frequencies() -> Result<String, String> {
    let logits = [1.0f32, 0.0, -0.5];
    let n = 20_000;
    let mut g = Graph::new();
    let l = g.constant(Tensor::from_fn(&[n, 3], |i| logits[i % 3]));
    let s = gumbel_softmax_sample(&mut g, l, 0.1, &mut RandomSource::new(1)).map_err(|e| e.to_string())?;
    let mut counts = [0usize; 3];
    for row in g.value(s).data().chunks(3) {
        counts[argmax(row)] += 1;
    }
    let z: f64 = logits.iter().map(|&v| (v as f64).exp()).sum();
    let worst = (0..3)
        .map(|i| (counts[i] as f64 / n as f64 - (logits[i] as f64).exp() / z).abs())
        .fold(0.0, f64::max);
    if worst < 0.02 {
        Ok(format!("max deviation {worst:.4}"))
    } else {
        Err(format!("max deviation {worst:.4}"))
    }
}

fn factorvae_identity() -> Result<String, String> {
    let cards = [3usize, 4, 5];
    let n: usize = cards.iter().product();
    let idx: Vec<u16> = (0..n)
        .flat_map(|i| [(i / 20) as u16, ((i / 5) % 4) as u16, (i % 5) as u16])
        .collect();
    let reps = Tensor::new(&[n, 3], idx.iter().map(|&v| v as f32).collect()).map_err(|e| e.to_string())?;
    let t =
        FactorTable::new(vec!["a".into(), "b".into(), "c".into()], cards.to_vec(), idx).map_err(|e| e.to_string())?;
    let s = factorvae_metric(&reps, &t, FactorVaeConfig::default(), &mut RandomSource::new(0))
        .map_err(|e| e.to_string())?;
    if s == 1.0 {
        Ok("accuracy 1".into())
    } else {
        Err(format!("accuracy {s}"))
    }
}

fn tiny_training() -> Result<String, String> {
    let err = |e: discond::Error| e.to_string();
    let mut cfg = ModelConfig::new(Variant::Exact, 3, 2, 2, 16);
    cfg.backbone = Backbone::Mlp { hidden: 64 };
    let mut model = Model::new(cfg, &mut RandomSource::new(1)).map_err(err)?;
    let mut adam = Adam::new(AdamConfig::with_lr(3e-3), model.params());
    let w = crate::config::preset("exact-condsprites-pb5-pr3")
        .and_then(|c| c.loss_weights())
        .map_err(|e| e.to_string())?;
    let x = Tensor::from_fn(&[32, 1, 16, 16], |i| {
        let (n, p) = (i / 256, i % 256);
        ((p / 16 + n) % 4 == 0) as u8 as f32
    });
    let mut rng = RandomSource::new(2);
    let mut first = None;
    let mut last = 0.0;
    for iter in 0..60 {
        let noise = LatentNoise::sample(model.config(), 32, &mut rng);
        let b = train_step(&mut model, &mut adam, &x, &w, iter, &noise).map_err(err)?;
        first.get_or_insert(b.recon);
        last = b.recon;
    }
    let first = first.unwrap_or(0.0);
    if last < 0.7 * first {
        Ok(format!("recon {first:.1} -> {last:.1}"))
    } else {
        Err(format!("recon {first:.1} -> {last:.1}"))
    }
}

fn checkpoint_round_trip() -> Result<String, String> {
    let mut c = Container::new();
    c.insert("a", Tensor::from_fn(&[2, 3], |i| (i as f32).sin() * 1e-30));
    c.insert(
        "b",
        Tensor::new(&[1], vec![f32::MIN_POSITIVE]).map_err(|e| e.to_string())?,
    );
    let mut bytes = Vec::new();
    c.encode(&mut bytes).map_err(|e| e.to_string())?;
    let back = Container::decode(&bytes[..]).map_err(|e| e.to_string())?;
    let mut again = Vec::new();
    back.encode(&mut again).map_err(|e| e.to_string())?;
    if bytes == again {
        Ok(format!("{} bytes", bytes.len()))
    } else {
        Err("re-encoded bytes differ".into())
    }
}

pub fn run_selftest() -> Vec<Check> {
    vec![
        check("checkpoint round trip", checkpoint_round_trip),
        check("capacity schedules", capacity_presets),
        check("gumbel-softmax argmax frequencies", gumbel_frequencies),
        check("factorvae identity oracle", factorvae_identity),
        check("tiny training run", tiny_training),
    ]
}
