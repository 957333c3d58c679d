//! Repeated metric evaluation of a trained model.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use discond::data::ImageDataset;
use discond::metrics::{
    conditional_metric, factorvae_metric, iwae_nll, mig, unsupervised_accuracy, write_reports_csv, FactorVaeConfig,
    MetricReport, RepresentationDump,
};
use discond::models::Model;
use discond::{Error, RandomSource};

use crate::config::{Dataset, RunConfig};
use crate::error::{invalid, CliError, CliResult};
use crate::train::TrainState;

const NLL_BATCH: usize = 8;

/// Model weights and prior from a checkpoint, checked against `cfg`.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> CliResult<Model> {
    Ok(TrainState::load(cfg, checkpoint)?.model)
}

fn factorvae_config(cfg: &RunConfig) -> FactorVaeConfig {
    FactorVaeConfig {
        batch: cfg.eval.vote_batch,
        train_votes: cfg.eval.train_votes,
        eval_votes: cfg.eval.eval_votes,
    }
}

/// All metric reports for one evaluation seed.
pub fn evaluate_seed(
    cfg: &RunConfig,
    model: &Model,
    data: &ImageDataset,
    dump: &RepresentationDump,
    seed: u64,
) -> CliResult<Vec<MetricReport>> {
    let e = &cfg.eval;
    let n = dump.len();
    let mut reports = Vec::new();
    let labels = data
        .labels()
        .ok_or_else(|| invalid("evaluation data has no class labels"))?;
    reports.push(MetricReport::new(
        "accuracy",
        unsupervised_accuracy(&dump.classes(), labels)?,
        n,
        seed,
    ));
    let fv = factorvae_config(cfg);
    match cfg.dataset {
        Dataset::CondSprites | Dataset::DSprites => {
            let mut rng = RandomSource::new(seed);
            reports.push(MetricReport::new(
                "FactorVAE",
                factorvae_metric(&dump.reps, &dump.factors, fv, &mut rng)?,
                n,
                seed,
            ));
            reports.push(MetricReport::new(
                "MIG",
                mig(&dump.reps, &dump.factors, e.mig_bins)?,
                n,
                seed,
            ));
            if cfg.dataset == Dataset::CondSprites {
                let mut rng = RandomSource::new(seed).derive(1);
                let cond = conditional_metric(
                    |r, f| factorvae_metric(r, f, fv, &mut rng),
                    &dump.reps,
                    &dump.factors,
                    labels,
                    e.min_class_examples,
                )?;
                reports.push(MetricReport::conditional("Cond-FactorVAE", cond, seed));
                let cond = conditional_metric(
                    |r, f| mig(r, f, e.mig_bins),
                    &dump.reps,
                    &dump.factors,
                    labels,
                    e.min_class_examples,
                )?;
                reports.push(MetricReport::conditional("Cond-MIG", cond, seed));
            }
        }
        Dataset::Mnist => {
            let m = e.nll_examples.min(data.len());
            let mut rng = RandomSource::new(seed).derive(2);
            let mut total = 0.0;
            for start in (0..m).step_by(NLL_BATCH) {
                let idx: Vec<usize> = (start..(start + NLL_BATCH).min(m)).collect();
                total += iwae_nll(model, &data.batch(&idx), e.nll_samples, &mut rng)? * idx.len() as f64;
            }
            reports.push(MetricReport::new("NLL", total / m as f64, m, seed));
        }
    }
    Ok(reports)
}

/// Mean, population standard deviation and best value of one metric across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub best: f64,
    pub repetitions: usize,
}

pub fn summarize(reports: &[MetricReport]) -> Vec<MetricSummary> {
    let mut names: Vec<&str> = Vec::new();
    for r in reports {
        if !names.contains(&r.metric.as_str()) {
            names.push(&r.metric);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let v: Vec<f64> = reports.iter().filter(|r| r.metric == name).map(|r| r.value).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
            let best = if name == "NLL" {
                v.iter().copied().fold(f64::INFINITY, f64::min)
            } else {
                v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            };
            MetricSummary {
                metric: name.to_string(),
                mean,
                std,
                best,
                repetitions: v.len(),
            }
        })
        .collect()
}

fn write_summary(path: &Path, rows: &[MetricSummary]) -> CliResult<()> {
    let io = |e| {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "metric,mean,std,best,repetitions").map_err(io)?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.metric, r.mean, r.std, r.best, r.repetitions).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Evaluates `model` on `data` once per configured seed and writes
/// `metrics.csv` and `metrics_summary.csv` into `out`.
pub fn run_eval(cfg: &RunConfig, model: &Model, data: &ImageDataset, out: &Path) -> CliResult<Vec<MetricReport>> {
    cfg.validate()?;
    if data.extent() != cfg.image_extent {
        return Err(invalid(format!(
            "evaluation data extent {} does not match config image_extent {}",
            data.extent(),
            cfg.image_extent
        )));
    }
    let dump = RepresentationDump::from_model(model, data, cfg.eval.batch)?;
    let mut reports = Vec::new();
    for r in 0..cfg.eval.repetitions {
        reports.extend(evaluate_seed(cfg, model, data, &dump, cfg.eval.seed + r as u64)?);
    }
    fs::create_dir_all(out).map_err(|e| {
        CliError::Core(Error::Io {
            path: out.to_path_buf(),
            source: e,
        })
    })?;
    write_reports_csv(out.join("metrics.csv"), &reports)?;
    write_summary(&out.join("metrics_summary.csv"), &summarize(&reports))?;
    Ok(reports)
}
