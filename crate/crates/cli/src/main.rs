use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use discond::data::{condsprites_from_archive, write_synthetic_dsprites, Split};
use discond_cli::config::{preset, presets, RunConfig};
use discond_cli::datasets::{self, DataPaths};
use discond_cli::error::{CliError, CliResult};
use discond_cli::eval::{load_model, run_eval, summarize};
use discond_cli::selftest::run_selftest;
use discond_cli::train::{run_train, RunDir};
use discond_cli::traverse::run_traverse;

#[derive(Parser)]
#[command(
    name = "discond",
    version,
    about = "Discond-VAE and JointVAE training and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct DataArgs {
    /// dSprites npz archive
    #[arg(long)]
    dsprites: Option<PathBuf>,
    /// CondSprites cache written by make-condsprites
    #[arg(long)]
    condsprites: Option<PathBuf>,
    /// Directory holding the MNIST IDX files
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
}

impl From<DataArgs> for DataPaths {
    fn from(a: DataArgs) -> Self {
        DataPaths {
            dsprites: a.dsprites,
            condsprites: a.condsprites,
            mnist_dir: a.mnist_dir,
        }
    }
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON run config
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset (see `discond presets`)
    #[arg(long)]
    preset: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> CliResult<Option<RunConfig>> {
        match (&self.config, &self.preset) {
            (Some(p), _) => RunConfig::load(p).map(Some),
            (None, Some(name)) => preset(name).map(Some),
            (None, None) => Ok(None),
        }
    }
}

/// Where a trained model comes from: a run directory or an explicit checkpoint plus config.
#[derive(Args, Clone)]
struct ModelArgs {
    /// Run directory written by `train`
    #[arg(long)]
    run: Option<PathBuf>,
    /// Checkpoint file; needs --config or --preset unless --run is given
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

impl ModelArgs {
    fn resolve(&self) -> CliResult<(RunConfig, PathBuf)> {
        let run = self.run.as_ref().map(RunDir::new);
        let cfg = match (self.config.resolve()?, &run) {
            (Some(c), _) => c,
            (None, Some(r)) => RunConfig::load(&r.config())?,
            (None, None) => return Err(CliError::Validation("give --run or a config with --checkpoint".into())),
        };
        let ckpt = match (&self.checkpoint, &run) {
            (Some(p), _) => p.clone(),
            (None, Some(r)) => r.checkpoint(),
            (None, None) => return Err(CliError::Validation("give --run or --checkpoint".into())),
        };
        Ok((cfg, ckpt))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints, a loss log and a representation dump
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Run directory
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Stop after this many optimizer steps
        #[arg(long)]
        max_iters: Option<u64>,
        /// Train on a random subset of N examples
        #[arg(long)]
        subset: Option<usize>,
        /// Override the image extent (sprites: 64 or 32)
        #[arg(long)]
        extent: Option<usize>,
        /// Continue from this checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compute metrics over repeated evaluation seeds
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Output directory for metrics.csv (defaults to the run directory)
        #[arg(long)]
        out: Option<PathBuf>,
        /// First evaluation seed
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        repetitions: Option<usize>,
    },
    /// Write latent traversal grids
    Traverse {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated example indices, one grid row each
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5,6,7")]
        indices: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        /// Offsets span [-range, range] around each posterior mean
        #[arg(long, default_value_t = 2.5)]
        range: f32,
    },
    /// Derive the CondSprites cache from a dSprites archive
    MakeCondsprites {
        #[arg(long)]
        dsprites: PathBuf,
        /// Cache file; the factor CSV goes next to it
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        extent: usize,
    },
    /// Write a procedurally drawn archive in the dSprites layout
    SynthDsprites {
        #[arg(long)]
        out: PathBuf,
    },
    /// List the built-in presets or write them as JSON files
    Presets {
        #[arg(long)]
        write: Option<PathBuf>,
    },
    /// Run quick internal checks
    Selftest,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(discond::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train {
            config,
            data,
            out,
            seed,
            max_iters,
            subset,
            extent,
            resume,
        } => {
            let mut cfg = config
                .resolve()?
                .ok_or_else(|| CliError::Validation("train needs --config or --preset".into()))?;
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.max_iters = max_iters.or(cfg.max_iters);
            cfg.subset = subset.or(cfg.subset);
            cfg.image_extent = extent.unwrap_or(cfg.image_extent);
            cfg.validate()?;
            let paths = DataPaths::from(data);
            let train = datasets::load(&cfg, &paths, Split::Train)?;
            let eval = match cfg.dataset {
                discond_cli::Dataset::Mnist => Some(datasets::load(&cfg, &paths, Split::Test)?),
                _ => None,
            };
            let started = Instant::now();
            let summary = run_train(
                &cfg,
                &train,
                Some(eval.as_ref().unwrap_or(&train)),
                &RunDir::new(&out),
                resume.as_deref(),
            )?;
            let last = summary
                .last
                .map(|b| format!(" recon {:.3} total {:.3}", b.recon, b.total))
                .unwrap_or_default();
            println!(
                "trained {} iterations in {:.1}s{last}; checkpoint {}",
                summary.iters,
                started.elapsed().as_secs_f64(),
                summary.checkpoint.display()
            );
        }
        Command::Eval {
            model,
            data,
            out,
            seed,
            repetitions,
        } => {
            let (mut cfg, ckpt) = model.resolve()?;
            cfg.eval.seed = seed.unwrap_or(cfg.eval.seed);
            cfg.eval.repetitions = repetitions.unwrap_or(cfg.eval.repetitions);
            let m = load_model(&cfg, &ckpt)?;
            let data = datasets::load(&cfg, &DataPaths::from(data), Split::Test)?;
            let out = out
                .or(model.run.clone())
                .ok_or_else(|| CliError::Validation("eval needs --out when --run is not given".into()))?;
            let reports = run_eval(&cfg, &m, &data, &out)?;
            for s in summarize(&reports) {
                println!(
                    "{:<16} mean {:.4} std {:.4} best {:.4} ({} seeds)",
                    s.metric, s.mean, s.std, s.best, s.repetitions
                );
            }
        }
        Command::Traverse {
            model,
            data,
            out,
            indices,
            steps,
            range,
        } => {
            let (cfg, ckpt) = model.resolve()?;
            let m = load_model(&cfg, &ckpt)?;
            let data = datasets::load(&cfg, &DataPaths::from(data), Split::Test)?;
            for p in run_traverse(&m, &data, &indices, steps, range, &out)? {
                println!("{}", p.display());
            }
        }
        Command::MakeCondsprites { dsprites, out, extent } => {
            let started = Instant::now();
            let ds = condsprites_from_archive(&dsprites, extent)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            }
            ds.save(&out)?;
            let csv = out.with_extension("csv");
            ds.write_factor_csv(&csv)?;
            let labels = ds.labels().unwrap_or(&[]);
            let squares = labels.iter().filter(|&&l| l == 0).count();
            let ellipses = labels.iter().filter(|&&l| l == 1).count();
            println!(
                "{} examples ({squares} squares, {ellipses} ellipses, {} other) at {extent}x{extent} in {:.1}s -> {}, {}",
                ds.len(),
                ds.len() - squares - ellipses,
                started.elapsed().as_secs_f64(),
                out.display(),
                csv.display()
            );
        }
        Command::SynthDsprites { out } => {
            write_synthetic_dsprites(&out)?;
            println!("{}", out.display());
        }
        Command::Presets { write } => match write {
            Some(dir) => {
                std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
                for (name, cfg) in presets() {
                    let path = dir.join(format!("{name}.json"));
                    std::fs::write(&path, cfg.to_json() + "\n").map_err(|e| io_err(&path, e))?;
                }
            }
            None => presets().iter().for_each(|(name, _)| println!("{name}")),
        },
        Command::Selftest => {
            let checks = run_selftest();
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if checks.iter().any(|c| !c.passed) {
                return Err(CliError::Numerical("selftest failed".into()));
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
