//! Training loop, checkpoints and run-directory layout.

use std::borrow::Cow;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use discond::data::{batches, ImageDataset};
use discond::metrics::RepresentationDump;
use discond::models::{LatentNoise, Model};
use discond::objective::{train_step, LossBreakdown};
use discond::prior::apply_policy;
use discond::tensor::{read_container, write_container, Adam, AdamConfig, Container};
use discond::{Error, RandomSource, Tensor};

use crate::config::RunConfig;
use crate::error::{invalid, CliError, CliResult};

const MODEL_STREAM: u64 = 1;
const PRIOR_STREAM: u64 = 2;
const EPOCH_STREAM: u64 = 1 << 40;
const NOISE_STREAM: u64 = 2 << 40;
const ENCODE_BATCH: usize = 256;
const LOG_EVERY: u64 = 100;

/// Files of one run.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn loss_log(&self) -> PathBuf {
        self.root.join("loss.csv")
    }

    /// Most recent checkpoint.
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.dcvk")
    }

    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("epoch_{epoch:04}.dcvk"))
    }

    pub fn representations(&self) -> PathBuf {
        self.root.join("representations.dcvk")
    }
}

/// Model, optimizer and the number of completed steps.
pub struct TrainState {
    pub model: Model,
    pub optimizer: Adam,
    pub iter: u64,
}

impl TrainState {
    pub fn fresh(cfg: &RunConfig) -> CliResult<Self> {
        let base = RandomSource::new(cfg.seed);
        let mut model = Model::new(cfg.model_config(), &mut base.derive(MODEL_STREAM))?;
        let prior = cfg.prior_policy().initial(&model, &mut base.derive(PRIOR_STREAM));
        model.set_prior(prior)?;
        let optimizer = Adam::new(AdamConfig::with_lr(cfg.learning_rate), model.params());
        Ok(TrainState {
            model,
            optimizer,
            iter: 0,
        })
    }

    pub fn to_container(&self) -> Container {
        let mut c = self.model.params().to_container("model.");
        c.extend(self.optimizer.to_container());
        c.insert("prior.mu", self.model.prior().mu.clone());
        let limbs = (0..4).map(|i| ((self.iter >> (16 * i)) & 0xffff) as f32).collect();
        c.insert("state.iter", Tensor::new(&[4], limbs).expect("four limbs"));
        c
    }

    /// Restores a checkpoint into a model built from `cfg`; shapes must agree.
    pub fn from_container(cfg: &RunConfig, c: &Container) -> CliResult<Self> {
        let mut state = TrainState::fresh(cfg)?;
        state.model.params_mut().load_values(c, "model.")?;
        let prior = discond::distributions::PriorMeans::from_tensor(c.require("prior.mu")?.clone())?;
        state.model.set_prior(prior)?;
        if c.get("adam.step").is_some() {
            state.optimizer.load(c)?;
        }
        if let Some(limbs) = c.get("state.iter") {
            state.iter = limbs
                .data()
                .iter()
                .enumerate()
                .fold(0u64, |acc, (i, &v)| acc | ((v as u64) << (16 * i)));
        }
        Ok(state)
    }

    pub fn load(cfg: &RunConfig, path: &Path) -> CliResult<Self> {
        TrainState::from_container(cfg, &read_container(path)?)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        }
        let tmp = path.with_extension("partial");
        write_container(&tmp, &self.to_container())?;
        fs::rename(&tmp, path).map_err(|e| io(path, e))?;
        Ok(())
    }
}

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub iters: u64,
    pub last: Option<LossBreakdown>,
    pub checkpoint: PathBuf,
}

/// Opens the loss log for appending, keeping only rows before `start`.
fn open_loss_log(path: &Path, start: u64) -> CliResult<BufWriter<File>> {
    let mut kept = Vec::new();
    if start > 0 && path.exists() {
        let f = File::open(path).map_err(|e| io(path, e))?;
        for line in BufReader::new(f).lines().skip(1) {
            let line = line.map_err(|e| io(path, e))?;
            match line.split(',').next().and_then(|s| s.parse::<u64>().ok()) {
                Some(i) if i < start => kept.push(line),
                _ => break,
            }
        }
    }
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(path)
        .map_err(|e| io(path, e))?;
    let mut w = BufWriter::new(f);
    writeln!(w, "{}", LossBreakdown::CSV_HEADER).map_err(|e| io(path, e))?;
    for line in kept {
        writeln!(w, "{line}").map_err(|e| io(path, e))?;
    }
    Ok(w)
}

/// Trains on `data`, writing the config echo, the loss log and checkpoints
/// under `run`. With `resume`, continues from that checkpoint; the result is
/// identical to an uninterrupted run. When `eval_data` is given, its
/// posterior means are dumped at the end.
pub fn run_train(
    cfg: &RunConfig,
    data: &ImageDataset,
    eval_data: Option<&ImageDataset>,
    run: &RunDir,
    resume: Option<&Path>,
) -> CliResult<TrainSummary> {
    cfg.validate()?;
    if data.extent() != cfg.image_extent {
        return Err(invalid(format!(
            "dataset extent {} does not match config image_extent {}",
            data.extent(),
            cfg.image_extent
        )));
    }
    let data: Cow<ImageDataset> = match cfg.subset {
        Some(k) if k < data.len() => Cow::Owned(data.random_subset(k, cfg.seed)?),
        _ => Cow::Borrowed(data),
    };
    let n = data.len();
    if cfg.batch_size > n {
        return Err(invalid(format!(
            "batch size {} exceeds the {n} training examples",
            cfg.batch_size
        )));
    }
    fs::create_dir_all(&run.root).map_err(|e| io(&run.root, e))?;
    fs::write(run.config(), cfg.to_json()).map_err(|e| io(&run.config(), e))?;

    let mut state = match resume {
        Some(path) => TrainState::load(cfg, path)?,
        None => TrainState::fresh(cfg)?,
    };
    let weights = cfg.loss_weights()?;
    let policy = cfg.prior_policy();
    let base = RandomSource::new(cfg.seed);
    let steps_per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let mut total = cfg.epochs as u64 * steps_per_epoch;
    if let Some(m) = cfg.max_iters {
        total = total.min(m);
    }
    let checkpoint_every = ((cfg.epochs as f64 * 0.1).ceil() as usize).max(1);
    let mut log = open_loss_log(&run.loss_log(), state.iter)?;
    let log_path = run.loss_log();

    let mut order: Option<(u64, Vec<Vec<usize>>)> = None;
    let mut last = None;
    while state.iter < total {
        let iter = state.iter;
        let epoch = iter / steps_per_epoch;
        let pos = (iter % steps_per_epoch) as usize;
        if order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut rng = base.derive(EPOCH_STREAM + epoch);
            order = Some((epoch, batches(n, cfg.batch_size, &mut rng)?));
        }
        let idx = &order.as_ref().expect("epoch order").1[pos];
        let x = data.batch(idx);
        let noise = LatentNoise::sample(state.model.config(), idx.len(), &mut base.derive(NOISE_STREAM + iter));
        let b = match train_step(&mut state.model, &mut state.optimizer, &x, &weights, iter, &noise) {
            Ok(b) => b,
            Err(e @ Error::NonFinite { .. }) => {
                log.flush().map_err(|e| io(&log_path, e))?;
                return Err(CliError::Numerical(format!(
                    "iteration {iter}: {e}; last good checkpoint kept at {}",
                    run.checkpoint().display()
                )));
            }
            Err(e) => return Err(e.into()),
        };
        writeln!(log, "{}", b.csv_row(iter)).map_err(|e| io(&log_path, e))?;
        if iter % LOG_EVERY == 0 {
            log::info!("iter {iter}: recon {:.3} total {:.3}", b.recon, b.total);
        }
        state.iter += 1;
        last = Some(b);

        if pos as u64 == steps_per_epoch - 1 {
            let finished = epoch as usize + 1;
            if apply_policy(&policy, finished, cfg.epochs, &mut state.model, &data, ENCODE_BATCH)? {
                log::info!("epoch {finished}: prior means re-estimated");
            }
            if finished.is_multiple_of(checkpoint_every) || finished == cfg.epochs {
                log.flush().map_err(|e| io(&log_path, e))?;
                state.save(&run.epoch_checkpoint(finished))?;
                state.save(&run.checkpoint())?;
            }
        }
    }
    log.flush().map_err(|e| io(&log_path, e))?;
    state.save(&run.checkpoint())?;
    if let Some(eval) = eval_data {
        let dump = RepresentationDump::from_model(&state.model, eval, ENCODE_BATCH)?;
        write_container(run.representations(), &dump.to_container())?;
    }
    Ok(TrainSummary {
        iters: state.iter,
        last,
        checkpoint: run.checkpoint(),
    })
}

/// `(iter, recon)` pairs from a loss log.
pub fn read_recon_curve(path: &Path) -> CliResult<Vec<(u64, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
    text.lines()
        .skip(1)
        .map(|l| {
            let mut f = l.split(',');
            let iter = f.next().and_then(|s| s.parse().ok());
            let recon = f.next().and_then(|s| s.parse().ok());
            iter.zip(recon)
                .ok_or_else(|| invalid(format!("{}: bad row {l:?}", path.display())))
        })
        .collect()
}
