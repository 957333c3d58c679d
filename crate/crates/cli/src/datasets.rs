//! Locating and loading the dataset a config asks for.

use std::path::{Path, PathBuf};

use discond::data::{condsprites_from_archive, load_dsprites, load_mnist, ImageDataset, Split};

use crate::config::{Dataset, RunConfig};
use crate::error::{invalid, CliResult};

#[derive(Clone, Debug, Default)]
pub struct DataPaths {
    /// dSprites npz archive.
    pub dsprites: Option<PathBuf>,
    /// CondSprites cache written by `make-condsprites`.
    pub condsprites: Option<PathBuf>,
    /// Directory with the four MNIST IDX files.
    pub mnist_dir: Option<PathBuf>,
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str, dataset: Dataset) -> CliResult<&'a Path> {
    p.as_deref()
        .ok_or_else(|| invalid(format!("{} needs {flag}", dataset.name())))
}

/// Training (`Split::Train`) or evaluation (`Split::Test`) examples. The
/// sprite datasets have no held-out split and return the full set for both.
pub fn load(cfg: &RunConfig, paths: &DataPaths, split: Split) -> CliResult<ImageDataset> {
    let e = cfg.image_extent;
    let data = match cfg.dataset {
        Dataset::CondSprites => match (&paths.condsprites, &paths.dsprites) {
            (Some(cache), _) => ImageDataset::load(cache)?,
            (None, Some(archive)) => condsprites_from_archive(archive, e)?,
            (None, None) => {
                return Err(invalid(
                    "condsprites needs --condsprites <cache> or --dsprites <archive>",
                ))
            }
        },
        Dataset::DSprites => load_dsprites(require(&paths.dsprites, "--dsprites <archive>", cfg.dataset)?, e)?,
        Dataset::Mnist => load_mnist(require(&paths.mnist_dir, "--mnist-dir <dir>", cfg.dataset)?, split)?,
    };
    if data.extent() != e {
        return Err(invalid(format!(
            "{} images are {}x{} but the config asks for extent {e}",
            cfg.dataset.name(),
            data.extent(),
            data.extent()
        )));
    }
    Ok(data)
}
