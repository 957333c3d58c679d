//! Latent traversal grids.

use std::path::{Path, PathBuf};

use discond::data::ImageDataset;
use discond::models::{write_grid_png, Model, TraversalAxis};

use crate::error::{invalid, CliResult};

/// One PNG per public axis, per private axis, and one for the discrete code.
/// Rows are the chosen examples; columns are traversal steps or classes.
pub fn run_traverse(
    model: &Model,
    data: &ImageDataset,
    indices: &[usize],
    steps: usize,
    range: f32,
    out: &Path,
) -> CliResult<Vec<PathBuf>> {
    if indices.is_empty() {
        return Err(invalid("no example indices given"));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= data.len()) {
        return Err(invalid(format!("example index {bad} out of range 0..{}", data.len())));
    }
    if steps == 0 {
        return Err(invalid("traversal needs at least one step"));
    }
    std::fs::create_dir_all(out).map_err(|e| invalid(format!("{}: {e}", out.display())))?;
    let cfg = model.config();
    let mut axes: Vec<TraversalAxis> = (0..cfg.public_dim).map(TraversalAxis::Public).collect();
    if cfg.has_private() {
        axes.extend((0..cfg.private_dim).map(TraversalAxis::Private));
    }
    axes.push(TraversalAxis::Discrete);
    let x = data.batch(indices);
    let mut written = Vec::new();
    for axis in axes {
        let grid = model.traverse(&x, axis, range, steps)?;
        let (kind, k) = axis.label();
        let path = out.join(format!("{kind}_{k}.png"));
        write_grid_png(&path, &grid)?;
        written.push(path);
    }
    Ok(written)
}
