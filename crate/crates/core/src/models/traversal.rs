use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use super::{one_hot, Model};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which latent a traversal sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraversalAxis {
    Public(usize),
    /// Coordinate of the private variable, swept within each example's most likely mode.
    Private(usize),
    /// One decode per class.
    Discrete,
}

impl TraversalAxis {
    /// `(kind, axis)` used in output file names.
    pub fn label(self) -> (&'static str, usize) {
        match self {
            TraversalAxis::Public(k) => ("public", k),
            TraversalAxis::Private(k) => ("private", k),
            TraversalAxis::Discrete => ("discrete", 0),
        }
    }
}

/// `steps` evenly spaced offsets covering `[-range, range]`; a single step is offset 0.
fn offsets(range: f32, steps: usize) -> Vec<f32> {
    if steps == 1 {
        return vec![0.0];
    }
    (0..steps)
        .map(|s| -range + 2.0 * range * s as f32 / (steps - 1) as f32)
        .collect()
}

impl Model {
    /// Decoded pixel probabilities `[examples, columns, C, H, W]`.
    ///
    /// Latents are held at their posterior means with the discrete code at
    /// the most likely class and the private variable at that class's mode.
    /// Continuous sweeps add each offset to the chosen coordinate's mean;
    /// the discrete sweep decodes every class with its own private mode mean.
    pub fn traverse(&self, x: &Tensor, axis: TraversalAxis, range: f32, steps: usize) -> Result<Tensor> {
        let cfg = self.config();
        let (pb, pr, d) = (cfg.public_dim, cfg.private_dim, cfg.discrete_dim);
        match axis {
            TraversalAxis::Public(k) if k >= pb => {
                return Err(Error::InvalidArgument(format!("public axis {k} out of range 0..{pb}")))
            }
            TraversalAxis::Private(k) if !cfg.has_private() || k >= pr => {
                return Err(Error::InvalidArgument(format!("private axis {k} out of range 0..{pr}")))
            }
            TraversalAxis::Discrete => {}
            _ if steps == 0 => return Err(Error::InvalidArgument("traversal needs at least one step".into())),
            _ => {}
        }
        let codes = self.encode_means(x)?;
        let classes = codes.classes();
        let n = classes.len();
        let columns: Vec<(usize, f32)> = match axis {
            TraversalAxis::Discrete => (0..d).map(|c| (c, 0.0)).collect(),
            _ => offsets(range, steps).into_iter().map(|o| (usize::MAX, o)).collect(),
        };
        let cols = columns.len();

        let mut z = Vec::with_capacity(n * cols * pb);
        let mut w = Vec::with_capacity(n * cols * pr);
        let mut discrete = Vec::with_capacity(n * cols);
        for (i, &j) in classes.iter().enumerate() {
            for &(class, offset) in &columns {
                let mode = if class == usize::MAX { j } else { class };
                let mut zi = codes.z_mu.row(i).to_vec();
                let mut wi = codes.private_mode(i, mode).map(<[f32]>::to_vec).unwrap_or_default();
                match axis {
                    TraversalAxis::Public(k) => zi[k] += offset,
                    TraversalAxis::Private(k) => wi[k] += offset,
                    TraversalAxis::Discrete => {}
                }
                z.extend(zi);
                w.extend(wi);
                discrete.push(mode);
            }
        }
        let rows = n * cols;
        let logits = self.decode_codes(
            Tensor::new(&[rows, pb], z)?,
            cfg.has_private().then(|| Tensor::new(&[rows, pr], w)).transpose()?,
            one_hot(&discrete, d),
        )?;
        let e = cfg.image_extent;
        let probs = logits.data().iter().map(|&v| crate::tensor::sigmoid(v)).collect();
        Tensor::new(&[n, cols, cfg.channels, e, e], probs)
    }
}

/// Writes a `[rows, cols, 1, H, W]` grid of values in `[0, 1]` as an 8-bit
/// grayscale PNG, one example per row of tiles.
pub fn write_grid_png(path: impl AsRef<Path>, grid: &Tensor) -> Result<()> {
    let (rows, cols, h, w) = match *grid.shape() {
        [r, c, 1, h, w] => (r, c, h, w),
        ref s => {
            return Err(Error::shape(
                "write_grid_png",
                format!("expected [rows, cols, 1, H, W], got {s:?}"),
            ))
        }
    };
    let (width, height) = (cols * w, rows * h);
    let mut pixels = vec![0u8; width * height];
    for r in 0..rows {
        for c in 0..cols {
            let tile = &grid.data()[(r * cols + c) * h * w..(r * cols + c + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let v = tile[y * w + x].clamp(0.0, 1.0);
                    pixels[(r * h + y) * width + c * w + x] = (v * 255.0).round() as u8;
                }
            }
        }
    }
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(&pixels).map_err(to_io)?;
    writer.finish().map_err(to_io)
}
