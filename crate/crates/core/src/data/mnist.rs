//! MNIST from IDX files (optionally gzip-compressed), padded to 32x32.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use super::{FactorTable, ImageDataset, Pixels};
use crate::error::{Error, Result};

pub const MNIST_EXTENT: usize = 32;
const SOURCE: usize = 28;
const PAD: usize = (MNIST_EXTENT - SOURCE) / 2;
const IMAGE_MAGIC: u32 = 0x0803;
const LABEL_MAGIC: u32 = 0x0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

fn locate(dir: &Path, stem: &str) -> Result<PathBuf> {
    let plain = dir.join(stem);
    if plain.is_file() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.is_file() {
        return Ok(gz);
    }
    Err(Error::Dataset(format!(
        "{}: neither {stem} nor {stem}.gz exists",
        dir.display()
    )))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    let res = if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(BufReader::new(file)).read_to_end(&mut buf)
    } else {
        BufReader::new(file).read_to_end(&mut buf)
    };
    res.map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn be_u32(buf: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(buf[at..at + 4].try_into().unwrap())
}

fn parse_idx(path: &Path, buf: &[u8], magic: u32, dims: usize) -> Result<(Vec<usize>, usize)> {
    let header = 4 + 4 * dims;
    if buf.len() < header || be_u32(buf, 0) != magic {
        return Err(Error::Dataset(format!(
            "{}: not an IDX file with magic {magic:#06x}",
            path.display()
        )));
    }
    let shape: Vec<usize> = (0..dims).map(|k| be_u32(buf, 4 + 4 * k) as usize).collect();
    let len: usize = shape.iter().product();
    if buf.len() != header + len {
        return Err(Error::Dataset(format!(
            "{}: header promises {len} bytes of data, file holds {}",
            path.display(),
            buf.len() - header
        )));
    }
    Ok((shape, header))
}

/// Loads one split from `dir`. Images are kept as gray levels and padded
/// with two zero pixels on each side; the single factor is the digit.
pub fn load_mnist(dir: impl AsRef<Path>, split: Split) -> Result<ImageDataset> {
    let dir = dir.as_ref();
    let img_path = locate(dir, &format!("{}-images-idx3-ubyte", split.prefix()))?;
    let lbl_path = locate(dir, &format!("{}-labels-idx1-ubyte", split.prefix()))?;
    let imgs = read_all(&img_path)?;
    let lbls = read_all(&lbl_path)?;
    let (ishape, ioff) = parse_idx(&img_path, &imgs, IMAGE_MAGIC, 3)?;
    let (lshape, loff) = parse_idx(&lbl_path, &lbls, LABEL_MAGIC, 1)?;
    if ishape[1] != SOURCE || ishape[2] != SOURCE {
        return Err(Error::Dataset(format!(
            "{}: images must be 28x28, found {}x{}",
            img_path.display(),
            ishape[1],
            ishape[2]
        )));
    }
    let n = ishape[0];
    if lshape[0] != n {
        return Err(Error::Dataset(format!("{n} images but {} labels", lshape[0])));
    }
    let labels: Vec<usize> = lbls[loff..].iter().map(|&l| l as usize).collect();
    if let Some(bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::Dataset(format!(
            "{}: label {bad} outside 0..10",
            lbl_path.display()
        )));
    }
    let mut pixels = vec![0u8; n * MNIST_EXTENT * MNIST_EXTENT];
    for (src, dst) in imgs[ioff..]
        .chunks_exact(SOURCE * SOURCE)
        .zip(pixels.chunks_exact_mut(MNIST_EXTENT * MNIST_EXTENT))
    {
        for y in 0..SOURCE {
            let row = (y + PAD) * MNIST_EXTENT + PAD;
            dst[row..row + SOURCE].copy_from_slice(&src[y * SOURCE..(y + 1) * SOURCE]);
        }
    }
    let factors = FactorTable::new(
        vec!["digit".into()],
        vec![10],
        labels.iter().map(|&l| l as u16).collect(),
    )?;
    ImageDataset::new(MNIST_EXTENT, Pixels::Gray(pixels), factors, Some(labels))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Writes `images` (`n * 28 * 28` bytes) as an IDX3 file.
pub fn write_idx_images(path: impl AsRef<Path>, images: &[u8]) -> Result<()> {
    let px = SOURCE * SOURCE;
    if !images.len().is_multiple_of(px) {
        return Err(Error::InvalidArgument(format!(
            "{} bytes is not a whole number of 28x28 images",
            images.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + images.len());
    for v in [IMAGE_MAGIC, (images.len() / px) as u32, SOURCE as u32, SOURCE as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(images);
    write_file(path.as_ref(), &out)
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    write_file(path.as_ref(), &out)
}
