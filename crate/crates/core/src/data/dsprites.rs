//! dSprites archive reader, CondSprites extraction, and a procedural writer
//! that produces archives in the same layout.
//!
//! The archive is a zip of `.npy` arrays: `imgs` (`[737280, 64, 64]`, one
//! byte per pixel), `latents_classes` (`[737280, 6]` int64 with columns color,
//! shape, scale, orientation, posX, posY) and `latents_values`. Examples are
//! ordered with posY varying fastest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use npyz::{NpyHeader, Order, WriterBuilder};
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, ZipArchive, ZipWriter};

use super::{pack_bits, FactorTable, ImageDataset, Pixels};
use crate::error::{Error, Result};

pub const DSPRITES_LEN: usize = 737_280;
pub const SOURCE_EXTENT: usize = 64;
pub const FACTOR_NAMES: [&str; 5] = ["shape", "scale", "orientation", "posX", "posY"];
pub const FACTOR_SIZES: [usize; 5] = [3, 6, 40, 32, 32];

pub const SQUARE: u16 = 0;
pub const ELLIPSE: u16 = 1;
pub const HEART: u16 = 2;
/// Position index held fixed in CondSprites: posY for squares, posX for ellipses.
pub const CONDSPRITES_FIXED_POSITION: u16 = 16;
pub const CONDSPRITES_LEN: usize = 15_360;

const SHAPE: usize = 0;
const POS_X: usize = 3;
const POS_Y: usize = 4;

fn archive_error(path: &Path, detail: impl std::fmt::Display) -> Error {
    Error::Dataset(format!("{}: {detail}", path.display()))
}

fn open_entry<'a>(archive: &'a mut ZipArchive<File>, path: &Path, name: &str) -> Result<zip::read::ZipFile<'a, File>> {
    archive
        .by_name(&format!("{name}.npy"))
        .map_err(|e| archive_error(path, format!("entry {name}.npy: {e}")))
}

fn read_header(r: &mut impl Read, path: &Path, name: &str) -> Result<NpyHeader> {
    let h = NpyHeader::from_reader(r).map_err(|e| archive_error(path, format!("{name}: bad npy header: {e}")))?;
    if h.order() != Order::C {
        return Err(archive_error(
            path,
            format!("{name}: Fortran-ordered arrays are not supported"),
        ));
    }
    Ok(h)
}

/// Factor rows `[N, 5]` from the int64 `latents_classes` array.
fn read_factors(archive: &mut ZipArchive<File>, path: &Path) -> Result<Vec<u16>> {
    let mut entry = BufReader::new(open_entry(archive, path, "latents_classes")?);
    let h = read_header(&mut entry, path, "latents_classes")?;
    if h.shape() != [DSPRITES_LEN as u64, 6] || h.dtype().descr() != "'<i8'" {
        return Err(archive_error(
            path,
            format!(
                "latents_classes must be int64 [{DSPRITES_LEN}, 6], found {} {:?}",
                h.dtype().descr(),
                h.shape()
            ),
        ));
    }
    let mut raw = vec![0u8; DSPRITES_LEN * 6 * 8];
    entry
        .read_exact(&mut raw)
        .map_err(|e| archive_error(path, format!("latents_classes payload: {e}")))?;
    let mut rows = Vec::with_capacity(DSPRITES_LEN * 5);
    for (n, rec) in raw.chunks_exact(48).enumerate() {
        let v: Vec<i64> = rec
            .chunks_exact(8)
            .map(|b| i64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if v[0] != 0 {
            return Err(archive_error(
                path,
                format!("example {n}: color index {} (expected 0)", v[0]),
            ));
        }
        for (f, &card) in FACTOR_SIZES.iter().enumerate() {
            let x = v[f + 1];
            if x < 0 || x as usize >= card {
                return Err(archive_error(
                    path,
                    format!("example {n}: {} index {x} outside 0..{card}", FACTOR_NAMES[f]),
                ));
            }
            rows.push(x as u16);
        }
    }
    Ok(rows)
}

/// 2x2 max-pool of a binary `src_extent` image.
fn downscale(src: &[u8], src_extent: usize, out: &mut [u8]) {
    let e = src_extent / 2;
    for y in 0..e {
        for x in 0..e {
            let at = |yy: usize, xx: usize| src[yy * src_extent + xx];
            out[y * e + x] = at(2 * y, 2 * x) | at(2 * y, 2 * x + 1) | at(2 * y + 1, 2 * x) | at(2 * y + 1, 2 * x + 1);
        }
    }
}

/// Streams the archive keeping the examples accepted by `keep`, in archive order.
fn read_archive(path: &Path, extent: usize, keep: impl Fn(&[u16]) -> bool) -> Result<ImageDataset> {
    if extent != SOURCE_EXTENT && extent != SOURCE_EXTENT / 2 {
        return Err(Error::InvalidArgument(format!(
            "dSprites extent must be 64 or 32, got {extent}"
        )));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut archive = ZipArchive::new(file).map_err(|e| archive_error(path, format!("not a zip archive: {e}")))?;
    let rows = read_factors(&mut archive, path)?;

    let mut entry = BufReader::with_capacity(1 << 20, open_entry(&mut archive, path, "imgs")?);
    let h = read_header(&mut entry, path, "imgs")?;
    let descr = h.dtype().descr();
    let expect = [DSPRITES_LEN as u64, SOURCE_EXTENT as u64, SOURCE_EXTENT as u64];
    if h.shape() != expect || !(descr == "'|u1'" || descr == "'|b1'") {
        return Err(archive_error(
            path,
            format!(
                "imgs must be one-byte [{DSPRITES_LEN}, 64, 64], found {descr} {:?}",
                h.shape()
            ),
        ));
    }
    let mut src = vec![0u8; SOURCE_EXTENT * SOURCE_EXTENT];
    let mut small = vec![0u8; extent * extent];
    let mut bits = Vec::new();
    let mut kept = Vec::new();
    for n in 0..DSPRITES_LEN {
        entry
            .read_exact(&mut src)
            .map_err(|e| archive_error(path, format!("imgs payload at example {n}: {e}")))?;
        let row = &rows[n * 5..(n + 1) * 5];
        if !keep(row) {
            continue;
        }
        // Binarize at 0.5.
        src.iter_mut().for_each(|v| *v = (*v >= 1) as u8);
        if extent == SOURCE_EXTENT {
            pack_bits(&src, &mut bits);
        } else {
            downscale(&src, SOURCE_EXTENT, &mut small);
            pack_bits(&small, &mut bits);
        }
        kept.extend_from_slice(row);
    }
    let labels = kept.chunks(5).map(|r| r[SHAPE] as usize).collect();
    let table = FactorTable::new(
        FACTOR_NAMES.iter().map(|s| s.to_string()).collect(),
        FACTOR_SIZES.to_vec(),
        kept,
    )?;
    ImageDataset::new(extent, Pixels::Binary(bits), table, Some(labels))
}

/// All 737280 examples, binarized, at extent 64 or max-pooled to 32.
/// Class labels are the shape index.
pub fn load_dsprites(path: impl AsRef<Path>, extent: usize) -> Result<ImageDataset> {
    read_archive(path.as_ref(), extent, |_| true)
}

fn in_condsprites(row: &[u16]) -> bool {
    (row[SHAPE] == SQUARE && row[POS_Y] == CONDSPRITES_FIXED_POSITION)
        || (row[SHAPE] == ELLIPSE && row[POS_X] == CONDSPRITES_FIXED_POSITION)
}

/// Squares first, then ellipses, each in source order.
fn condsprites_order(factors: &FactorTable, candidates: impl Iterator<Item = usize> + Clone) -> Vec<usize> {
    let squares = candidates.clone().filter(|&n| factors.get(n, SHAPE) == SQUARE as usize);
    let ellipses = candidates.filter(|&n| factors.get(n, SHAPE) == ELLIPSE as usize);
    squares.chain(ellipses).collect()
}

/// Squares with posY index 16 and ellipses with posX index 16; hearts are
/// dropped. Labels are 0 for squares and 1 for ellipses.
pub fn build_condsprites(dsprites: &ImageDataset) -> Result<ImageDataset> {
    let f = dsprites.factors();
    if dsprites.len() != DSPRITES_LEN || f.names() != FACTOR_NAMES || f.cardinalities() != FACTOR_SIZES {
        return Err(Error::Dataset(format!(
            "CondSprites needs the full dSprites set ({DSPRITES_LEN} examples, factors {FACTOR_NAMES:?}), got {} examples with {:?}",
            dsprites.len(),
            f.names()
        )));
    }
    let order = condsprites_order(f, (0..dsprites.len()).filter(|&n| in_condsprites(f.row(n))));
    dsprites.subset(&order)
}

/// Same content as `build_condsprites(&load_dsprites(path, extent)?)`
/// without holding the full set in memory.
pub fn condsprites_from_archive(path: impl AsRef<Path>, extent: usize) -> Result<ImageDataset> {
    let kept = read_archive(path.as_ref(), extent, in_condsprites)?;
    let order = condsprites_order(kept.factors(), 0..kept.len());
    kept.subset(&order)
}

/// Factor values stored in `latents_values`, matching the published grid.
fn latent_value(factor: usize, index: usize) -> f64 {
    match factor {
        SHAPE => index as f64 + 1.0,
        1 => 0.5 + 0.1 * index as f64,
        2 => 2.0 * std::f64::consts::PI * index as f64 / 39.0,
        _ => index as f64 / 31.0,
    }
}

/// Rasterizes one sprite onto a 64x64 canvas of zeros and ones.
pub fn render_sprite(factors: [usize; 5], out: &mut [u8]) {
    let [shape, scale, orientation, pos_x, pos_y] = factors;
    out.fill(0);
    let e = SOURCE_EXTENT as f64;
    let cx = 10.0 + 44.0 * pos_x as f64 / 31.0;
    let cy = 10.0 + 44.0 * pos_y as f64 / 31.0;
    let r = 9.0 * (0.5 + 0.1 * scale as f64);
    let theta = 2.0 * std::f64::consts::PI * orientation as f64 / 40.0;
    let (sin, cos) = (libm::sin(theta), libm::cos(theta));
    let reach = 1.6 * r;
    let lo = |c: f64| ((c - reach).floor().max(0.0)) as usize;
    let hi = |c: f64| ((c + reach).ceil().min(e - 1.0)) as usize;
    for y in lo(cy)..=hi(cy) {
        for x in lo(cx)..=hi(cx) {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let u = (cos * dx + sin * dy) / r;
            let v = (-sin * dx + cos * dy) / r;
            let inside = match shape as u16 {
                SQUARE => u.abs() <= 1.0 && v.abs() <= 1.0,
                ELLIPSE => u * u + 4.0 * v * v <= 1.0,
                _ => {
                    let (hx, hy) = (1.2 * u, -1.2 * v + 0.1);
                    let a = hx * hx + hy * hy - 1.0;
                    a * a * a - hx * hx * hy * hy * hy <= 0.0
                }
            };
            out[y * SOURCE_EXTENT + x] = inside as u8;
        }
    }
}

/// Factor indices of example `n` in archive order.
pub fn factors_of(mut n: usize) -> [usize; 5] {
    let mut f = [0; 5];
    for k in (0..5).rev() {
        f[k] = n % FACTOR_SIZES[k];
        n /= FACTOR_SIZES[k];
    }
    f
}

/// Writes a full-size archive of procedurally drawn sprites (square,
/// ellipse, heart) in the dSprites layout.
pub fn write_synthetic_dsprites(path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("partial");
    let io = |e: std::io::Error| Error::io(&tmp, e);
    let zip_err = |e: zip::result::ZipError| Error::io(&tmp, std::io::Error::other(e));
    let file = File::create(&tmp).map_err(io)?;
    let mut zip = ZipWriter::new(BufWriter::new(file));
    let options = SimpleFileOptions::default()
        .compression_method(CompressionMethod::Deflated)
        .compression_level(Some(1));

    zip.start_file("latents_classes.npy", options).map_err(zip_err)?;
    {
        let mut w = npyz::WriteOptions::<i64>::new()
            .default_dtype()
            .shape(&[DSPRITES_LEN as u64, 6])
            .writer(BufWriter::new(&mut zip))
            .begin_nd()
            .map_err(io)?;
        for n in 0..DSPRITES_LEN {
            w.push(&0).map_err(io)?;
            for v in factors_of(n) {
                w.push(&(v as i64)).map_err(io)?;
            }
        }
        w.finish().map_err(io)?;
    }

    zip.start_file("latents_values.npy", options).map_err(zip_err)?;
    {
        let mut w = npyz::WriteOptions::<f64>::new()
            .default_dtype()
            .shape(&[DSPRITES_LEN as u64, 6])
            .writer(BufWriter::new(&mut zip))
            .begin_nd()
            .map_err(io)?;
        for n in 0..DSPRITES_LEN {
            w.push(&1.0).map_err(io)?;
            for (k, v) in factors_of(n).into_iter().enumerate() {
                w.push(&latent_value(k, v)).map_err(io)?;
            }
        }
        w.finish().map_err(io)?;
    }

    zip.start_file("imgs.npy", options).map_err(zip_err)?;
    {
        let mut w = npyz::WriteOptions::<u8>::new()
            .default_dtype()
            .shape(&[DSPRITES_LEN as u64, SOURCE_EXTENT as u64, SOURCE_EXTENT as u64])
            .writer(BufWriter::with_capacity(1 << 20, &mut zip))
            .begin_nd()
            .map_err(io)?;
        let mut canvas = vec![0u8; SOURCE_EXTENT * SOURCE_EXTENT];
        for n in 0..DSPRITES_LEN {
            render_sprite(factors_of(n), &mut canvas);
            w.extend(canvas.iter().copied()).map_err(io)?;
        }
        w.finish().map_err(io)?;
    }

    let mut inner = zip.finish().map_err(zip_err)?;
    inner.flush().map_err(io)?;
    drop(inner);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
