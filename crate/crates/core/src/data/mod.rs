//! Image datasets with ground-truth generative factors: dSprites (and the
//! CondSprites subset derived from it), MNIST, and seeded mini-batching.

pub mod dsprites;
pub mod mnist;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_container, write_container, Container, RandomSource, Tensor};

pub use dsprites::{
    build_condsprites, condsprites_from_archive, load_dsprites, write_synthetic_dsprites, CONDSPRITES_FIXED_POSITION,
    CONDSPRITES_LEN, DSPRITES_LEN,
};
pub use mnist::{load_mnist, write_idx_images, write_idx_labels, Split};

/// Per-example integer factor indices, `[N, F]` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FactorTable {
    names: Vec<String>,
    cardinalities: Vec<usize>,
    indices: Vec<u16>,
}

impl FactorTable {
    pub fn new(names: Vec<String>, cardinalities: Vec<usize>, indices: Vec<u16>) -> Result<Self> {
        let f = names.len();
        if cardinalities.len() != f || (f == 0 && !indices.is_empty()) || (f > 0 && !indices.len().is_multiple_of(f)) {
            return Err(Error::Dataset(format!(
                "factor table: {} names, {} cardinalities, {} indices",
                f,
                cardinalities.len(),
                indices.len()
            )));
        }
        if let Some((k, &v)) = indices
            .iter()
            .enumerate()
            .find(|(k, &v)| v as usize >= cardinalities[k % f])
        {
            return Err(Error::Dataset(format!(
                "factor {} of example {} is {v}, cardinality {}",
                names[k % f],
                k / f,
                cardinalities[k % f]
            )));
        }
        Ok(FactorTable {
            names,
            cardinalities,
            indices,
        })
    }

    pub fn len(&self) -> usize {
        if self.names.is_empty() {
            0
        } else {
            self.indices.len() / self.names.len()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_factors(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cardinalities
    }

    pub fn get(&self, example: usize, factor: usize) -> usize {
        self.indices[example * self.names.len() + factor] as usize
    }

    pub fn row(&self, example: usize) -> &[u16] {
        let f = self.names.len();
        &self.indices[example * f..(example + 1) * f]
    }

    pub fn column(&self, factor: usize) -> Vec<usize> {
        (0..self.len()).map(|n| self.get(n, factor)).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn subset(&self, examples: &[usize]) -> FactorTable {
        let indices = examples.iter().flat_map(|&n| self.row(n).iter().copied()).collect();
        FactorTable {
            names: self.names.clone(),
            cardinalities: self.cardinalities.clone(),
            indices,
        }
    }

    /// Factors taking more than one value among the rows present.
    pub fn active_factors(&self) -> Vec<usize> {
        (0..self.num_factors())
            .filter(|&f| {
                let first = self.indices.get(f).copied();
                (0..self.len()).any(|n| Some(self.indices[n * self.num_factors() + f]) != first)
            })
            .collect()
    }

    /// Stores the table as `factors` (`[N, F]`) plus one `factor.{i}.{name}`
    /// entry per factor holding its cardinality.
    pub fn write_into(&self, c: &mut Container) {
        let idx = self.indices.iter().map(|&v| v as f32).collect();
        c.insert("factors", Tensor::new(&[self.len(), self.num_factors()], idx).unwrap());
        for (i, (name, &card)) in self.names.iter().zip(&self.cardinalities).enumerate() {
            c.insert(
                format!("factor.{i}.{name}"),
                Tensor::new(&[1], vec![card as f32]).unwrap(),
            );
        }
    }

    /// Reads a table written by [`FactorTable::write_into`] and checks it has `n` rows.
    pub fn from_container(c: &Container, n: usize) -> Result<FactorTable> {
        let mut named: Vec<(usize, String, usize)> = c
            .iter()
            .filter_map(|(k, t)| {
                let rest = k.strip_prefix("factor.")?;
                let (i, name) = rest.split_once('.')?;
                Some((i.parse().ok()?, name.to_string(), t.data().first().copied()? as usize))
            })
            .collect();
        named.sort();
        let factors = c.require("factors")?;
        if factors.shape() != [n, named.len()] {
            return Err(Error::Dataset(format!(
                "factors {:?} do not match {n} examples and {} named factors",
                factors.shape(),
                named.len()
            )));
        }
        FactorTable::new(
            named.iter().map(|(_, s, _)| s.clone()).collect(),
            named.iter().map(|(_, _, c)| *c).collect(),
            factors.data().iter().map(|&v| v as u16).collect(),
        )
    }

    /// Number of examples taking each value of `factor`.
    pub fn value_counts(&self, factor: usize) -> Vec<usize> {
        let mut counts = vec![0; self.cardinalities[factor]];
        for n in 0..self.len() {
            counts[self.get(n, factor)] += 1;
        }
        counts
    }
}

/// Image storage: one bit per pixel for binary images, one byte otherwise.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Pixels {
    Binary(Vec<u8>),
    Gray(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    extent: usize,
    pixels: Pixels,
    factors: FactorTable,
    labels: Option<Vec<usize>>,
}

fn packed_stride(extent: usize) -> usize {
    (extent * extent).div_ceil(8)
}

/// Packs a binary image, most significant bit first.
pub(crate) fn pack_bits(image: &[u8], out: &mut Vec<u8>) {
    for chunk in image.chunks(8) {
        let mut byte = 0u8;
        for (k, &v) in chunk.iter().enumerate() {
            byte |= ((v != 0) as u8) << (7 - k);
        }
        out.push(byte);
    }
}

impl ImageDataset {
    pub fn new(extent: usize, pixels: Pixels, factors: FactorTable, labels: Option<Vec<usize>>) -> Result<Self> {
        let n = factors.len();
        let expected = match &pixels {
            Pixels::Binary(_) => n * packed_stride(extent),
            Pixels::Gray(_) => n * extent * extent,
        };
        let found = match &pixels {
            Pixels::Binary(b) | Pixels::Gray(b) => b.len(),
        };
        if n == 0 || expected != found {
            return Err(Error::Dataset(format!(
                "{n} examples of extent {extent} need {expected} pixel bytes, found {found}"
            )));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Dataset(format!("{} labels for {n} examples", l.len())));
            }
        }
        Ok(ImageDataset {
            extent,
            pixels,
            factors,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn extent(&self) -> usize {
        self.extent
    }

    pub fn factors(&self) -> &FactorTable {
        &self.factors
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn is_binary(&self) -> bool {
        matches!(self.pixels, Pixels::Binary(_))
    }

    /// Writes image `i` as values in `[0, 1]`.
    pub fn image_into(&self, i: usize, out: &mut [f32]) {
        let hw = self.extent * self.extent;
        match &self.pixels {
            Pixels::Binary(bits) => {
                let s = packed_stride(self.extent);
                let bytes = &bits[i * s..(i + 1) * s];
                for (k, o) in out[..hw].iter_mut().enumerate() {
                    *o = ((bytes[k / 8] >> (7 - k % 8)) & 1) as f32;
                }
            }
            Pixels::Gray(bytes) => {
                for (o, &b) in out[..hw].iter_mut().zip(&bytes[i * hw..(i + 1) * hw]) {
                    *o = b as f32 / 255.0;
                }
            }
        }
    }

    /// `[indices.len(), 1, E, E]` batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let hw = self.extent * self.extent;
        let mut data = vec![0.0f32; indices.len() * hw];
        for (k, &i) in indices.iter().enumerate() {
            self.image_into(i, &mut data[k * hw..(k + 1) * hw]);
        }
        Tensor::new(&[indices.len(), 1, self.extent, self.extent], data).expect("batch shape")
    }

    /// All images as one tensor.
    pub fn to_tensor(&self) -> Tensor {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn subset(&self, indices: &[usize]) -> Result<ImageDataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidArgument(format!(
                "example {bad} out of range 0..{}",
                self.len()
            )));
        }
        let pixels = match &self.pixels {
            Pixels::Binary(bits) => {
                let s = packed_stride(self.extent);
                Pixels::Binary(
                    indices
                        .iter()
                        .flat_map(|&i| bits[i * s..(i + 1) * s].iter().copied())
                        .collect(),
                )
            }
            Pixels::Gray(bytes) => {
                let s = self.extent * self.extent;
                Pixels::Gray(
                    indices
                        .iter()
                        .flat_map(|&i| bytes[i * s..(i + 1) * s].iter().copied())
                        .collect(),
                )
            }
        };
        ImageDataset::new(
            self.extent,
            pixels,
            self.factors.subset(indices),
            self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        )
    }

    /// The first `n` examples of a seeded permutation, in permuted order.
    pub fn random_subset(&self, n: usize, seed: u64) -> Result<ImageDataset> {
        let mut perm = RandomSource::with_stream(seed, 0x5b5e7).permutation(self.len());
        perm.truncate(n.min(self.len()));
        self.subset(&perm)
    }

    /// Images, labels and factors as a tensor container.
    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.insert("images", self.to_tensor());
        let n = self.len();
        if let Some(l) = &self.labels {
            c.insert(
                "labels",
                Tensor::new(&[n], l.iter().map(|&v| v as f32).collect()).unwrap(),
            );
        }
        self.factors.write_into(&mut c);
        c
    }

    pub fn from_container(c: &Container) -> Result<ImageDataset> {
        let images = c.require("images")?;
        let (n, extent) = match *images.shape() {
            [n, 1, h, w] if h == w => (n, h),
            ref s => return Err(Error::Dataset(format!("images must be [N, 1, E, E], got {s:?}"))),
        };
        let table = FactorTable::from_container(c, n)?;
        let labels = c.get("labels").map(|t| t.data().iter().map(|&v| v as usize).collect());
        let binary = images.data().iter().all(|&v| v == 0.0 || v == 1.0);
        let hw = extent * extent;
        let pixels = if binary {
            let mut bits = Vec::with_capacity(n * packed_stride(extent));
            let bytes: Vec<u8> = images.data().iter().map(|&v| v as u8).collect();
            for img in bytes.chunks(hw) {
                pack_bits(img, &mut bits);
            }
            Pixels::Binary(bits)
        } else {
            Pixels::Gray(images.data().iter().map(|&v| (v * 255.0).round() as u8).collect())
        };
        ImageDataset::new(extent, pixels, table, labels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_container(path, &self.to_container())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ImageDataset> {
        ImageDataset::from_container(&read_container(path)?)
    }

    /// One row per example: `index,label,<factor names...>`.
    pub fn write_factor_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        writeln!(w, "index,label,{}", self.factors.names.join(",")).map_err(io)?;
        for n in 0..self.len() {
            let label = self.labels.as_ref().map(|l| l[n].to_string()).unwrap_or_default();
            let row: Vec<String> = self.factors.row(n).iter().map(u16::to_string).collect();
            writeln!(w, "{n},{label},{}", row.join(",")).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Index batches for one epoch: a seeded permutation cut into `batch_size`
/// chunks, the last one possibly short.
pub fn batches(n: usize, batch_size: usize, rng: &mut RandomSource) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch_size} must lie in 1..={n}"
        )));
    }
    let perm = rng.permutation(n);
    Ok(perm.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> ImageDataset {
        let table = FactorTable::new(
            vec!["a".into(), "b".into()],
            vec![2, 3],
            (0..n).flat_map(|i| [(i % 2) as u16, (i % 3) as u16]).collect(),
        )
        .unwrap();
        let mut bits = Vec::new();
        for i in 0..n {
            let img: Vec<u8> = (0..16).map(|k| ((k + i) % 3 == 0) as u8).collect();
            pack_bits(&img, &mut bits);
        }
        ImageDataset::new(4, Pixels::Binary(bits), table, Some((0..n).map(|i| i % 2).collect())).unwrap()
    }

    #[test]
    fn factor_table_rejects_out_of_range() {
        assert!(FactorTable::new(vec!["a".into()], vec![2], vec![0, 1, 2]).is_err());
        let t = FactorTable::new(vec!["a".into(), "b".into()], vec![2, 2], vec![0, 1, 1, 1]).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.active_factors(), vec![0]);
        assert_eq!(t.value_counts(1), vec![0, 2]);
    }

    #[test]
    fn bits_round_trip_through_batches() {
        let ds = toy(5);
        let b = ds.batch(&[3]);
        let want: Vec<f32> = (0..16).map(|k| ((k + 3) % 3 == 0) as u8 as f32).collect();
        assert_eq!(b.data(), &want[..]);
        assert_eq!(b.shape(), [1, 1, 4, 4]);
    }

    #[test]
    fn container_round_trip() {
        let ds = toy(6);
        let back = ImageDataset::from_container(&ds.to_container()).unwrap();
        assert_eq!(back, ds);
        let sub = ds.subset(&[4, 1]).unwrap();
        assert_eq!(sub.labels(), Some(&[0, 1][..]));
        assert_eq!(sub.factors().row(0), &[0, 1]);
    }

    #[test]
    fn epoch_visits_every_index_once_and_is_seeded() {
        let b = batches(15360, 64, &mut RandomSource::new(3)).unwrap();
        assert_eq!(b.len(), 240);
        let mut seen: Vec<usize> = b.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..15360).collect::<Vec<_>>());
        assert_eq!(b, batches(15360, 64, &mut RandomSource::new(3)).unwrap());
        let short = batches(100, 64, &mut RandomSource::new(3)).unwrap();
        assert_eq!(short.iter().map(Vec::len).collect::<Vec<_>>(), vec![64, 36]);
        assert!(batches(10, 11, &mut RandomSource::new(0)).is_err());
    }
}
