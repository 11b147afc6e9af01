//! Labelled datasets: IDX (MNIST) files and synthetic Gaussian blobs.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images `[n, ..sample_shape]` with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() < 2 || images.shape()[0] != labels.len() {
            return Err(Error::dim(
                "dataset",
                format!("{} labels for images {:?}", labels.len(), images.shape()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Images and labels at `idx`, in that order.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.images.gather_rows(idx)?;
        Ok((x, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let (images, labels) = self.batch(idx)?;
        Ok(Self {
            images,
            labels,
            classes: self.classes,
        })
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Seeded shuffle, then the first `first` samples and the rest.
    pub fn split(&self, first: usize, seed: u64) -> Result<(Self, Self)> {
        if first == 0 || first >= self.len() {
            return Err(Error::Config(format!(
                "split point {first} must be inside 1..{}",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok((self.subset(&idx[..first])?, self.subset(&idx[first..])?))
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

fn read_header(bytes: &[u8], expected: u32, dims: usize, what: &str) -> Result<(Vec<usize>, usize)> {
    let mut cur = Cursor::new(bytes);
    let magic = cur
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Format(format!("{what} file truncated before magic number")))?;
    if magic != expected {
        return Err(Error::Format(format!(
            "{what} file has magic 0x{magic:08x}, expected 0x{expected:08x}"
        )));
    }
    let mut out = Vec::with_capacity(dims);
    for _ in 0..dims {
        let d = cur
            .read_u32::<BigEndian>()
            .map_err(|_| Error::Format(format!("{what} file truncated in header")))?;
        out.push(d as usize);
    }
    let offset = cur.position() as usize;
    let need: usize = out.iter().product();
    if bytes.len() - offset != need {
        return Err(Error::Format(format!(
            "{what} file holds {} data bytes, header promises {need}",
            bytes.len() - offset
        )));
    }
    Ok((out, offset))
}

/// Parse IDX image (`0x00000803`) and label (`0x00000801`) files. Pixels
/// are scaled to `[0, 1]`; images come back as `[n, 1, rows, cols]`.
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let ib = fs::read(images)?;
    let lb = fs::read(labels)?;
    parse_mnist_idx(&ib, &lb)
}

pub fn parse_mnist_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset> {
    let (dims, off) = read_header(image_bytes, IDX_IMAGES_MAGIC, 3, "image")?;
    let (ldims, loff) = read_header(label_bytes, IDX_LABELS_MAGIC, 1, "label")?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    if ldims[0] != n {
        return Err(Error::Format(format!("{n} images but {} labels", ldims[0])));
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Format(format!("empty image file {dims:?}")));
    }
    let pixels: Vec<f32> = image_bytes[off..].iter().map(|&b| f32::from(b) / 255.0).collect();
    let labels: Vec<usize> = label_bytes[loff..].iter().map(|&b| usize::from(b)).collect();
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    Dataset::new(Tensor::new(vec![n, 1, rows, cols], pixels)?, labels, classes)
}

/// Encode images (values in `[0, 1]`, `[n, 1, rows, cols]` or `[n, rows,
/// cols]`) and labels as IDX byte streams.
pub fn encode_mnist_idx(data: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let s = data.images.shape();
    let (rows, cols) = match s {
        [_, 1, r, c] | [_, r, c] => (*r, *c),
        _ => return Err(Error::dim("encode_idx", format!("images {s:?}"))),
    };
    let mut ib = Vec::with_capacity(16 + data.images.len());
    ib.write_u32::<BigEndian>(IDX_IMAGES_MAGIC)?;
    for d in [data.len(), rows, cols] {
        ib.write_u32::<BigEndian>(d as u32)?;
    }
    ib.extend(data.images.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut lb = Vec::with_capacity(8 + data.len());
    lb.write_u32::<BigEndian>(IDX_LABELS_MAGIC)?;
    lb.write_u32::<BigEndian>(data.len() as u32)?;
    for &l in &data.labels {
        if l > 255 {
            return Err(Error::Index(format!("label {l} does not fit in a byte")));
        }
        lb.push(l as u8);
    }
    Ok((ib, lb))
}

/// Reads `images-idx3-ubyte` / `labels-idx1-ubyte` (or the standard
/// `train-*` names) from `dir`.
pub fn load_mnist_dir(dir: &Path) -> Result<Dataset> {
    let candidates = [
        ("images-idx3-ubyte", "labels-idx1-ubyte"),
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    ];
    for (i, l) in candidates {
        let (ip, lp) = (dir.join(i), dir.join(l));
        if ip.exists() && lp.exists() {
            return load_mnist_idx(&ip, &lp);
        }
    }
    Err(Error::Input(format!("no IDX image/label pair found in {}", dir.display())))
}

/// Seeded isotropic Gaussian blobs in `[0, 1]^dim`, one centre per class.
/// Sample `i` belongs to class `i mod classes`. Centres are at least 0.3
/// apart and the default spread is 0.05, so classes are linearly separable.
pub fn synth_blobs(n: usize, classes: usize, dim: usize, seed: u64) -> Result<Dataset> {
    synth_blobs_with_spread(n, classes, dim, 0.05, seed)
}

pub fn synth_blobs_with_spread(n: usize, classes: usize, dim: usize, spread: f32, seed: u64) -> Result<Dataset> {
    if n == 0 || classes < 2 || dim == 0 {
        return Err(Error::Config(format!(
            "synth_blobs needs n >= 1, classes >= 2, dim >= 1 (got {n}, {classes}, {dim})"
        )));
    }
    let normal = Normal::new(0.0f32, spread).map_err(|e| Error::Config(format!("spread: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centres: Vec<Vec<f32>> = Vec::with_capacity(classes);
    let mut attempts = 0;
    while centres.len() < classes {
        let c: Vec<f32> = (0..dim).map(|_| rng.gen_range(0.2..0.8)).collect();
        let far = centres
            .iter()
            .all(|o| o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f32>().sqrt() >= 0.3);
        attempts += 1;
        if far || attempts > 10_000 {
            centres.push(c);
        }
    }
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        for &m in &centres[class] {
            data.push((m + normal.sample(&mut rng)).clamp(0.0, 1.0));
        }
        labels.push(class);
    }
    Dataset::new(Tensor::new(vec![n, dim], data)?, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let images = Tensor::new(vec![3, 1, 2, 2], vec![0.0, 1.0, 0.5, 0.2, 1.0, 1.0, 0.0, 0.0, 0.1, 0.3, 0.7, 0.9]).unwrap();
        Dataset::new(images, vec![3, 0, 9], 10).unwrap()
    }

    #[test]
    fn idx_round_trip_and_scaling() {
        let (ib, lb) = encode_mnist_idx(&tiny()).unwrap();
        assert_eq!(&ib[..4], &[0, 0, 8, 3]);
        assert_eq!(&lb[..4], &[0, 0, 8, 1]);
        let back = parse_mnist_idx(&ib, &lb).unwrap();
        assert_eq!(back.labels, vec![3, 0, 9]);
        assert_eq!(back.images.shape(), &[3, 1, 2, 2]);
        assert_eq!(back.images.data()[0], 0.0);
        assert_eq!(back.images.data()[1], 1.0);
    }

    #[test]
    fn bad_magic_reports_observed_value() {
        let (mut ib, lb) = encode_mnist_idx(&tiny()).unwrap();
        ib[3] = 0x01;
        let err = parse_mnist_idx(&ib, &lb).unwrap_err();
        assert_eq!(err.kind(), "format");
        assert!(err.to_string().contains("0x00000801"), "{err}");
    }

    #[test]
    fn truncated_and_mismatched_files_are_format_errors() {
        let (ib, lb) = encode_mnist_idx(&tiny()).unwrap();
        for cut in [0, 3, 10, ib.len() - 1] {
            assert_eq!(parse_mnist_idx(&ib[..cut], &lb).unwrap_err().kind(), "format");
        }
        let mut short = lb.clone();
        short[7] = 2;
        short.pop();
        assert_eq!(parse_mnist_idx(&ib, &short).unwrap_err().kind(), "format");
    }

    #[test]
    fn blobs_are_balanced_and_seeded() {
        let a = synth_blobs(100, 2, 4, 7).unwrap();
        assert_eq!(a.class_histogram(), vec![50, 50]);
        assert_eq!(a, synth_blobs(100, 2, 4, 7).unwrap());
        assert_ne!(a, synth_blobs(100, 2, 4, 8).unwrap());
        assert!(a.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn split_partitions_the_data() {
        let d = synth_blobs(50, 5, 3, 1).unwrap();
        let (a, b) = d.split(40, 3).unwrap();
        assert_eq!((a.len(), b.len()), (40, 10));
        let mut all: Vec<f32> = a.images.data().iter().chain(b.images.data()).copied().collect();
        let mut orig = d.images.data().to_vec();
        all.sort_by(f32::total_cmp);
        orig.sort_by(f32::total_cmp);
        assert_eq!(all, orig);
        assert!(d.split(0, 1).is_err());
    }
}
