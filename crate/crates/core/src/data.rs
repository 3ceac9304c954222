//! Datasets: IDX and CIFAR-binary loaders plus seeded synthetic 2-D sets.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: bad magic number, expected {expected:#010x}, found {actual:#010x}")]
    BadMagic { path: PathBuf, expected: u32, actual: u32 },
    #[error("{path}: truncated, expected {expected} bytes, found {actual}")]
    Truncated { path: PathBuf, expected: usize, actual: usize },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: size {size} is not a multiple of the {CIFAR_RECORD}-byte record")]
    BadRecordSize { path: PathBuf, size: usize },
    #[error("requested {requested} examples but only {available} available")]
    NotEnough { requested: usize, available: usize },
    #[error("invalid dataset request: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// Images stacked along the batch axis with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self, DataError> {
        if images.batch() != labels.len() {
            return Err(DataError::CountMismatch { images: images.batch(), labels: labels.len() });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::Invalid(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self { images, labels, classes })
    }

    pub fn empty(feature_shape: Vec<usize>, classes: usize) -> Self {
        let mut shape = vec![0];
        shape.extend(feature_shape);
        Self { images: Tensor::zeros(shape), labels: vec![], classes }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.gather(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn take(&self, n: usize) -> Dataset {
        self.subset(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    /// Seeded permutation split into `(rest, held_out)` with `held_out.len() == n`.
    pub fn split_off(&self, n: usize, seed: u64) -> Result<(Dataset, Dataset), DataError> {
        if n >= self.len() && n > 0 {
            return Err(DataError::NotEnough { requested: n + 1, available: self.len() });
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (held, rest) = idx.split_at(n);
        Ok((self.subset(rest), self.subset(held)))
    }
}

fn read_u32_be(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(io_err(path))
}

/// Parses an IDX image file into `[n, 1, rows, cols]` with values `byte / 255`.
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<Tensor, DataError> {
    if bytes.len() < 16 {
        return Err(DataError::Truncated { path: path.into(), expected: 16, actual: bytes.len() });
    }
    let magic = read_u32_be(bytes, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic { path: path.into(), expected: IDX_IMAGES_MAGIC, actual: magic });
    }
    let n = read_u32_be(bytes, 4) as usize;
    let rows = read_u32_be(bytes, 8) as usize;
    let cols = read_u32_be(bytes, 12) as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        return Err(DataError::Truncated { path: path.into(), expected, actual: bytes.len() });
    }
    let data = bytes[16..expected].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::new(vec![n, 1, rows, cols], data).expect("idx dims match payload"))
}

pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<usize>, DataError> {
    if bytes.len() < 8 {
        return Err(DataError::Truncated { path: path.into(), expected: 8, actual: bytes.len() });
    }
    let magic = read_u32_be(bytes, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic { path: path.into(), expected: IDX_LABELS_MAGIC, actual: magic });
    }
    let n = read_u32_be(bytes, 4) as usize;
    if bytes.len() < 8 + n {
        return Err(DataError::Truncated { path: path.into(), expected: 8 + n, actual: bytes.len() });
    }
    Ok(bytes[8..8 + n].iter().map(|&b| b as usize).collect())
}

/// Loads `<prefix>-images-idx3-ubyte` and `<prefix>-labels-idx1-ubyte` from `dir`.
pub fn load_idx_prefix(dir: &Path, prefix: &str) -> Result<Dataset, DataError> {
    let ip = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let lp = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let images = parse_idx_images(&ip, &read_file(&ip)?)?;
    let labels = parse_idx_labels(&lp, &read_file(&lp)?)?;
    if images.batch() != labels.len() {
        return Err(DataError::CountMismatch { images: images.batch(), labels: labels.len() });
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    Dataset::new(images, labels, classes)
}

/// Loads the `train` IDX pair from `dir`.
pub fn load_idx(dir: &Path) -> Result<Dataset, DataError> {
    load_idx_prefix(dir, "train")
}

/// Parses concatenated CIFAR-10 binary records into `[n, 3, 32, 32]`.
pub fn parse_cifar_records(path: &Path, bytes: &[u8]) -> Result<(Vec<f64>, Vec<usize>), DataError> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(DataError::BadRecordSize { path: path.into(), size: bytes.len() });
    }
    let mut pixels = Vec::with_capacity(bytes.len() / CIFAR_RECORD * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((pixels, labels))
}

/// Loads the first `subset_n` records from the CIFAR binary files in `dir`
/// (`data_batch_*.bin` if present, otherwise every `*.bin`, in name order).
pub fn load_cifar_bin(dir: &Path, subset_n: usize) -> Result<Dataset, DataError> {
    if subset_n == 0 {
        return Err(DataError::Invalid("subset size must be positive".into()));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "bin"))
        .collect();
    files.sort();
    let batches: Vec<PathBuf> = files
        .iter()
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("data_batch")))
        .cloned()
        .collect();
    let files = if batches.is_empty() { files } else { batches };
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in &files {
        if labels.len() >= subset_n {
            break;
        }
        let (p, l) = parse_cifar_records(f, &read_file(f)?)?;
        pixels.extend(p);
        labels.extend(l);
    }
    if labels.len() < subset_n {
        return Err(DataError::NotEnough { requested: subset_n, available: labels.len() });
    }
    pixels.truncate(subset_n * (CIFAR_RECORD - 1));
    labels.truncate(subset_n);
    let images = Tensor::new(vec![subset_n, 3, 32, 32], pixels).expect("record payload size");
    Dataset::new(images, labels, 10)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SynthKind {
    #[serde(rename = "synthetic-blobs")]
    Blobs,
    #[serde(rename = "synthetic-moons")]
    Moons,
}

impl FromStr for SynthKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "synthetic-blobs" | "blobs" => Ok(Self::Blobs),
            "synthetic-moons" | "moons" => Ok(Self::Moons),
            other => Err(DataError::Invalid(format!("unknown synthetic dataset {other:?}"))),
        }
    }
}

/// Two-class 2-D points, min-max scaled into `[0, 1]^2`. Labels alternate
/// `0, 1, 0, ...` so any `n >= 2` contains both classes.
///
/// Blobs are isotropic Gaussians at `(-1, -1)` and `(1, 1)` with standard
/// deviation `noise`; moons are the two interleaved half circles with
/// Gaussian jitter of scale `noise`.
pub fn synth_dataset(kind: SynthKind, n: usize, noise: f64, seed: u64) -> Result<Dataset, DataError> {
    if n < 2 {
        return Err(DataError::Invalid(format!("need at least 2 examples, got {n}")));
    }
    if !(noise >= 0.0) {
        return Err(DataError::Invalid(format!("noise must be non-negative, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, 1.0).expect("unit normal");
    let mut points = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    let per_class = n.div_ceil(2);
    for i in 0..n {
        let label = i % 2;
        let (x, y) = match kind {
            SynthKind::Blobs => {
                let c = if label == 0 { -1.0 } else { 1.0 };
                (c, c)
            }
            SynthKind::Moons => {
                let k = i / 2;
                let t = std::f64::consts::PI * k as f64 / (per_class.max(2) - 1) as f64;
                if label == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                }
            }
        };
        points.push(x + noise * jitter.sample(&mut rng));
        points.push(y + noise * jitter.sample(&mut rng));
        labels.push(label);
    }
    for axis in 0..2 {
        let vals = points.iter().skip(axis).step_by(2);
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        for v in points.iter_mut().skip(axis).step_by(2) {
            *v = if span > 0.0 { (*v - lo) / span } else { 0.5 };
        }
    }
    let images = Tensor::new(vec![n, 2], points).expect("two coordinates per point");
    Dataset::new(images, labels, 2)
}
