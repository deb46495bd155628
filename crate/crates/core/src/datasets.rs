//! MNIST (IDX) and CIFAR-10 (binary) ingestion, normalization and seeded
//! mini-batch iteration.
//!
//! Images are stored `H × W × C × N` with the sample index fastest.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";
pub const CIFAR_RECORD_BYTES: usize = 1 + 32 * 32 * 3;

/// Per-channel statistics applied as `(x − mean) / std`, always computed on
/// the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub scale: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset<T: Scalar> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub normalization: Option<Normalization>,
}

impl<T: Scalar> LabeledDataset<T> {
    pub fn new(inputs: Tensor<T>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let n = inputs.shape().last().copied().unwrap_or(0);
        if inputs.ndim() < 2 || n != labels.len() {
            return Err(Error::Data(format!(
                "inputs {:?} do not hold {} samples along the last axis",
                inputs.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one sample (everything but the batch axis).
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[..self.inputs.ndim() - 1]
    }

    /// Gathers the given samples into a batch, in order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let n = self.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Index(format!("sample {bad} outside dataset of {n}")));
        }
        let features: usize = self.sample_shape().iter().product();
        let b = indices.len();
        let src = self.inputs.data();
        let mut data = Vec::with_capacity(features * b);
        for f in 0..features {
            let row = &src[f * n..(f + 1) * n];
            data.extend(indices.iter().map(|&i| row[i]));
        }
        let mut shape = self.sample_shape().to_vec();
        shape.push(b);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::new(shape, data)?, labels))
    }

    /// The first `n` samples after a seeded shuffle (all of them if `n ≥ len`).
    pub fn subset(&self, n: usize, rng: &mut SeededRng) -> Result<Self> {
        let mut order = rng.permutation(self.len());
        order.truncate(n.min(self.len()));
        let (inputs, labels) = self.batch(&order)?;
        Ok(Self {
            inputs,
            labels,
            classes: self.classes,
            normalization: self.normalization.clone(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> LabeledDataset<U> {
        LabeledDataset {
            inputs: self.inputs.cast(),
            labels: self.labels.clone(),
            classes: self.classes,
            normalization: self.normalization.clone(),
        }
    }
}

/// Seeded shuffled mini-batches covering the dataset exactly once; the
/// last batch may be short.
pub struct Batches<'a, T: Scalar> {
    data: &'a LabeledDataset<T>,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

pub fn batches<'a, T: Scalar>(
    data: &'a LabeledDataset<T>,
    batch_size: usize,
    rng: &mut SeededRng,
) -> Result<Batches<'a, T>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be ≥ 1".into()));
    }
    Ok(Batches {
        data,
        order: rng.permutation(data.len()),
        batch_size,
        pos: 0,
    })
}

impl<T: Scalar> Batches<'_, T> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl<T: Scalar> Iterator for Batches<'_, T> {
    type Item = (Tensor<T>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(self.data.batch(idx).expect("indices come from a permutation"))
    }
}

/// A decoded IDX file of unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn magic(&self) -> u32 {
        0x0800 | self.dims.len() as u32
    }
}

fn parse_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Parses a big-endian IDX file holding unsigned bytes. `expected_magic`
/// pins the number of dimensions.
pub fn parse_idx(bytes: &[u8], expected_magic: u32, path: &Path) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(parse_err(
            path,
            format!("truncated header: expected at least 4 bytes, found {}", bytes.len()),
        ));
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if magic != expected_magic {
        return Err(parse_err(
            path,
            format!("bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}"),
        ));
    }
    let ndim = (magic & 0xff) as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(parse_err(
            path,
            format!("truncated header: expected {header} bytes, found {}", bytes.len()),
        ));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let payload: usize = dims.iter().product();
    let expected = header + payload;
    if bytes.len() != expected {
        let what = if bytes.len() < expected {
            "truncated payload"
        } else {
            "trailing bytes"
        };
        return Err(parse_err(
            path,
            format!(
                "{what}: expected {expected} bytes for dims {dims:?}, found {}",
                bytes.len()
            ),
        ));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn write_idx(array: &IdxArray) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * array.dims.len() + array.data.len());
    out.extend_from_slice(&array.magic().to_be_bytes());
    for &d in &array.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    out
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Images `[N, H, W]` plus labels `[N]` into an unnormalized dataset with
/// pixels scaled to `[0, 1]`.
pub fn mnist_from_idx<T: Scalar>(
    images: &[u8],
    labels: &[u8],
    images_path: &Path,
    labels_path: &Path,
) -> Result<LabeledDataset<T>> {
    let img = parse_idx(images, IDX_IMAGES_MAGIC, images_path)?;
    let lab = parse_idx(labels, IDX_LABELS_MAGIC, labels_path)?;
    let (n, h, w) = (img.dims[0], img.dims[1], img.dims[2]);
    if lab.dims[0] != n {
        return Err(parse_err(
            labels_path,
            format!("count mismatch: {} labels for {n} images", lab.dims[0]),
        ));
    }
    let mut data = vec![T::zero(); n * h * w];
    let inv: T = lit(1.0 / 255.0);
    for s in 0..n {
        let src = &img.data[s * h * w..(s + 1) * h * w];
        for (p, &v) in src.iter().enumerate() {
            data[p * n + s] = T::from_u8(v).expect("byte fits") * inv;
        }
    }
    let labels: Vec<usize> = lab.data.iter().map(|&l| l as usize).collect();
    LabeledDataset::new(Tensor::new(vec![h, w, 1, n], data)?, labels, 10)
        .map_err(|e| parse_err(labels_path, e.to_string()))
}

/// Loads the four official MNIST files from `dir`: pixels in `[0, 1]`,
/// then the training-set mean is subtracted from both splits.
pub fn load_mnist<T: Scalar>(dir: &Path) -> Result<(LabeledDataset<T>, LabeledDataset<T>)> {
    let paths: Vec<PathBuf> = MNIST_FILES.iter().map(|f| dir.join(f)).collect();
    if let Some(missing) = paths.iter().find(|p| !p.is_file()) {
        return Err(Error::Data(format!("MNIST file {} not found", missing.display())));
    }
    let mut train = mnist_from_idx(&read_file(&paths[0])?, &read_file(&paths[1])?, &paths[0], &paths[1])?;
    let mut test = mnist_from_idx(&read_file(&paths[2])?, &read_file(&paths[3])?, &paths[2], &paths[3])?;
    let mean = (train.inputs.data().iter().map(|&v: &T| v.as_f64()).sum::<f64>()) / train.inputs.len().max(1) as f64;
    let norm = Normalization {
        scale: 1.0 / 255.0,
        mean: vec![mean],
        std: vec![1.0],
        source: format!("train split ({} images)", train.len()),
    };
    apply_normalization(&mut train, &norm);
    apply_normalization(&mut test, &norm);
    Ok((train, test))
}

/// Decodes CIFAR-10 binary records (1 label byte, then the R, G and B
/// 32×32 planes row-major) with pixels scaled to `[0, 1]`.
pub fn parse_cifar_records(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, Vec<usize>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(parse_err(
            path,
            format!(
                "record misalignment: {} bytes is not a multiple of {CIFAR_RECORD_BYTES}",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD_BYTES - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        if rec[0] > 9 {
            return Err(parse_err(path, format!("label byte {} outside [0, 10)", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((pixels, labels))
}

/// Builds a `32 × 32 × 3 × N` dataset from decoded records.
pub fn cifar_dataset<T: Scalar>(pixels: &[u8], labels: Vec<usize>) -> Result<LabeledDataset<T>> {
    let n = labels.len();
    let plane = 32 * 32;
    let rec = 3 * plane;
    if pixels.len() != n * rec {
        return Err(Error::Data(format!("{} pixel bytes for {n} records", pixels.len())));
    }
    let inv: T = lit(1.0 / 255.0);
    let mut data = vec![T::zero(); n * rec];
    for s in 0..n {
        for c in 0..3 {
            for p in 0..plane {
                let v = pixels[s * rec + c * plane + p];
                // (h, w, c, s) with p = h*32 + w
                data[(p * 3 + c) * n + s] = T::from_u8(v).expect("byte fits") * inv;
            }
        }
    }
    LabeledDataset::new(Tensor::new(vec![32, 32, 3, n], data)?, labels, 10)
}

/// Loads the CIFAR-10 binary batches from `dir` and standardizes each
/// channel with training-set statistics.
pub fn load_cifar10<T: Scalar>(dir: &Path) -> Result<(LabeledDataset<T>, LabeledDataset<T>)> {
    let mut missing = CIFAR_TRAIN_FILES
        .iter()
        .chain(std::iter::once(&CIFAR_TEST_FILE))
        .map(|f| dir.join(f))
        .filter(|p| !p.is_file());
    if let Some(p) = missing.next() {
        return Err(Error::Data(format!("CIFAR-10 file {} not found", p.display())));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in CIFAR_TRAIN_FILES {
        let path = dir.join(f);
        let (p, l) = parse_cifar_records(&read_file(&path)?, &path)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let mut train = cifar_dataset(&pixels, labels)?;
    let path = dir.join(CIFAR_TEST_FILE);
    let (p, l) = parse_cifar_records(&read_file(&path)?, &path)?;
    let mut test = cifar_dataset(&p, l)?;
    let norm = channel_statistics(&train);
    apply_normalization(&mut train, &norm);
    apply_normalization(&mut test, &norm);
    Ok((train, test))
}

/// Per-channel mean and standard deviation of a `H × W × C × N` dataset.
pub fn channel_statistics<T: Scalar>(data: &LabeledDataset<T>) -> Normalization {
    let shape = data.inputs.shape();
    let c = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
    let n = data.len();
    let mut sum = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    for (i, v) in data.inputs.data().iter().enumerate() {
        let ch = (i / n) % c;
        let v = v.as_f64();
        sum[ch] += v;
        sq[ch] += v * v;
    }
    let count = (data.inputs.len() / c.max(1)).max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / count - m * m).max(0.0).sqrt().max(1e-8))
        .collect();
    Normalization {
        scale: 1.0 / 255.0,
        mean,
        std,
        source: format!("train split ({n} images)"),
    }
}

pub fn apply_normalization<T: Scalar>(data: &mut LabeledDataset<T>, norm: &Normalization) {
    let c = norm.mean.len().max(1);
    let n = data.len();
    let mean: Vec<T> = norm.mean.iter().map(|&m| lit(m)).collect();
    let inv: Vec<T> = norm.std.iter().map(|&s| lit(1.0 / s)).collect();
    for (i, v) in data.inputs.data_mut().iter_mut().enumerate() {
        let ch = (i / n.max(1)) % c;
        *v = (*v - mean[ch]) * inv[ch];
    }
    data.normalization = Some(norm.clone());
}
