//! Dataset provisioning: synthetic generators and the MNIST IDX / CIFAR-10
//! binary loaders.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;
use ticketforge::nn::{DatasetSplits, Split};
use ticketforge::RngState;

use crate::config::{DataSource, DatasetSpec};

pub const MNIST_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const MNIST_LABEL_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;

pub const MNIST_TRAIN: (&str, &str) = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte");
pub const MNIST_TEST: (&str, &str) = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte");
pub const CIFAR_TEST: &str = "test_batch.bin";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: malformed at byte {offset}: {reason}")]
    Malformed { path: PathBuf, offset: usize, reason: String },
    #[error("{0}")]
    Invalid(String),
}

/// Raw uint8 images with labels, before scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImages {
    pub shape: [usize; 3],
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl RawImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    /// Scale the selected images to [0, 1], then normalize per channel.
    fn to_split(&self, indices: &[usize], mean: &[f64], std: &[f64]) -> Split {
        let n = self.sample_len();
        let plane = self.shape[1] * self.shape[2];
        let mut inputs = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            for (j, &p) in self.pixels[i * n..(i + 1) * n].iter().enumerate() {
                let c = j / plane;
                let (m, s) = (pick(mean, c, 0.0), pick(std, c, 1.0));
                inputs.push((p as f64 / 255.0 - m) / s);
            }
            labels.push(self.labels[i] as usize);
        }
        Split { sample_shape: self.shape.to_vec(), inputs, labels }
    }
}

fn pick(v: &[f64], c: usize, default: f64) -> f64 {
    match v.len() {
        0 => default,
        1 => v[0],
        _ => v[c],
    }
}

fn read(path: &Path) -> Result<Vec<u8>, DatasetError> {
    std::fs::read(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32, DatasetError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| malformed(path, bytes.len(), "truncated header"))
}

fn malformed(path: &Path, offset: usize, reason: impl Into<String>) -> DatasetError {
    DatasetError::Malformed { path: path.to_path_buf(), offset, reason: reason.into() }
}

/// Parse an IDX image file: magic 0x00000803, then count, rows, cols (big-endian).
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, [usize; 2], Vec<u8>), DatasetError> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != MNIST_IMAGE_MAGIC {
        return Err(malformed(path, 0, format!("bad magic {magic:#010x}, expected {MNIST_IMAGE_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    if (rows, cols) != (28, 28) {
        return Err(malformed(path, 8, format!("image dims {rows}x{cols}, expected 28x28")));
    }
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(malformed(path, bytes.len().min(expected), format!("file is {} bytes, header implies {expected}", bytes.len())));
    }
    Ok((n, [rows, cols], bytes[16..].to_vec()))
}

/// Parse an IDX label file: magic 0x00000801, then count.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>, DatasetError> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != MNIST_LABEL_MAGIC {
        return Err(malformed(path, 0, format!("bad magic {magic:#010x}, expected {MNIST_LABEL_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    if bytes.len() != 8 + n {
        return Err(malformed(path, bytes.len().min(8 + n), format!("file is {} bytes, header implies {}", bytes.len(), 8 + n)));
    }
    let labels = bytes[8..].to_vec();
    if let Some(i) = labels.iter().position(|&l| l > 9) {
        return Err(malformed(path, 8 + i, format!("label {} out of range", labels[i])));
    }
    Ok(labels)
}

pub fn load_mnist_pair(dir: &Path, (images, labels): (&str, &str)) -> Result<RawImages, DatasetError> {
    let ip = dir.join(images);
    let lp = dir.join(labels);
    let (n, [rows, cols], pixels) = parse_idx_images(&read(&ip)?, &ip)?;
    let labels = parse_idx_labels(&read(&lp)?, &lp)?;
    if labels.len() != n {
        return Err(DatasetError::Invalid(format!("{} holds {n} images but {} holds {} labels", ip.display(), lp.display(), labels.len())));
    }
    Ok(RawImages { shape: [1, rows, cols], pixels, labels })
}

/// Parse a CIFAR-10 binary batch: records of one label byte followed by
/// 3x32x32 channel-major pixels.
pub fn parse_cifar_batch(bytes: &[u8], path: &Path) -> Result<RawImages, DatasetError> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD_LEN) {
        let whole = bytes.len() / CIFAR_RECORD_LEN * CIFAR_RECORD_LEN;
        return Err(malformed(path, whole, format!("{} bytes is not a whole number of {CIFAR_RECORD_LEN}-byte records", bytes.len())));
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD_LEN - 1));
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
        if rec[0] > 9 {
            return Err(malformed(path, r * CIFAR_RECORD_LEN, format!("label {} out of range", rec[0])));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok(RawImages { shape: [3, 32, 32], pixels, labels })
}

/// All `data_batch_*.bin` files in `dir`, in name order.
pub fn load_cifar_train(dir: &Path) -> Result<RawImages, DatasetError> {
    let entries = std::fs::read_dir(dir).map_err(|source| DatasetError::Io { path: dir.to_path_buf(), source })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(DatasetError::Invalid(format!("no data_batch_*.bin files in {}", dir.display())));
    }
    let mut all = RawImages { shape: [3, 32, 32], pixels: Vec::new(), labels: Vec::new() };
    for f in files {
        let b = parse_cifar_batch(&read(&f)?, &f)?;
        all.pixels.extend(b.pixels);
        all.labels.extend(b.labels);
    }
    Ok(all)
}

pub fn load_cifar_test(dir: &Path) -> Result<RawImages, DatasetError> {
    let p = dir.join(CIFAR_TEST);
    parse_cifar_batch(&read(&p)?, &p)
}

/// Two interleaving half circles; label 0 is the upper moon.
pub fn two_moons(n: usize, noise: f64, rng: &mut RngState) -> Split {
    let n_outer = n / 2;
    let n_inner = n - n_outer;
    let mut inputs = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    let step = |m: usize, i: usize| if m > 1 { PI * i as f64 / (m - 1) as f64 } else { 0.0 };
    for i in 0..n_outer {
        let t = step(n_outer, i);
        inputs.extend([t.cos(), t.sin()]);
        labels.push(0);
    }
    for i in 0..n_inner {
        let t = step(n_inner, i);
        inputs.extend([1.0 - t.cos(), 0.5 - t.sin()]);
        labels.push(1);
    }
    if noise > 0.0 {
        let normal = Normal::new(0.0, noise).expect("noise is finite");
        for x in inputs.iter_mut() {
            *x += normal.sample(rng);
        }
    }
    Split { sample_shape: vec![2], inputs, labels }
}

/// Isotropic Gaussian clusters around centers drawn uniformly from the cube
/// `[-spread, spread]^dim`; samples are assigned to centers round-robin.
pub fn gaussian_blobs(n: usize, centers: usize, dim: usize, cluster_std: f64, spread: f64, rng: &mut RngState) -> Split {
    let mids: Vec<f64> = (0..centers * dim).map(|_| rng.random_range(-spread..=spread)).collect();
    let normal = Normal::new(0.0, cluster_std).expect("cluster_std is positive");
    let mut inputs = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % centers;
        for d in 0..dim {
            inputs.push(mids[c * dim + d] + normal.sample(rng));
        }
        labels.push(c);
    }
    Split { sample_shape: vec![dim], inputs, labels }
}

fn normalize(split: &mut Split, mean: &[f64], std: &[f64]) {
    let d = split.sample_len();
    for (j, x) in split.inputs.iter_mut().enumerate() {
        let c = j % d;
        *x = (*x - pick(mean, c, 0.0)) / pick(std, c, 1.0);
    }
}

fn shuffled(n: usize, rng: &mut RngState) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Build train/val/test splits. The same spec and rng state always give the
/// same arrays.
pub fn provision_dataset(spec: &DatasetSpec, rng: &mut RngState) -> Result<DatasetSplits, DatasetError> {
    let mean = spec.mean.clone().unwrap_or_default();
    let std = spec.std.clone().unwrap_or_default();
    match spec.source {
        DataSource::TwoMoons | DataSource::GaussianBlobs => {
            let mut pool = match spec.source {
                DataSource::TwoMoons => two_moons(spec.n_samples, spec.noise, rng),
                _ => gaussian_blobs(spec.n_samples, spec.centers, spec.dim, spec.cluster_std, spec.spread, rng),
            };
            normalize(&mut pool, &mean, &std);
            let (n_test, n_val) = spec.synthetic_counts();
            if n_test == 0 || n_val == 0 || n_test + n_val >= pool.len() {
                return Err(DatasetError::Invalid(format!("{} samples leave an empty split", pool.len())));
            }
            let idx = shuffled(pool.len(), rng);
            let (test, rest) = idx.split_at(n_test);
            let (val, train) = rest.split_at(n_val);
            Ok(DatasetSplits { train: pool.subset(train), val: pool.subset(val), test: pool.subset(test) })
        }
        DataSource::MnistIdx | DataSource::Cifar10Binary => {
            let dir = spec
                .resolved_path
                .as_deref()
                .or(spec.path.as_deref())
                .ok_or_else(|| DatasetError::Invalid("file-backed source without a path".into()))?;
            let (train_raw, test_raw) = match spec.source {
                DataSource::MnistIdx => (load_mnist_pair(dir, MNIST_TRAIN)?, load_mnist_pair(dir, MNIST_TEST)?),
                _ => (load_cifar_train(dir)?, load_cifar_test(dir)?),
            };
            let mut train_idx = shuffled(train_raw.len(), rng);
            train_idx.truncate(spec.train_cap.unwrap_or(usize::MAX));
            let mut test_idx = shuffled(test_raw.len(), rng);
            test_idx.truncate(spec.test_cap.unwrap_or(usize::MAX));
            let n_val = (train_idx.len() as f64 * spec.val_fraction).round() as usize;
            if n_val == 0 || n_val >= train_idx.len() || test_idx.is_empty() {
                return Err(DatasetError::Invalid(format!(
                    "{} training and {} test samples leave an empty split",
                    train_idx.len(),
                    test_idx.len()
                )));
            }
            let (val, train) = train_idx.split_at(n_val);
            Ok(DatasetSplits {
                train: train_raw.to_split(train, &mean, &std),
                val: train_raw.to_split(val, &mean, &std),
                test: test_raw.to_split(&test_idx, &mean, &std),
            })
        }
    }
}
