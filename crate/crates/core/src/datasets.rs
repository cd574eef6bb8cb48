//! Dataset loaders (MNIST IDX, CIFAR binary), standardization, augmentation
//! and seeded synthetic data.
//!
//! Nothing here downloads. Files are looked up under `$GHL_DATA_DIR`:
//!
//! ```text
//! $GHL_DATA_DIR/mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte
//! $GHL_DATA_DIR/cifar-10-batches-bin/{data_batch_1..5,test_batch}.bin
//! $GHL_DATA_DIR/cifar-100-binary/{train,test}.bin
//! ```

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_IMAGE_BYTES: usize = 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// `N × sample_shape`; image data lies in `[0, 1]` before standardization.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
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

    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (self.images.gather_rows(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// First `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.batch(&idx);
        Self::new(images, labels, self.classes, self.split)
    }

    /// Split off the last `fraction` of samples.
    pub fn split_tail(&self, fraction: f64) -> Result<(Self, Self)> {
        if !(0.0 < fraction && fraction < 1.0) {
            return Err(Error::Parameter(format!("split fraction must be in (0, 1), got {fraction}")));
        }
        let tail = ((self.len() as f64) * fraction).round() as usize;
        let head = self.len() - tail;
        if tail == 0 || head == 0 {
            return Err(Error::Data(format!(
                "splitting {} samples at {fraction} leaves an empty side",
                self.len()
            )));
        }
        let (a, la) = self.batch(&(0..head).collect::<Vec<_>>());
        let (b, lb) = self.batch(&(head..self.len()).collect::<Vec<_>>());
        Ok((
            Self::new(a, la, self.classes, self.split)?,
            Self::new(b, lb, self.classes, self.split)?,
        ))
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn truncated(path: &Path, needed: usize, got: usize) -> Error {
    Error::io(
        path,
        std::io::Error::new(
            ErrorKind::UnexpectedEof,
            format!("file truncated: need {needed} bytes, have {got}"),
        ),
    )
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| truncated(path, at + 4, bytes.len()))
}

/// Parse an IDX image/label file pair. Pixels map to `b / 255`.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let img = read_file(images_path)?;
    let magic = be_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            images_path,
            format!("image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        ));
    }
    let n = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let needed = 16 + n * rows * cols;
    if img.len() < needed {
        return Err(truncated(images_path, needed, img.len()));
    }

    let lab = read_file(labels_path)?;
    let magic = be_u32(&lab, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            labels_path,
            format!("label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        ));
    }
    let nl = be_u32(&lab, 4, labels_path)? as usize;
    if nl != n {
        return Err(Error::format(labels_path, format!("{nl} labels for {n} images")));
    }
    if lab.len() < 8 + n {
        return Err(truncated(labels_path, 8 + n, lab.len()));
    }
    let pixels = img[16..needed].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lab[8..8 + n].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    LabeledDataset::new(
        Tensor::new(vec![n, 1, rows, cols], pixels)?,
        labels,
        classes,
        Split::Train,
    )
}

/// Serialize images (`N×1×H×W` in `[0,1]`) and labels as an IDX pair.
pub fn write_mnist_idx(ds: &LabeledDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (n, h, w) = match *ds.images.shape() {
        [n, 1, h, w] => (n, h, w),
        ref s => return Err(Error::Dimension(format!("IDX images must be N×1×H×W, got {s:?}"))),
    };
    let mut img = Vec::with_capacity(16 + n * h * w);
    for v in [IDX_IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(ds.images.data().iter().map(|&p| quantize(p)));
    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;

    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))
}

fn quantize(p: f64) -> u8 {
    (p * 255.0).round().clamp(0.0, 255.0) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarVariant {
    /// 1 label byte per record.
    Cifar10,
    /// Coarse and fine label bytes per record; the fine label is used.
    Cifar100,
}

impl CifarVariant {
    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

/// Concatenate CIFAR-10 binary batches: records of 1 label byte followed by
/// the R, G and B planes (32×32 row-major each).
pub fn load_cifar10_bin(paths: &[PathBuf]) -> Result<LabeledDataset> {
    load_cifar_bin(paths, CifarVariant::Cifar10)
}

pub fn load_cifar_bin(paths: &[PathBuf], variant: CifarVariant) -> Result<LabeledDataset> {
    let record = variant.label_bytes() + CIFAR_IMAGE_BYTES;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read_file(path)?;
        if bytes.is_empty() || bytes.len() % record != 0 {
            return Err(Error::format(
                path,
                format!(
                    "length {} is not a positive multiple of the {record}-byte record",
                    bytes.len()
                ),
            ));
        }
        for rec in bytes.chunks_exact(record) {
            labels.push(rec[variant.label_bytes() - 1] as usize);
            pixels.extend(rec[variant.label_bytes()..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    if labels.is_empty() {
        return Err(Error::Data("no CIFAR batch files given".into()));
    }
    let n = labels.len();
    LabeledDataset::new(
        Tensor::new(vec![n, 3, 32, 32], pixels)?,
        labels,
        variant.classes(),
        Split::Train,
    )
}

/// Serialize an `N×3×32×32` dataset in the CIFAR-10 record layout.
pub fn write_cifar10_bin(ds: &LabeledDataset, path: &Path) -> Result<()> {
    if ds.sample_shape() != [3, 32, 32] {
        return Err(Error::Dimension(format!(
            "CIFAR records hold 3×32×32 images, got {:?}",
            ds.sample_shape()
        )));
    }
    let mut out = Vec::with_capacity(ds.len() * (1 + CIFAR_IMAGE_BYTES));
    for (i, &label) in ds.labels.iter().enumerate() {
        out.push(label as u8);
        out.extend(ds.images.row(i).iter().map(|&p| quantize(p)));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Per-channel mean and standard deviation (axis 1 of the image tensor).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

fn channel_layout(images: &Tensor) -> (usize, usize, usize) {
    let n = images.shape()[0];
    let c = images.shape().get(1).copied().unwrap_or(1);
    (n, c, images.len() / (n * c))
}

impl ChannelStats {
    pub fn fit(images: &Tensor) -> Self {
        let (n, c, s) = channel_layout(images);
        let data = images.data();
        let count = (n * s) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for i in 0..n {
            for (ch, m) in mean.iter_mut().enumerate() {
                let base = (i * c + ch) * s;
                *m += data[base..base + s].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for i in 0..n {
            for (ch, v) in var.iter_mut().enumerate() {
                let base = (i * c + ch) * s;
                *v += data[base..base + s].iter().map(|x| (x - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let std = var.iter().map(|v| (v / count).sqrt()).collect();
        Self { mean, std }
    }
}

/// Subtract per-channel means and divide by per-channel standard deviations
/// (floored at [`STD_FLOOR`]). Stats are fitted on `ds` unless given; pass the
/// train split's stats when normalizing a test split.
pub fn standardize(ds: &LabeledDataset, stats: Option<&ChannelStats>) -> Result<(LabeledDataset, ChannelStats)> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => ChannelStats::fit(&ds.images),
    };
    let (n, c, s) = channel_layout(&ds.images);
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(Error::Dimension(format!(
            "stats cover {} channels, data has {c}",
            stats.mean.len()
        )));
    }
    let mut images = ds.images.clone();
    let data = images.data_mut();
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * s;
            let inv = 1.0 / stats.std[ch].max(STD_FLOOR);
            for v in &mut data[base..base + s] {
                *v = (*v - stats.mean[ch]) * inv;
            }
        }
    }
    Ok((
        LabeledDataset {
            images,
            labels: ds.labels.clone(),
            classes: ds.classes,
            split: ds.split,
        },
        stats,
    ))
}

/// `k` isotropic Gaussian clusters (std `spread`) around means drawn
/// uniformly on the unit sphere in `d` dimensions. Sample `i` has label
/// `i mod k`. Shape `n × d`.
pub fn synthetic_blobs(seed: u64, n: usize, d: usize, k: usize, spread: f64) -> Result<LabeledDataset> {
    let (train, _) = synthetic_blobs_split(seed, n, 0, d, k, spread)?;
    Ok(train)
}

/// Train and test sets drawn from the same clusters. `n_test` may be zero,
/// in which case the returned test set is `None`.
pub fn synthetic_blobs_split(
    seed: u64,
    n_train: usize,
    n_test: usize,
    d: usize,
    k: usize,
    spread: f64,
) -> Result<(LabeledDataset, Option<LabeledDataset>)> {
    if k == 0 || d == 0 || k > n_train {
        return Err(Error::Parameter(format!(
            "blobs need 1 ≤ k ≤ n and d ≥ 1 (k={k}, n={n_train}, d={d})"
        )));
    }
    if !(spread > 0.0) {
        return Err(Error::Parameter(format!("spread must be positive, got {spread}")));
    }
    let mut rng = SeededRng::new(seed);
    let means: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let mut draw = |n: usize, split: Split| -> Result<LabeledDataset> {
        let mut data = Vec::with_capacity(n * d);
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        for &l in &labels {
            for &m in &means[l] {
                data.push(m + spread * rng.normal());
            }
        }
        LabeledDataset::new(Tensor::new(vec![n, d], data)?, labels, k, split)
    };
    let train = draw(n_train, Split::Train)?;
    let test = if n_test > 0 { Some(draw(n_test, Split::Test)?) } else { None };
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Augment {
    #[serde(default)]
    pub hflip: bool,
    /// Zero-pad by this many pixels and crop back at a random offset.
    #[serde(default)]
    pub crop_pad: usize,
}

impl Augment {
    pub fn is_active(&self) -> bool {
        self.hflip || self.crop_pad > 0
    }

    /// Apply to a `B×C×H×W` batch. Each sample draws its flip and offsets
    /// from `rng` in order.
    pub fn apply(&self, batch: &Tensor, rng: &mut SeededRng) -> Result<Tensor> {
        let (b, c, h, w) = match *batch.shape() {
            [b, c, h, w] => (b, c, h, w),
            _ => return Ok(batch.clone()),
        };
        let mut out = batch.clone();
        let pad = self.crop_pad;
        for s in 0..b {
            let flip = self.hflip && rng.below(2) == 1;
            let (dy, dx) = if pad > 0 {
                (rng.below(2 * pad + 1), rng.below(2 * pad + 1))
            } else {
                (pad, pad)
            };
            let src = batch.row(s);
            let dst = &mut out.data_mut()[s * c * h * w..(s + 1) * c * h * w];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        // position in the padded image, then in the source
                        let sy = (y + dy) as isize - pad as isize;
                        let sx0 = (x + dx) as isize - pad as isize;
                        let sx = if flip { w as isize - 1 - sx0 } else { sx0 };
                        dst[(ch * h + y) * w + x] = if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            0.0
                        } else {
                            src[(ch * h + sy as usize) * w + sx as usize]
                        };
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Declarative dataset choice used by training configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Blobs {
        #[serde(default)]
        seed: u64,
        n_train: usize,
        n_test: usize,
        dim: usize,
        classes: usize,
        spread: f64,
    },
    Mnist {
        /// Use only the first `limit` training samples.
        #[serde(default)]
        limit: Option<usize>,
    },
    Cifar10 {
        #[serde(default)]
        limit: Option<usize>,
    },
    Cifar100 {
        #[serde(default)]
        limit: Option<usize>,
    },
}

impl DatasetSpec {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetSpec::Blobs { .. } => "blobs",
            DatasetSpec::Mnist { .. } => "mnist",
            DatasetSpec::Cifar10 { .. } => "cifar10",
            DatasetSpec::Cifar100 { .. } => "cifar100",
        }
    }
}

/// Directory named by `$GHL_DATA_DIR`, or `./data`.
pub fn data_dir() -> PathBuf {
    std::env::var_os("GHL_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn missing(path: &Path, what: &str, hint: &str) -> Error {
    Error::io(
        path,
        std::io::Error::new(
            ErrorKind::NotFound,
            format!("{what} not found; {hint} and point GHL_DATA_DIR at the parent directory"),
        ),
    )
}

pub fn mnist_paths(root: &Path, split: Split) -> (PathBuf, PathBuf) {
    let dir = root.join("mnist");
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Load both splits. Image datasets are standardized with train statistics.
pub fn load_dataset(spec: &DatasetSpec, root: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let (train, test) = match spec {
        DatasetSpec::Blobs {
            seed,
            n_train,
            n_test,
            dim,
            classes,
            spread,
        } => {
            let (train, test) = synthetic_blobs_split(*seed, *n_train, (*n_test).max(1), *dim, *classes, *spread)?;
            return Ok((train, test.expect("n_test ≥ 1")));
        }
        DatasetSpec::Mnist { limit } => {
            let (ti, tl) = mnist_paths(root, Split::Train);
            let (vi, vl) = mnist_paths(root, Split::Test);
            for p in [&ti, &tl, &vi, &vl] {
                if !p.exists() {
                    return Err(missing(
                        p,
                        "MNIST",
                        "download the four uncompressed IDX files into <dir>/mnist/",
                    ));
                }
            }
            let train = load_mnist_idx(&ti, &tl)?;
            let mut test = load_mnist_idx(&vi, &vl)?;
            test.split = Split::Test;
            (limit_to(train, *limit)?, test)
        }
        DatasetSpec::Cifar10 { limit } | DatasetSpec::Cifar100 { limit } => {
            let (variant, dir, train_files, test_files) = if matches!(spec, DatasetSpec::Cifar10 { .. }) {
                let dir = root.join("cifar-10-batches-bin");
                let train: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
                (CifarVariant::Cifar10, dir.clone(), train, vec![dir.join("test_batch.bin")])
            } else {
                let dir = root.join("cifar-100-binary");
                (CifarVariant::Cifar100, dir.clone(), vec![dir.join("train.bin")], vec![dir.join("test.bin")])
            };
            for p in train_files.iter().chain(&test_files) {
                if !p.exists() {
                    return Err(missing(p, "CIFAR binary batch", &format!("extract the binary release into {}", dir.display())));
                }
            }
            let train = load_cifar_bin(&train_files, variant)?;
            let mut test = load_cifar_bin(&test_files, variant)?;
            test.split = Split::Test;
            (limit_to(train, *limit)?, test)
        }
    };
    let (train, stats) = standardize(&train, None)?;
    let (test, _) = standardize(&test, Some(&stats))?;
    Ok((train, test))
}

fn limit_to(ds: LabeledDataset, limit: Option<usize>) -> Result<LabeledDataset> {
    match limit {
        Some(n) => ds.take(n),
        None => Ok(ds),
    }
}
