//! Dataset ingestion: IDX (MNIST) and CIFAR-10 binary decoding, plus
//! deterministic synthetic generators for fast tests.
//!
//! Images are standardized per channel to mean 0 / std 1; the
//! statistics are computed on the training split and reused for the
//! validation split, and stored alongside the data.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel affine standardization parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// Images plus integer labels, standardized, with the statistics that
/// produced them.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub normalization: Normalization,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Standardize raw `[0,1]`-range images; `stats` of the training split
/// may be supplied to normalize a validation split consistently.
pub fn standardize(
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    stats: Option<Normalization>,
) -> LabeledDataset {
    let [n, c, h, w] = images.shape();
    let stats = stats.unwrap_or_else(|| {
        let area = h * w;
        let count = (n * area) as f64;
        let mut mean = vec![0.0f32; c];
        let mut std = vec![1.0f32; c];
        for ci in 0..c {
            let mut sum = 0.0f64;
            for ni in 0..n {
                sum += images.sample(ni)[ci * area..(ci + 1) * area]
                    .iter()
                    .map(|&v| f64::from(v))
                    .sum::<f64>();
            }
            let mu = sum / count;
            let mut sq = 0.0f64;
            for ni in 0..n {
                sq += images.sample(ni)[ci * area..(ci + 1) * area]
                    .iter()
                    .map(|&v| (f64::from(v) - mu).powi(2))
                    .sum::<f64>();
            }
            mean[ci] = mu as f32;
            std[ci] = ((sq / count).sqrt()).max(1e-8) as f32;
        }
        Normalization { mean, std }
    });

    let mut images = images;
    let area = h * w;
    for ni in 0..n {
        let sample = images.sample_mut(ni);
        for ci in 0..c {
            let (m, s) = (stats.mean[ci], stats.std[ci]);
            for v in &mut sample[ci * area..(ci + 1) * area] {
                *v = (*v - m) / s;
            }
        }
    }
    LabeledDataset {
        images,
        labels,
        num_classes,
        normalization: stats,
    }
}

// ── IDX (MNIST) ──────────────────────────────────────────────────────

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            Error::Format(format!(
                "{what}: file truncated at byte offset {offset} (need 4 bytes)"
            ))
        })
}

/// Decode an IDX image file: big-endian magic 0x00000803, count, rows,
/// cols, then unsigned pixel bytes. Returns `(count, rows, cols, pixels)`.
pub fn decode_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, "idx images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "idx images: expected magic {IDX_IMAGES_MAGIC:#010x}, found {magic:#010x}"
        )));
    }
    let count = be_u32(bytes, 4, "idx images")? as usize;
    let rows = be_u32(bytes, 8, "idx images")? as usize;
    let cols = be_u32(bytes, 12, "idx images")? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() < expected {
        return Err(Error::Format(format!(
            "idx images: file truncated at byte offset {} (expected {expected} bytes total)",
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!(
            "idx images: {} trailing bytes after pixel data",
            bytes.len() - expected
        )));
    }
    Ok((count, rows, cols, bytes[16..].to_vec()))
}

/// Decode an IDX label file: big-endian magic 0x00000801, count, then
/// label bytes.
pub fn decode_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "idx labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "idx labels: expected magic {IDX_LABELS_MAGIC:#010x}, found {magic:#010x}"
        )));
    }
    let count = be_u32(bytes, 4, "idx labels")? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(Error::Format(format!(
            "idx labels: file truncated at byte offset {} (expected {expected} bytes total)",
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!(
            "idx labels: {} trailing bytes after label data",
            bytes.len() - expected
        )));
    }
    Ok(bytes[8..].to_vec())
}

/// Load one IDX image/label pair. Pixels are scaled to `[0,1]` and then
/// standardized with this split's own statistics (pass the result's
/// `normalization` to [`load_idx_with_stats`] for a validation split).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    load_idx_with_stats(images_path, labels_path, None)
}

/// [`load_idx`] with externally supplied normalization statistics.
pub fn load_idx_with_stats(
    images_path: &Path,
    labels_path: &Path,
    stats: Option<Normalization>,
) -> Result<LabeledDataset> {
    let image_bytes = read_file(images_path)?;
    let label_bytes = read_file(labels_path)?;
    let (count, rows, cols, pixels) = decode_idx_images(&image_bytes)?;
    let labels = decode_idx_labels(&label_bytes)?;
    if labels.len() != count {
        return Err(Error::Validation(format!(
            "{count} images but {} labels",
            labels.len()
        )));
    }
    let data: Vec<f32> = pixels.iter().map(|&p| f32::from(p) / 255.0).collect();
    let images = Tensor::from_vec([count, 1, rows, cols], data)?;
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::Validation(format!("label {bad} outside [0, 10)")));
    }
    Ok(standardize(images, labels, 10, stats))
}

/// Load the standard MNIST file quadruple from a directory; the test
/// split reuses the training statistics.
pub fn load_mnist(dir: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let train = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_idx_with_stats(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
        Some(train.normalization.clone()),
    )?;
    Ok((train, test))
}

// ── CIFAR-10 binary ──────────────────────────────────────────────────

const CIFAR_RECORD: usize = 3073;
const CIFAR_RECORDS_PER_FILE: usize = 10_000;

/// Decode CIFAR-10 binary records: 1 label byte then 3072 pixel bytes
/// (R plane, G plane, B plane, row-major).
pub fn decode_cifar_records(bytes: &[u8]) -> Result<Vec<(u8, Vec<u8>)>> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "cifar batch: {} bytes is not a multiple of the {CIFAR_RECORD}-byte record",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(CIFAR_RECORD)
        .map(|rec| (rec[0], rec[1..].to_vec()))
        .collect())
}

/// Load the six standard CIFAR-10 binary batch files from a directory.
pub fn load_cifar10_bin(dir: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let train_files = [
        "data_batch_1.bin",
        "data_batch_2.bin",
        "data_batch_3.bin",
        "data_batch_4.bin",
        "data_batch_5.bin",
    ];
    let mut train_pixels = Vec::with_capacity(5 * CIFAR_RECORDS_PER_FILE * 3072);
    let mut train_labels = Vec::with_capacity(5 * CIFAR_RECORDS_PER_FILE);
    for name in train_files {
        let (pixels, labels) = load_cifar_file(&dir.join(name))?;
        train_pixels.extend(pixels);
        train_labels.extend(labels);
    }
    let (test_pixels, test_labels) = load_cifar_file(&dir.join("test_batch.bin"))?;

    let to_tensor = |pixels: Vec<f32>, n: usize| Tensor::from_vec([n, 3, 32, 32], pixels);
    let train_images = to_tensor(train_pixels, train_labels.len())?;
    let test_images = to_tensor(test_pixels, test_labels.len())?;
    let train = standardize(train_images, train_labels, 10, None);
    let stats = train.normalization.clone();
    let test = standardize(test_images, test_labels, 10, Some(stats));
    Ok((train, test))
}

fn load_cifar_file(path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    let bytes = read_file(path)?;
    if bytes.len() != CIFAR_RECORD * CIFAR_RECORDS_PER_FILE {
        return Err(Error::Format(format!(
            "{}: expected {} bytes ({} records of {CIFAR_RECORD}), found {}",
            path.display(),
            CIFAR_RECORD * CIFAR_RECORDS_PER_FILE,
            CIFAR_RECORDS_PER_FILE,
            bytes.len()
        )));
    }
    let records = decode_cifar_records(&bytes)?;
    let mut pixels = Vec::with_capacity(records.len() * 3072);
    let mut labels = Vec::with_capacity(records.len());
    for (label, body) in records {
        if label > 9 {
            return Err(Error::Validation(format!(
                "{}: label {label} outside [0, 10)",
                path.display()
            )));
        }
        labels.push(usize::from(label));
        pixels.extend(body.iter().map(|&p| f32::from(p) / 255.0));
    }
    Ok((pixels, labels))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{}: file not found", path.display()),
        )));
    }
    Ok(std::fs::read(path)?)
}

// ── Synthetic datasets ───────────────────────────────────────────────

/// Kinds of generated test data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    /// Two Gaussian bumps at fixed, well-separated positions with faint
    /// pixel noise; linearly separable by construction.
    Blobs,
    /// One-pixel-wide horizontal vs vertical bars; a single vertical
    /// 1D edge filter separates the classes.
    SeparableBars,
}

/// Side length of generated images.
pub const SYNTH_HW: usize = 16;

/// Noise-free class template for [`SynthKind::Blobs`] in raw `[0,1]`
/// pixel space; the margin classifier in tests is built from these.
pub fn blob_template(class: usize) -> Vec<f32> {
    let center: (f64, f64) = if class == 0 { (5.0, 5.0) } else { (10.0, 10.0) };
    let mut img = vec![0.0f32; SYNTH_HW * SYNTH_HW];
    for y in 0..SYNTH_HW {
        for x in 0..SYNTH_HW {
            let d2 = (y as f64 - center.0).powi(2) + (x as f64 - center.1).powi(2);
            img[y * SYNTH_HW + x] = (-d2 / (2.0 * 2.0 * 2.0)).exp() as f32;
        }
    }
    img
}

/// Deterministic synthetic dataset of `n` samples.
pub fn synth_dataset(kind: SynthKind, n: usize, seed: u64) -> Result<LabeledDataset> {
    if n < 2 {
        return Err(Error::Input("synthetic datasets need n >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * SYNTH_HW * SYNTH_HW);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        labels.push(class);
        match kind {
            SynthKind::Blobs => {
                let template = blob_template(class);
                for &t in &template {
                    let noise: f64 = rng.gen_range(-0.05..0.05);
                    data.push((f64::from(t) + noise) as f32);
                }
            }
            SynthKind::SeparableBars => {
                let pos = rng.gen_range(3..SYNTH_HW - 3);
                let intensity: f32 = rng.gen_range(0.8..1.2);
                let mut img = vec![0.0f32; SYNTH_HW * SYNTH_HW];
                for t in 3..SYNTH_HW - 3 {
                    if class == 0 {
                        img[pos * SYNTH_HW + t] = intensity; // horizontal bar
                    } else {
                        img[t * SYNTH_HW + pos] = intensity; // vertical bar
                    }
                }
                data.extend(img);
            }
        }
    }
    let images = Tensor::from_vec([n, 1, SYNTH_HW, SYNTH_HW], data)?;
    Ok(standardize(images, labels, 2, None))
}
