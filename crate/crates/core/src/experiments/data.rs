//! Labelled datasets: IDX (MNIST) loading and Gaussian cluster-mixture synthesis.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Canonical MNIST file names: train images, train labels, test images,
/// test labels.
pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    dim: usize,
    classes: usize,
    inputs: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    /// `inputs` is `labels.len() × dim`, row-major.
    pub fn new(
        name: impl Into<String>,
        split: Split,
        dim: usize,
        classes: usize,
        inputs: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if dim == 0 || classes == 0 {
            return Err(Error::invalid("dim and class count must be positive"));
        }
        if inputs.len() != labels.len() * dim {
            return Err(Error::invalid(format!(
                "{} inputs of dimension {dim} need {} values, got {}",
                labels.len(),
                labels.len() * dim,
                inputs.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::invalid(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Self {
            name: name.into(),
            split,
            dim,
            classes,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// The first `n` samples (all of them if `n ≥ len`).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            name: self.name.clone(),
            split: self.split,
            dim: self.dim,
            classes: self.classes,
            inputs: self.inputs[..n * self.dim].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| format_err(bytes.len(), format!("truncated header, need 4 bytes at offset {offset}")))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = read_u32(bytes, 0)?;
    if found != expected {
        return Err(format_err(
            0,
            format!("expected magic 0x{expected:08x}, found 0x{found:08x}"),
        ));
    }
    Ok(())
}

fn payload(bytes: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    let end = start + len;
    if bytes.len() < end {
        return Err(format_err(
            bytes.len(),
            format!("truncated payload, expected {end} bytes, file has {}", bytes.len()),
        ));
    }
    Ok(&bytes[start..end])
}

/// Parses an IDX image file into `count × (rows·cols)` pixels in `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let dim = rows * cols;
    let pixels = payload(bytes, 16, count * dim)?;
    Ok((count, dim, pixels.iter().map(|&p| p as f64 / 255.0).collect()))
}

/// Parses an IDX label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    Ok(payload(bytes, 8, count)?.iter().map(|&b| b as usize).collect())
}

pub fn load_mnist(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let (count, dim, pixels) = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if labels.len() != count {
        return Err(format_err(
            4,
            format!("{count} images but {} labels", labels.len()),
        ));
    }
    if let Some(pos) = labels.iter().position(|&y| y > 9) {
        return Err(format_err(8 + pos, format!("label {} outside 0..10", labels[pos])));
    }
    Dataset::new("mnist", split, dim, 10, pixels, labels)
}

/// Loads the train and test splits from a directory holding [`MNIST_FILES`].
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let [ti, tl, vi, vl] = MNIST_FILES.map(|f| dir.join(f));
    Ok((load_mnist(&ti, &tl, Split::Train)?, load_mnist(&vi, &vl, Split::Test)?))
}

/// A mixture of Gaussian clusters standing in for MNIST: `classes ×
/// clusters_per_class` centers drawn from `N(0, spread²·I)` (fixed by
/// `seed`), cluster `j` labelled `j mod classes`, unit-variance noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub clusters_per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            clusters_per_class: 3,
            dim: 64,
            spread: 0.5,
            seed: 2024,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.clusters_per_class == 0 || self.dim == 0 {
            return Err(Error::invalid("classes, clusters_per_class and dim must be at least 1"));
        }
        if !(self.spread >= 0.0 && self.spread.is_finite()) {
            return Err(Error::invalid("spread must be nonnegative"));
        }
        Ok(())
    }

    fn centers(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.classes * self.clusters_per_class * self.dim)
            .map(|_| self.spread * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

/// `count` samples cycling through the clusters. Both splits share the
/// centers; the noise stream depends on the split.
pub fn synth_dataset(spec: &SynthSpec, count: usize, split: Split) -> Result<Dataset> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::invalid("count must be at least 1"));
    }
    let centers = spec.centers();
    let clusters = spec.classes * spec.clusters_per_class;
    let stream = match split {
        Split::Train => 1,
        Split::Test => 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let mut inputs = Vec::with_capacity(count * spec.dim);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let c = i % clusters;
        let center = &centers[c * spec.dim..(c + 1) * spec.dim];
        inputs.extend(center.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)));
        labels.push(c % spec.classes);
    }
    Dataset::new("synthetic", split, spec.dim, spec.classes, inputs, labels)
}
