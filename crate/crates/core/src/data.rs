//! Image datasets: the CIFAR-10 binary test batch and a seeded synthetic
//! stand-in with the same geometry.
//!
//! Pixels are mapped byte -> [0, 1] -> `(v - 0.5) / 0.5`, per channel.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const NORM_MEAN: f32 = 0.5;
pub const NORM_STD: f32 = 0.5;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_CLASSES: usize = 10;
/// One label byte followed by 1024 R, 1024 G and 1024 B bytes.
pub const CIFAR_RECORD: usize = 1 + CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    Cifar10Binary,
    Synthetic { seed: u64 },
    Subset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, 3, 32, 32]`, standardized.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub source: DataSource,
}

pub fn standardize(byte: u8) -> f32 {
    (byte as f32 / 255.0 - NORM_MEAN) / NORM_STD
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copies the samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::Input("empty selection".into()));
        }
        let shape = self.images.shape();
        let per: usize = shape[1..].iter().product();
        let src = self.images.as_f32()?;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Input(format!("sample index {i} out of range")));
            }
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut s = shape.to_vec();
        s[0] = indices.len();
        Ok(Dataset {
            images: Tensor::from_f32(s, data)?,
            labels,
            source: DataSource::Subset,
        })
    }

    /// The first `n` samples (or all of them when `n >= len`).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let mut d = self.select(&idx)?;
        d.source = self.source.clone();
        Ok(d)
    }
}

/// Decodes CIFAR-10 binary records.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() {
        return Err(Error::Format("CIFAR-10 batch is empty".into()));
    }
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let whole = bytes.len() / CIFAR_RECORD;
        return Err(Error::Format(format!(
            "CIFAR-10 batch of {} bytes is not a multiple of {CIFAR_RECORD}; record {whole} at offset {} is truncated",
            bytes.len(),
            whole * CIFAR_RECORD
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Format(format!(
                "record {i} at offset {} has label byte {label} (> 9)",
                i * CIFAR_RECORD
            )));
        }
        labels.push(label);
        images.extend(rec[1..].iter().map(|&b| standardize(b)));
    }
    Ok(Dataset {
        images: Tensor::from_f32(vec![n, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE], images)?,
        labels,
        source: DataSource::Cifar10Binary,
    })
}

/// Loads `test_batch.bin` from a CIFAR-10 binary directory, or the given file
/// directly when `path` is a file.
pub fn load_cifar10(path: &Path) -> Result<Dataset> {
    let file = if path.is_dir() {
        path.join(CIFAR_TEST_FILE)
    } else {
        path.to_path_buf()
    };
    let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
    parse_cifar10(&bytes)
}

/// Deterministic random dataset shaped like CIFAR-10.
///
/// Pixels are uniform bytes (`next_u64() % 256`) drawn channel-plane by
/// channel-plane per image, then standardized. Labels are `i % 10` for
/// `i in 0..n`, shuffled with the same generator after all pixels are drawn,
/// so every class appears `floor(n/10)` or `ceil(n/10)` times.
pub fn synthetic_dataset(n: usize, seed: u64) -> Result<Dataset> {
    let (pixels, labels) = synthetic_bytes(n, seed)?;
    Ok(Dataset {
        images: Tensor::from_f32(
            vec![n, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE],
            pixels.iter().map(|&b| standardize(b)).collect(),
        )?,
        labels,
        source: DataSource::Synthetic { seed },
    })
}

/// Raw pixel bytes and labels behind [`synthetic_dataset`].
pub fn synthetic_bytes(n: usize, seed: u64) -> Result<(Vec<u8>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::Input("synthetic dataset needs at least one sample".into()));
    }
    let mut rng = Rng::new(seed);
    let pixels: Vec<u8> = (0..n * (CIFAR_RECORD - 1)).map(|_| rng.below(256) as u8).collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % CIFAR_CLASSES).collect();
    rng.shuffle(&mut labels);
    Ok((pixels, labels))
}
