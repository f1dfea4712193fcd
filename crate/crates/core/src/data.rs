//! IDX ingestion, seeded splits and evaluation-pool sampling.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::shapecheck::TensorShape;
use crate::trainer::Tensor;

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;
pub const IMAGE_SIDE: usize = 28;
pub const NUM_LABELS: u8 = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic number {found:#010x}, expected {expected}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("{path}: images are {rows}x{cols}, expected 28x28")]
    DimensionMismatch { path: PathBuf, rows: usize, cols: usize },
    #[error("{path}: truncated, need {expected} bytes but found {actual}")]
    TruncatedFile { path: PathBuf, expected: usize, actual: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("record {index} has label {label}, expected < 10")]
    InvalidLabel { index: usize, label: u8 },
    #[error("need {needed} records, only {available} available")]
    InsufficientData { needed: usize, available: usize },
    #[error("record index {index} out of range for {len} records")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("sample shape {shape} needs {expected} values per record, data has {actual} in total")]
    BadLayout { shape: TensorShape, expected: usize, actual: usize },
}

/// Images normalized to `[0, 1]` with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    sample_shape: TensorShape,
    images: Vec<f32>,
    labels: Vec<u8>,
    checksums: Vec<FileChecksum>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileChecksum {
    pub path: String,
    pub sha256: String,
}

impl Dataset {
    pub fn from_parts(
        name: impl Into<String>,
        sample_shape: TensorShape,
        images: Vec<f32>,
        labels: Vec<u8>,
    ) -> Result<Self, DataError> {
        let per = sample_shape.numel();
        if images.len() != per * labels.len() {
            if images.len().is_multiple_of(per) {
                return Err(DataError::CountMismatch {
                    images: images.len() / per,
                    labels: labels.len(),
                });
            }
            return Err(DataError::BadLayout {
                shape: sample_shape,
                expected: per,
                actual: images.len(),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= NUM_LABELS) {
            return Err(DataError::InvalidLabel { index, label });
        }
        Ok(Self {
            name: name.into(),
            sample_shape,
            images,
            labels,
            checksums: Vec::new(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> TensorShape {
        self.sample_shape
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.sample_shape.numel();
        &self.images[i * per..(i + 1) * per]
    }

    pub fn checksums(&self) -> &[FileChecksum] {
        &self.checksums
    }

    pub fn label_histogram(&self) -> [usize; NUM_LABELS as usize] {
        let mut h = [0; NUM_LABELS as usize];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// View over every record in storage order.
    pub fn full_view(self: &Arc<Self>) -> DatasetView {
        DatasetView {
            source: Arc::clone(self),
            indices: (0..self.len()).collect(),
        }
    }
}

fn read_file(path: &Path) -> Result<(Vec<u8>, FileChecksum), DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = fs::read(path).map_err(io)?;
    let checksum = FileChecksum {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&raw)),
    };
    let bytes = if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(io)?;
        out
    } else {
        raw
    };
    Ok((bytes, checksum))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::TruncatedFile {
            path: path.to_path_buf(),
            expected: at + 4,
            actual: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<(), DataError> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], header: usize, len: usize, path: &Path) -> Result<&'a [u8], DataError> {
    let expected = header + len;
    if bytes.len() < expected {
        return Err(DataError::TruncatedFile {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(&bytes[header..expected])
}

/// Parses an IDX image/label file pair (raw or gzipped).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    let (img, img_sum) = read_file(images_path)?;
    check_magic(&img, IMAGE_MAGIC, images_path)?;
    let count = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
        return Err(DataError::DimensionMismatch {
            path: images_path.to_path_buf(),
            rows,
            cols,
        });
    }
    let pixels = payload(&img, 16, count * rows * cols, images_path)?;

    let (lab, lab_sum) = read_file(labels_path)?;
    check_magic(&lab, LABEL_MAGIC, labels_path)?;
    let label_count = be_u32(&lab, 4, labels_path)? as usize;
    if label_count != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    let labels = payload(&lab, 8, label_count, labels_path)?.to_vec();

    let name = images_path
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    let images = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    let mut d = Dataset::from_parts(name, TensorShape::spatial(rows, cols, 1), images, labels)?;
    d.checksums = vec![img_sum, lab_sum];
    Ok(d)
}

/// An index list over a shared dataset.
#[derive(Debug, Clone)]
pub struct DatasetView {
    source: Arc<Dataset>,
    indices: Vec<usize>,
}

impl DatasetView {
    pub fn from_indices(source: Arc<Dataset>, indices: Vec<usize>) -> Result<Self, DataError> {
        if let Some(&index) = indices.iter().find(|&&i| i >= source.len()) {
            return Err(DataError::IndexOutOfRange {
                index,
                len: source.len(),
            });
        }
        Ok(Self { source, indices })
    }

    pub fn source(&self) -> &Arc<Dataset> {
        &self.source
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn sample_shape(&self) -> TensorShape {
        self.source.sample_shape
    }

    pub fn label(&self, pos: usize) -> usize {
        self.source.labels[self.indices[pos]] as usize
    }

    pub fn labels(&self) -> Vec<usize> {
        (0..self.len()).map(|p| self.label(p)).collect()
    }

    /// First `n` records of the view (all of it when shorter).
    pub fn take(&self, n: usize) -> DatasetView {
        DatasetView {
            source: Arc::clone(&self.source),
            indices: self.indices[..n.min(self.len())].to_vec(),
        }
    }

    /// Records `range` of the view.
    pub fn slice(&self, range: std::ops::Range<usize>) -> DatasetView {
        DatasetView {
            source: Arc::clone(&self.source),
            indices: self.indices[range].to_vec(),
        }
    }

    /// Materializes the records at view positions `positions`.
    pub fn gather<S: Scalar>(&self, positions: &[usize]) -> (Tensor<S>, Vec<usize>) {
        let shape = self.sample_shape();
        let mut data = Vec::with_capacity(positions.len() * shape.numel());
        let mut labels = Vec::with_capacity(positions.len());
        for &p in positions {
            let i = self.indices[p];
            data.extend(self.source.image(i).iter().map(|&v| S::from_f64_lossy(v as f64)));
            labels.push(self.source.labels[i] as usize);
        }
        (Tensor::new(positions.len(), shape, data), labels)
    }

    /// Seeded Fisher-Yates shuffle; the first `round(fraction * len)` records
    /// go to `train`.
    pub fn shuffle_split(&self, fraction: f64, seed: u64) -> Split {
        let mut order = self.indices.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((fraction * order.len() as f64).round() as usize).min(order.len());
        let test = order.split_off(n_train);
        Split {
            train: DatasetView {
                source: Arc::clone(&self.source),
                indices: order,
            },
            test: DatasetView {
                source: Arc::clone(&self.source),
                indices: test,
            },
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: DatasetView,
    pub test: DatasetView,
    pub seed: u64,
}

pub const TRAIN_FRACTION: f64 = 0.8;

pub fn shuffle_split(d: &Arc<Dataset>, fraction: f64, seed: u64) -> Split {
    d.full_view().shuffle_split(fraction, seed)
}

/// Draws `n` distinct records uniformly from `train`.
pub fn sample_eval_pool(train: &DatasetView, n: usize, seed: u64) -> Result<DatasetView, DataError> {
    if train.len() < n {
        return Err(DataError::InsufficientData {
            needed: n,
            available: train.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, train.len(), n);
    Ok(DatasetView {
        source: Arc::clone(&train.source),
        indices: picked.into_iter().map(|p| train.indices[p]).collect(),
    })
}
