//! Labelled image sets and the CIFAR-10 binary format.
//!
//! A CIFAR-10 batch file is a sequence of 3073-byte records: one label byte
//! followed by 1024 red, 1024 green and 1024 blue bytes in row-major order.

use std::path::Path;

use crate::tensor::{Tensor, TensorError};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
pub const CIFAR_BATCH_RECORDS: usize = 10_000;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_TRAIN_FILES: [&str; 5] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: incomplete record at byte {offset} ({len} bytes is not a multiple of {CIFAR_RECORD})")]
    Truncated { path: String, offset: usize, len: usize },
    #[error("{path}: label {label} at byte {offset} is not below {CIFAR_CLASSES}")]
    Label { path: String, offset: usize, label: u8 },
    #[error("{path}: empty file")]
    Empty { path: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Images `[N, 3, 32, 32]` in `[0, 1]` with labels `0..10`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>) -> Result<Self, DataError> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "dataset",
                detail: format!("images {:?} with {} labels", images.shape(), labels.len()),
            }
            .into());
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Images `start..end` in order.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self, DataError> {
        Ok(Self { images: self.images.slice_outer(start, end)?, labels: self.labels[start..end].to_vec() })
    }

    pub fn select(&self, rows: &[usize]) -> Result<Self, DataError> {
        Ok(Self { images: self.images.select_outer(rows)?, labels: rows.iter().map(|&r| self.labels[r]).collect() })
    }

    pub fn concat(parts: &[Self]) -> Result<Self, DataError> {
        let Some(first) = parts.first() else {
            return Err(TensorError::InvalidArgument { op: "dataset", detail: "nothing to concatenate".into() }.into());
        };
        let [c, h, w] = first.image_shape();
        let n: usize = parts.iter().map(Self::len).sum();
        let mut data = Vec::with_capacity(n * c * h * w);
        let mut labels = Vec::with_capacity(n);
        for p in parts {
            if p.image_shape() != [c, h, w] {
                return Err(TensorError::ShapeMismatch { op: "dataset", detail: "mixed image shapes".into() }.into());
            }
            data.extend_from_slice(p.images.data());
            labels.extend_from_slice(&p.labels);
        }
        Self::new(Tensor::new([n, c, h, w], data)?, labels)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

/// Parses CIFAR-10 records; `path` is used in error messages only.
pub fn parse_cifar10(bytes: &[u8], path: &str) -> Result<Dataset, DataError> {
    if bytes.is_empty() {
        return Err(DataError::Empty { path: path.into() });
    }
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let offset = bytes.len() - bytes.len() % CIFAR_RECORD;
        return Err(DataError::Truncated { path: path.into(), offset, len: bytes.len() });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * CIFAR_PIXELS);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0];
        if usize::from(label) >= CIFAR_CLASSES {
            return Err(DataError::Label { path: path.into(), offset: i * CIFAR_RECORD, label });
        }
        labels.push(usize::from(label));
        data.extend(rec[1..].iter().map(|&b| f32::from(b) / 255.0));
    }
    Dataset::new(Tensor::new([n, 3, CIFAR_SIDE, CIFAR_SIDE], data)?, labels)
}

/// Reads one CIFAR-10 batch file.
pub fn read_cifar10(path: &Path) -> Result<Dataset, DataError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    parse_cifar10(&bytes, &path.display().to_string())
}

/// Reads a CIFAR-10 binary distribution directory: the five training batch
/// files in order, then the test batch.
pub fn ingest_cifar10(dir: &Path) -> Result<(Dataset, Dataset), DataError> {
    let train = CIFAR_TRAIN_FILES.iter().map(|f| read_cifar10(&dir.join(f))).collect::<Result<Vec<_>, _>>()?;
    Ok((Dataset::concat(&train)?, read_cifar10(&dir.join(CIFAR_TEST_FILE))?))
}

/// Encodes a `[N, 3, 32, 32]` dataset as CIFAR-10 records, rounding pixels
/// to the nearest of the 256 levels.
pub fn encode_cifar10(data: &Dataset) -> Result<Vec<u8>, DataError> {
    if data.image_shape() != [3, CIFAR_SIDE, CIFAR_SIDE] {
        return Err(TensorError::ShapeMismatch { op: "encode_cifar10", detail: format!("{:?}", data.image_shape()) }.into());
    }
    let mut out = Vec::with_capacity(data.len() * CIFAR_RECORD);
    for (img, &label) in data.images.data().chunks_exact(CIFAR_PIXELS).zip(&data.labels) {
        if label >= CIFAR_CLASSES {
            return Err(TensorError::LabelOutOfRange { label, classes: CIFAR_CLASSES }.into());
        }
        out.push(label as u8);
        out.extend(img.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn write_cifar10(path: &Path, data: &Dataset) -> Result<(), DataError> {
    crate::io::write_atomic(path, &encode_cifar10(data)?).map_err(io_err(path))
}
