//! CIFAR-10 binary batches: 3073-byte records of one label byte followed by
//! 1024 red, 1024 green and 1024 blue bytes, each plane row-major 32x32.

use std::path::{Path, PathBuf};

use super::{io_err, DataError, Dataset, Result, Split};
use crate::scalar::Scalar;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Decodes whole records into `[N, 32, 32, 3]` pixels in `[0, 1]`.
pub fn parse_cifar_records<T: Scalar>(bytes: &[u8], split: Split) -> Result<Dataset<T>> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        let n = bytes.len() / CIFAR_RECORD_BYTES + 1;
        return Err(DataError::Truncated {
            expected: n * CIFAR_RECORD_BYTES,
            found: bytes.len(),
        });
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let scale = T::lit(255.0);
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut images = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        labels.push(usize::from(rec[0]));
        let px = &rec[1..];
        for i in 0..plane {
            for ch in 0..3 {
                images.push(T::lit(f64::from(px[ch * plane + i])) / scale);
            }
        }
    }
    Dataset::new(images, [CIFAR_SIDE, CIFAR_SIDE, 3], labels, 10, split)
}

#[derive(Debug, Clone)]
pub struct CifarSplits<T> {
    pub train: Dataset<T>,
    pub test: Dataset<T>,
    /// Training-set mean image `[32, 32, 3]`, already subtracted from both sets.
    pub mean: Vec<T>,
}

fn batch_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("cifar-10-batches-bin");
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn read_batches<T: Scalar>(dir: &Path, names: &[String], split: Split) -> Result<Dataset<T>> {
    let mut bytes = Vec::new();
    for name in names {
        let path = dir.join(name);
        bytes.extend(std::fs::read(&path).map_err(io_err(&path))?);
    }
    parse_cifar_records(&bytes, split)
}

/// Loads `data_batch_{1..5}.bin` and `test_batch.bin` and subtracts the
/// training mean image from both sets.
pub fn load_cifar10<T: Scalar>(dir: impl AsRef<Path>) -> Result<CifarSplits<T>> {
    let dir = batch_dir(dir.as_ref());
    let train_names: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
    let mut train = read_batches(&dir, &train_names, Split::Train)?;
    let mut test = read_batches(&dir, &["test_batch.bin".to_string()], Split::Test)?;
    let mean = train.mean_image();
    train.subtract_mean(&mean)?;
    test.subtract_mean(&mean)?;
    Ok(CifarSplits { train, test, mean })
}
