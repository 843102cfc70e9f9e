//! MNIST IDX files: a big-endian `u32` magic, big-endian `u32` extents,
//! then raw `u8` payload.

use std::path::{Path, PathBuf};

use super::{io_err, DataError, Dataset, Result, Split};
use crate::scalar::Scalar;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw `[N, rows, cols]` pixels from an image file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let word = bytes.get(at..at + 4).ok_or(DataError::Truncated {
        expected: at + 4,
        found: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(word.try_into().expect("4 bytes")))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(DataError::BadMagic { expected, found });
    }
    Ok(())
}

fn payload(bytes: &[u8], header: usize, len: usize) -> Result<&[u8]> {
    bytes.get(header..header + len).ok_or(DataError::Truncated {
        expected: header + len,
        found: bytes.len(),
    })
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let pixels = payload(bytes, 16, count * rows * cols)?.to_vec();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    Ok(payload(bytes, 8, count)?.to_vec())
}

pub fn read_idx_images(path: impl AsRef<Path>) -> Result<IdxImages> {
    let path = path.as_ref();
    parse_idx_images(&std::fs::read(path).map_err(io_err(path))?)
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    parse_idx_labels(&std::fs::read(path).map_err(io_err(path))?)
}

pub fn write_idx_images(path: impl AsRef<Path>, images: &IdxImages) -> Result<()> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for word in [
        IDX_IMAGES_MAGIC,
        images.count as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&word.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    let path = path.as_ref();
    std::fs::write(path, out).map_err(io_err(path))
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    let path = path.as_ref();
    std::fs::write(path, out).map_err(io_err(path))
}

/// Pixels scaled by `1/255` into `[0, 1]`, shape `[rows, cols, 1]`.
pub fn dataset_from_idx<T: Scalar>(
    images: &IdxImages,
    labels: &[u8],
    num_classes: usize,
    split: Split,
) -> Result<Dataset<T>> {
    if images.count != labels.len() {
        return Err(DataError::Mismatch(format!(
            "{} images but {} labels",
            images.count,
            labels.len()
        )));
    }
    let scale = T::lit(255.0);
    let pixels = images
        .pixels
        .iter()
        .map(|&p| T::lit(f64::from(p)) / scale)
        .collect();
    let labels = labels.iter().map(|&l| usize::from(l)).collect();
    Dataset::new(
        pixels,
        [images.rows, images.cols, 1],
        labels,
        num_classes,
        split,
    )
}

/// Writes a single-channel dataset with pixels in `[0, 1]` back to IDX.
pub fn write_dataset_idx<T: Scalar>(
    ds: &Dataset<T>,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let [rows, cols, c] = ds.sample_shape;
    if c != 1 {
        return Err(DataError::Mismatch(format!(
            "IDX images need one channel, got {c}"
        )));
    }
    let pixels = ds
        .images
        .iter()
        .map(|&p| (p.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let labels: Vec<u8> = ds
        .labels
        .iter()
        .map(|&l| {
            u8::try_from(l)
                .map_err(|_| DataError::Mismatch(format!("label {l} does not fit a byte")))
        })
        .collect::<Result<_>>()?;
    write_idx_images(
        images_path,
        &IdxImages {
            count: ds.len(),
            rows,
            cols,
            pixels,
        },
    )?;
    write_idx_labels(labels_path, &labels)
}

#[derive(Debug, Clone)]
pub struct MnistSplits<T> {
    pub train: Dataset<T>,
    pub val: Dataset<T>,
    pub test: Dataset<T>,
}

fn find(dir: &Path, stems: &[&str]) -> Result<PathBuf> {
    stems
        .iter()
        .map(|s| dir.join(s))
        .find(|p| p.is_file())
        .ok_or_else(|| DataError::Io {
            path: dir.join(stems[0]).display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found"),
        })
}

/// Loads the four uncompressed MNIST files from `dir` and carves a seeded
/// validation fraction out of the training set.
pub fn load_mnist<T: Scalar>(
    dir: impl AsRef<Path>,
    val_fraction: f64,
    seed: u64,
) -> Result<MnistSplits<T>> {
    let dir = dir.as_ref();
    let load = |imgs: &[&str], lbls: &[&str], split| -> Result<Dataset<T>> {
        let images = read_idx_images(find(dir, imgs)?)?;
        let labels = read_idx_labels(find(dir, lbls)?)?;
        dataset_from_idx(&images, &labels, 10, split)
    };
    let full = load(
        &["train-images-idx3-ubyte", "train-images.idx3-ubyte"],
        &["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"],
        Split::Train,
    )?;
    let test = load(
        &["t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"],
        &["t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"],
        Split::Test,
    )?;
    let (train, val) = full.split_validation(val_fraction, seed);
    Ok(MnistSplits { train, val, test })
}
