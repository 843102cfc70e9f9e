//! Datasets: in-memory storage, MNIST IDX and CIFAR-10 binary readers,
//! augmentation and a synthetic generator for tests and smoke runs.

mod augment;
mod cifar;
mod idx;
mod synthetic;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use augment::{augment_batch, flip_horizontal, shift, AugmentConfig};
pub use cifar::{load_cifar10, parse_cifar_records, CifarSplits, CIFAR_RECORD_BYTES};
pub use idx::{
    dataset_from_idx, load_mnist, parse_idx_images, parse_idx_labels, read_idx_images,
    read_idx_labels, write_dataset_idx, write_idx_images, write_idx_labels, IdxImages, MnistSplits,
    IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
pub use synthetic::synthetic_dataset;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated input: need {expected} bytes, have {found}")]
    Truncated { expected: usize, found: usize },
    #[error("sample {index}: label {label} out of range for {classes} classes")]
    Label {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("{0}")]
    Mismatch(String),
    #[error("shift range {range} exceeds a quarter of extent {extent}")]
    Augment { range: usize, extent: usize },
}

pub type Result<T> = std::result::Result<T, DataError>;

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

/// Images stored flat as `[N, H, W, C]` with one label per image.
///
/// Stored as a plain vector rather than a [`Tensor`] so that `N = 0` is
/// representable.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub images: Vec<T>,
    pub sample_shape: [usize; 3],
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        images: Vec<T>,
        sample_shape: [usize; 3],
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let per = sample_shape.iter().product::<usize>();
        if per == 0 || images.len() != per * labels.len() {
            return Err(DataError::Mismatch(format!(
                "{} values for {} samples of shape {sample_shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(DataError::Label {
                index,
                label,
                classes: num_classes,
            });
        }
        Ok(Self {
            images,
            sample_shape,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[T] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Gathers `indices` into a `[B, H, W, C]` batch and its labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [h, w, c] = self.sample_shape;
        let x = Tensor::from_vec(&[indices.len(), h, w, c], data)
            .map_err(|e| DataError::Mismatch(e.to_string()))?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Self {
        let n = self.sample_len();
        let mut images = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Self {
            images,
            sample_shape: self.sample_shape,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split,
        }
    }

    /// Seeded shuffle, then the first `round(fraction * N)` samples become
    /// the validation set and the rest stay in training.
    pub fn split_validation(&self, fraction: f64, seed: u64) -> (Self, Self) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let nval = (fraction * self.len() as f64).round() as usize;
        let (val, train) = order.split_at(nval.min(self.len()));
        let mut train = train.to_vec();
        let mut val = val.to_vec();
        train.sort_unstable();
        val.sort_unstable();
        (
            self.subset(&train, Split::Train),
            self.subset(&val, Split::Val),
        )
    }

    /// Subtracts `mean` (shape `[H, W, C]`) from every image.
    pub fn subtract_mean(&mut self, mean: &[T]) -> Result<()> {
        if mean.len() != self.sample_len() {
            return Err(DataError::Mismatch(format!(
                "mean of {} values for samples of {}",
                mean.len(),
                self.sample_len()
            )));
        }
        for img in self.images.chunks_exact_mut(mean.len()) {
            for (p, &m) in img.iter_mut().zip(mean) {
                *p = *p - m;
            }
        }
        Ok(())
    }

    /// Per-pixel mean over all images; zeros for an empty set.
    pub fn mean_image(&self) -> Vec<T> {
        let n = self.sample_len();
        let mut acc = vec![0.0f64; n];
        for img in self.images.chunks_exact(n) {
            for (a, &p) in acc.iter_mut().zip(img) {
                *a += p.as_f64();
            }
        }
        let count = self.len().max(1) as f64;
        acc.into_iter().map(|a| T::lit(a / count)).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        self.labels.iter().for_each(|&l| counts[l] += 1);
        counts
    }
}
