//! Random shifts with zero fill and horizontal flips.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Maximum vertical shift in pixels, either direction.
    pub shift_rows: usize,
    /// Maximum horizontal shift in pixels, either direction.
    pub shift_cols: usize,
    pub flip_horizontal: bool,
}

impl AugmentConfig {
    pub fn is_identity(&self) -> bool {
        self.shift_rows == 0 && self.shift_cols == 0 && !self.flip_horizontal
    }

    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        for (range, extent) in [(self.shift_rows, rows), (self.shift_cols, cols)] {
            if 4 * range > extent {
                return Err(DataError::Augment { range, extent });
            }
        }
        Ok(())
    }
}

/// Mirrors one `[H, W, C]` image left to right.
pub fn flip_horizontal<T: Copy>(img: &mut [T], shape: [usize; 3]) {
    let [h, w, c] = shape;
    for r in 0..h {
        for j in 0..w / 2 {
            for ch in 0..c {
                img.swap((r * w + j) * c + ch, (r * w + w - 1 - j) * c + ch);
            }
        }
    }
}

/// Moves content by `(dy, dx)` pixels; vacated pixels become zero.
pub fn shift<T: Scalar>(img: &[T], shape: [usize; 3], dy: isize, dx: isize) -> Vec<T> {
    let [h, w, c] = shape;
    let mut out = vec![T::zero(); img.len()];
    for r in 0..h {
        let Some(sr) = r.checked_add_signed(-dy).filter(|&s| s < h) else {
            continue;
        };
        for col in 0..w {
            let Some(sc) = col.checked_add_signed(-dx).filter(|&s| s < w) else {
                continue;
            };
            let (dst, src) = ((r * w + col) * c, (sr * w + sc) * c);
            out[dst..dst + c].copy_from_slice(&img[src..src + c]);
        }
    }
    out
}

fn sample_rng(seed: u64, epoch: u64, sample: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch << 32) ^ sample as u64);
    rng
}

/// Augments a `[B, H, W, C]` batch. Each sample draws from its own stream
/// keyed by `(seed, epoch, sample_ids[i])`, so results do not depend on
/// batch composition or order.
pub fn augment_batch<T: Scalar>(
    x: &Tensor<T>,
    sample_ids: &[usize],
    cfg: &AugmentConfig,
    seed: u64,
    epoch: u64,
) -> Result<Tensor<T>> {
    let &[b, h, w, c] = x.shape() else {
        return Err(DataError::Mismatch(format!(
            "augment expects [B, H, W, C], got {:?}",
            x.shape()
        )));
    };
    if sample_ids.len() != b {
        return Err(DataError::Mismatch(format!(
            "{} sample ids for a batch of {b}",
            sample_ids.len()
        )));
    }
    cfg.validate(h, w)?;
    if cfg.is_identity() {
        return Ok(x.clone());
    }
    let shape = [h, w, c];
    let per = h * w * c;
    let mut out = Vec::with_capacity(x.len());
    for (img, &id) in x.data().chunks_exact(per).zip(sample_ids) {
        let mut rng = sample_rng(seed, epoch, id);
        let dy = rng.random_range(-(cfg.shift_rows as i64)..=cfg.shift_rows as i64) as isize;
        let dx = rng.random_range(-(cfg.shift_cols as i64)..=cfg.shift_cols as i64) as isize;
        let mut moved = shift(img, shape, dy, dx);
        if cfg.flip_horizontal && rng.random_bool(0.5) {
            flip_horizontal(&mut moved, shape);
        }
        out.extend(moved);
    }
    Tensor::from_vec(x.shape(), out).map_err(|e| DataError::Mismatch(e.to_string()))
}
