use serde::{Deserialize, Serialize};

use super::{NnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Zero padding so that `out = ceil(in / stride)`; extra padding goes after.
    #[default]
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, padding: Padding) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    /// Dense layers run as 1x1 convolutions over a 1x1 image.
    pub fn pointwise() -> Self {
        Self::new(1, 1, Padding::Valid)
    }

    /// Output extent and leading pad for one spatial axis.
    pub fn axis(&self, input: usize) -> Result<(usize, usize, usize)> {
        if self.stride == 0 {
            return Err(NnError::Shape("stride must be at least 1".into()));
        }
        if self.kernel == 0 {
            return Err(NnError::Shape("kernel must be at least 1".into()));
        }
        match self.padding {
            Padding::Same => {
                let out = input.div_ceil(self.stride);
                let total = ((out - 1) * self.stride + self.kernel).saturating_sub(input);
                Ok((out, total / 2, input + total))
            }
            Padding::Valid => {
                if input < self.kernel {
                    return Err(NnError::Shape(format!(
                        "spatial extent {input} smaller than kernel {}",
                        self.kernel
                    )));
                }
                Ok(((input - self.kernel) / self.stride + 1, 0, input))
            }
        }
    }

    pub fn output_shape(&self, input: &[usize], filters: usize) -> Result<Vec<usize>> {
        let plan = ConvPlan::new(self, input)?;
        Ok(vec![plan.batch, plan.out_l, plan.out_m, filters])
    }
}

/// Resolved extents for one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvPlan {
    pub batch: usize,
    pub l: usize,
    pub m: usize,
    pub c: usize,
    pub pad_l: usize,
    pub pad_m: usize,
    pub lp: usize,
    pub mp: usize,
    pub out_l: usize,
    pub out_m: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvPlan {
    pub fn new(geom: &ConvGeometry, input: &[usize]) -> Result<Self> {
        let &[batch, l, m, c] = input else {
            return Err(NnError::Shape(format!(
                "convolution input must be [batch, L, M, C], got {input:?}"
            )));
        };
        let (out_l, pad_l, lp) = geom.axis(l)?;
        let (out_m, pad_m, mp) = geom.axis(m)?;
        Ok(Self {
            batch,
            l,
            m,
            c,
            pad_l,
            pad_m,
            lp,
            mp,
            out_l,
            out_m,
            k: geom.kernel,
            stride: geom.stride,
        })
    }

    /// Receptive field size `K^2 C`.
    pub fn fan_in(&self) -> usize {
        self.k * self.k * self.c
    }

    pub fn padded_len(&self) -> usize {
        self.batch * self.lp * self.mp * self.c
    }

    /// Offset of `(b, row, col, 0)` in the padded buffer.
    #[inline]
    pub fn padded_offset(&self, b: usize, row: usize, col: usize) -> usize {
        ((b * self.lp + row) * self.mp + col) * self.c
    }

    /// Copies `src` (unpadded NHWC) into a padded buffer filled with `fill`.
    pub fn pad<T: Copy>(&self, src: &[T], fill: T) -> Vec<T> {
        if self.lp == self.l && self.mp == self.m {
            return src.to_vec();
        }
        let mut out = vec![fill; self.padded_len()];
        let row_len = self.m * self.c;
        for b in 0..self.batch {
            for r in 0..self.l {
                let s = (b * self.l + r) * row_len;
                let d = self.padded_offset(b, r + self.pad_l, self.pad_m);
                out[d..d + row_len].copy_from_slice(&src[s..s + row_len]);
            }
        }
        out
    }

    /// Drops the padding from a gradient w.r.t. the padded input.
    pub fn unpad<T: Scalar>(&self, padded: &[T]) -> Result<Tensor<T>> {
        let shape = [self.batch, self.l, self.m, self.c];
        if self.lp == self.l && self.mp == self.m {
            return Ok(Tensor::from_vec(&shape, padded.to_vec())?);
        }
        let row_len = self.m * self.c;
        let mut out = Vec::with_capacity(self.batch * self.l * row_len);
        for b in 0..self.batch {
            for r in 0..self.l {
                let s = self.padded_offset(b, r + self.pad_l, self.pad_m);
                out.extend_from_slice(&padded[s..s + row_len]);
            }
        }
        Ok(Tensor::from_vec(&shape, out)?)
    }

    /// Calls `f(out_position, padded_offset_of_window_row)` for every output
    /// position and kernel row; the window row spans `K * C` contiguous entries.
    #[inline]
    pub fn for_each_window_row(
        &self,
        b: usize,
        ol: usize,
        om: usize,
        mut f: impl FnMut(usize, usize),
    ) {
        for kh in 0..self.k {
            let row = ol * self.stride + kh;
            f(kh, self.padded_offset(b, row, om * self.stride));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_extents() {
        let g = ConvGeometry::new(3, 1, Padding::Same);
        assert_eq!(g.axis(28).unwrap(), (28, 1, 30));
        let g2 = ConvGeometry::new(3, 2, Padding::Same);
        assert_eq!(g2.axis(32).unwrap(), (16, 0, 33));
        let g1 = ConvGeometry::new(1, 2, Padding::Same);
        assert_eq!(g1.axis(32).unwrap(), (16, 0, 32));
    }

    #[test]
    fn valid_padding_extents() {
        let g = ConvGeometry::new(3, 1, Padding::Valid);
        assert_eq!(g.axis(3).unwrap(), (1, 0, 3));
        assert!(g.axis(2).is_err());
        assert!(ConvGeometry::new(3, 0, Padding::Valid).axis(5).is_err());
    }

    #[test]
    fn pad_unpad_round_trip() {
        let g = ConvGeometry::new(3, 1, Padding::Same);
        let plan = ConvPlan::new(&g, &[2, 3, 4, 2]).unwrap();
        let src: Vec<f64> = (0..48).map(f64::from).collect();
        let padded = plan.pad(&src, -1.0);
        assert_eq!(padded.len(), 2 * 5 * 6 * 2);
        assert_eq!(padded[0], -1.0);
        let back = plan.unpad(&padded).unwrap();
        assert_eq!(back.data(), &src[..]);
    }
}
