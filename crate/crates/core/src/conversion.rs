//! Standard to BM conversion.

use crate::nn::{BmWeights, Result, NEG_SENTINEL};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Sign-splits classical weights into log-domain banks:
/// `V+ = ln w` where `w > 0`, `V- = ln |w|` where `w < 0`, the sentinel
/// elsewhere. The bias is carried over unchanged.
pub fn convert_weights<T: Scalar>(w: &Tensor<T>, b: &Tensor<T>) -> Result<BmWeights<T>> {
    let s = T::lit(NEG_SENTINEL);
    let vplus = w.map(|x| if x > T::zero() { x.ln().max(s) } else { s });
    let vminus = w.map(|x| if x < T::zero() { (-x).ln().max(s) } else { s });
    BmWeights::new(vplus, vminus, b.clone())
}
