use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Split};
use crate::scalar::Scalar;

/// A separable toy task: each class lights a different band of pixels (a
/// row band for even classes, a column band for odd ones) over uniform
/// noise in `[0, 0.3)`. Labels cycle through the classes.
pub fn synthetic_dataset<T: Scalar>(
    n: usize,
    shape: [usize; 3],
    num_classes: usize,
    seed: u64,
) -> Dataset<T> {
    let [h, w, c] = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * h * w * c);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % num_classes;
        let band = label / 2;
        let bands = num_classes.div_ceil(2);
        for r in 0..h {
            for col in 0..w {
                let pos = if label.is_multiple_of(2) { r } else { col };
                let extent = if label.is_multiple_of(2) { h } else { w };
                let lit = pos * bands / extent == band;
                for _ in 0..c {
                    let noise: f64 = rng.random_range(0.0..0.3);
                    images.push(T::lit(if lit { 0.7 + noise } else { noise }));
                }
            }
        }
        labels.push(label);
    }
    Dataset::new(images, shape, labels, num_classes, Split::Train)
        .expect("consistent synthetic data")
}
