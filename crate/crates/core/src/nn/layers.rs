use super::{NnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.relu()
}

/// Gradient of `relu` given the forward input; the derivative at 0 is taken as 0.
pub fn relu_backward<T: Scalar>(grad: &Tensor<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(grad.zip_with(input, |g, x| if x > T::zero() { g } else { T::zero() })?)
}

#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

/// Non-overlapping `size x size` max pooling over NHWC; trailing rows and
/// columns that do not fill a window are dropped.
pub fn max_pool_forward<T: Scalar>(
    x: &Tensor<T>,
    size: usize,
) -> Result<(Tensor<T>, MaxPoolCache)> {
    let &[batch, l, m, c] = x.shape() else {
        return Err(NnError::Shape(format!(
            "max pool input must be [batch, L, M, C], got {:?}",
            x.shape()
        )));
    };
    if size == 0 || l < size || m < size {
        return Err(NnError::Shape(format!(
            "pool size {size} does not fit {l}x{m}"
        )));
    }
    let (ol, om) = (l / size, m / size);
    let data = x.data();
    let mut out = Vec::with_capacity(batch * ol * om * c);
    let mut argmax = Vec::with_capacity(out.capacity());
    for b in 0..batch {
        for i in 0..ol {
            for j in 0..om {
                for ch in 0..c {
                    let mut best = (usize::MAX, T::neg_infinity());
                    for di in 0..size {
                        for dj in 0..size {
                            let idx = ((b * l + i * size + di) * m + j * size + dj) * c + ch;
                            if best.0 == usize::MAX || data[idx] > best.1 {
                                best = (idx, data[idx]);
                            }
                        }
                    }
                    out.push(best.1);
                    argmax.push(best.0);
                }
            }
        }
    }
    let y = Tensor::from_vec(&[batch, ol, om, c], out)?;
    Ok((
        y,
        MaxPoolCache {
            input_shape: x.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn max_pool_backward<T: Scalar>(grad: &Tensor<T>, cache: &MaxPoolCache) -> Result<Tensor<T>> {
    if grad.len() != cache.argmax.len() {
        return Err(NnError::Shape(
            "pool gradient does not match cached forward".into(),
        ));
    }
    let mut dx = Tensor::zeros(&cache.input_shape)?;
    let d = dx.data_mut();
    for (&g, &idx) in grad.data().iter().zip(&cache.argmax) {
        d[idx] = d[idx] + g;
    }
    Ok(dx)
}

/// `[batch, L, M, C] -> [batch, C]` spatial mean.
pub fn global_avg_pool_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let &[batch, l, m, c] = x.shape() else {
        return Err(NnError::Shape(format!(
            "pool input must be [batch, L, M, C], got {:?}",
            x.shape()
        )));
    };
    let area = T::from_usize(l * m).expect("area fits");
    let mut out = vec![T::zero(); batch * c];
    for (i, chunk) in x.data().chunks_exact(l * m * c).enumerate() {
        for px in chunk.chunks_exact(c) {
            for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(px) {
                *o = *o + v;
            }
        }
    }
    for o in out.iter_mut() {
        *o = *o / area;
    }
    Ok(Tensor::from_vec(&[batch, c], out)?)
}

pub fn global_avg_pool_backward<T: Scalar>(
    grad: &Tensor<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    let &[batch, l, m, c] = input_shape else {
        return Err(NnError::Shape(format!(
            "bad pool input shape {input_shape:?}"
        )));
    };
    if grad.shape() != [batch, c] {
        return Err(NnError::Shape(format!(
            "pool gradient {:?} does not match [{batch}, {c}]",
            grad.shape()
        )));
    }
    let area = T::from_usize(l * m).expect("area fits");
    let mut out = Vec::with_capacity(batch * l * m * c);
    for g in grad.data().chunks_exact(c) {
        for _ in 0..l * m {
            out.extend(g.iter().map(|&v| v / area));
        }
    }
    Ok(Tensor::from_vec(input_shape, out)?)
}

/// Per-channel affine normalization over every axis but the last.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    /// Weight of the old running statistics in each update.
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNormParams<T> {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::full(&[channels], T::one())?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::full(&[channels], T::one())?,
            momentum,
            eps,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &Tensor<T>) -> Result<usize> {
        let c = *x.shape().last().expect("non-empty shape");
        if c != self.channels() || x.rank() < 2 {
            return Err(NnError::Shape(format!(
                "batchnorm over {} channels got input {:?}",
                self.channels(),
                x.shape()
            )));
        }
        Ok(c)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

/// Normalizes with batch statistics and folds them into the running averages.
pub fn batchnorm_forward_train<T: Scalar>(
    x: &Tensor<T>,
    params: &mut BatchNormParams<T>,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let c = params.check(x)?;
    let n = x.len() / c;
    let nt = T::from_usize(n).expect("count fits");
    let mut mean = vec![T::zero(); c];
    for px in x.data().chunks_exact(c) {
        for (s, &v) in mean.iter_mut().zip(px) {
            *s = *s + v;
        }
    }
    mean.iter_mut().for_each(|s| *s = *s / nt);
    let mut var = vec![T::zero(); c];
    for px in x.data().chunks_exact(c) {
        for ((s, &v), &mu) in var.iter_mut().zip(px).zip(&mean) {
            *s = *s + (v - mu) * (v - mu);
        }
    }
    var.iter_mut().for_each(|s| *s = *s / nt);
    let eps = T::lit(params.eps);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Vec::with_capacity(x.len());
    let mut y = Vec::with_capacity(x.len());
    let (gamma, beta) = (params.gamma.data(), params.beta.data());
    for px in x.data().chunks_exact(c) {
        for ch in 0..c {
            let h = (px[ch] - mean[ch]) * inv_std[ch];
            xhat.push(h);
            y.push(gamma[ch] * h + beta[ch]);
        }
    }
    let mom = T::lit(params.momentum);
    let keep = T::one() - mom;
    for (r, &m) in params.running_mean.data_mut().iter_mut().zip(&mean) {
        *r = mom * *r + keep * m;
    }
    for (r, &v) in params.running_var.data_mut().iter_mut().zip(&var) {
        *r = mom * *r + keep * v;
    }
    Ok((
        Tensor::from_vec(x.shape(), y)?,
        BatchNormCache { xhat, inv_std },
    ))
}

/// Normalizes with the running statistics.
pub fn batchnorm_forward_eval<T: Scalar>(
    x: &Tensor<T>,
    params: &BatchNormParams<T>,
) -> Result<Tensor<T>> {
    let c = params.check(x)?;
    let eps = T::lit(params.eps);
    let scale: Vec<T> = params
        .gamma
        .data()
        .iter()
        .zip(params.running_var.data())
        .map(|(&g, &v)| g / (v + eps).sqrt())
        .collect();
    let shift: Vec<T> = params
        .beta
        .data()
        .iter()
        .zip(params.running_mean.data())
        .zip(&scale)
        .map(|((&b, &m), &s)| b - m * s)
        .collect();
    let mut y = Vec::with_capacity(x.len());
    for px in x.data().chunks_exact(c) {
        for ch in 0..c {
            y.push(px[ch] * scale[ch] + shift[ch]);
        }
    }
    Ok(Tensor::from_vec(x.shape(), y)?)
}

/// Returns `(dx, dgamma, dbeta)` for a training-mode forward pass.
pub fn batchnorm_backward<T: Scalar>(
    grad: &Tensor<T>,
    cache: &BatchNormCache<T>,
    params: &BatchNormParams<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let c = params.check(grad)?;
    if grad.len() != cache.xhat.len() {
        return Err(NnError::Shape(
            "batchnorm gradient does not match cached forward".into(),
        ));
    }
    let n = grad.len() / c;
    let nt = T::from_usize(n).expect("count fits");
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (g, h) in grad.data().chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
        for ch in 0..c {
            dgamma[ch] = dgamma[ch] + g[ch] * h[ch];
            dbeta[ch] = dbeta[ch] + g[ch];
        }
    }
    let gamma = params.gamma.data();
    let mut dx = Vec::with_capacity(grad.len());
    for (g, h) in grad.data().chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
        for ch in 0..c {
            let v =
                gamma[ch] * cache.inv_std[ch] / nt * (nt * g[ch] - dbeta[ch] - h[ch] * dgamma[ch]);
            dx.push(v);
        }
    }
    Ok((
        Tensor::from_vec(grad.shape(), dx)?,
        Tensor::from_vec(&[c], dgamma)?,
        Tensor::from_vec(&[c], dbeta)?,
    ))
}
