use super::conv::{ConvGeometry, ConvPlan};
use super::{Activation, NnError, OpCount, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Convolution filters `w: [K, K, C, F]` and bias `b: [F]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassicalConvWeights<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> ClassicalConvWeights<T> {
    pub fn new(w: Tensor<T>, b: Tensor<T>) -> Result<Self> {
        let &[k1, k2, _c, f] = w.shape() else {
            return Err(NnError::Shape(format!(
                "conv weights must be [K, K, C, F], got {:?}",
                w.shape()
            )));
        };
        if k1 != k2 {
            return Err(NnError::Shape(format!("non-square kernel {k1}x{k2}")));
        }
        if b.shape() != [f] {
            return Err(NnError::Shape(format!(
                "bias {:?} does not match {f} filters",
                b.shape()
            )));
        }
        Ok(Self { w, b })
    }

    pub fn kernel(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.w.shape()[2]
    }

    pub fn filters(&self) -> usize {
        self.w.shape()[3]
    }
}

/// Fully-connected weights `w: [P, Q]` and bias `b: [Q]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassicalDenseWeights<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> ClassicalDenseWeights<T> {
    pub fn new(w: Tensor<T>, b: Tensor<T>) -> Result<Self> {
        let &[_p, q] = w.shape() else {
            return Err(NnError::Shape(format!(
                "dense weights must be [P, Q], got {:?}",
                w.shape()
            )));
        };
        if b.shape() != [q] {
            return Err(NnError::Shape(format!(
                "bias {:?} does not match {q} outputs",
                b.shape()
            )));
        }
        Ok(Self { w, b })
    }

    pub fn inputs(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.w.shape()[1]
    }
}

/// State kept by a classical forward pass for its backward pass.
#[derive(Debug, Clone)]
pub struct ClassicalCache<T> {
    pub(crate) plan: ConvPlan,
    pub(crate) padded: Vec<T>,
    pub(crate) act: Activation,
    pub(crate) output: Vec<T>,
    pub(crate) input_shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ClassicalGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub(crate) fn apply_activation<T: Scalar>(out: &mut [T], act: Activation) {
    if act == Activation::Relu {
        for v in out.iter_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
    }
}

/// Multiplies the upstream gradient by the activation derivative.
pub(crate) fn activation_grad<T: Scalar>(
    grad: &Tensor<T>,
    output: &[T],
    act: Activation,
) -> Vec<T> {
    match act {
        Activation::Identity => grad.data().to_vec(),
        Activation::Relu => grad
            .data()
            .iter()
            .zip(output)
            .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
            .collect(),
    }
}

fn forward_raw<T: Scalar>(
    plan: ConvPlan,
    x: &[T],
    w: &[T],
    bias: &[T],
    act: Activation,
    ops: &mut OpCount,
    input_shape: Vec<usize>,
) -> Result<(Vec<T>, ClassicalCache<T>)> {
    let filters = bias.len();
    let padded = plan.pad(x, T::zero());
    let kc = plan.k * plan.c;
    let mut out = vec![T::zero(); plan.batch * plan.out_l * plan.out_m * filters];
    for b in 0..plan.batch {
        for ol in 0..plan.out_l {
            for om in 0..plan.out_m {
                let o = ((b * plan.out_l + ol) * plan.out_m + om) * filters;
                let acc = &mut out[o..o + filters];
                acc.copy_from_slice(bias);
                plan.for_each_window_row(b, ol, om, |kh, base| {
                    for (kk, &xv) in padded[base..base + kc].iter().enumerate() {
                        let wrow = &w[(kh * kc + kk) * filters..][..filters];
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a = *a + xv * wv;
                        }
                    }
                });
                let n = (plan.fan_in() * filters) as u64;
                ops.mul += n;
                ops.add += n;
                ops.activation += filters as u64;
            }
        }
    }
    apply_activation(&mut out, act);
    let cache = ClassicalCache {
        plan,
        padded,
        act,
        output: out.clone(),
        input_shape,
    };
    Ok((out, cache))
}

fn backward_raw<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &ClassicalCache<T>,
    w: &[T],
    filters: usize,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let plan = cache.plan;
    if grad_out.len() != cache.output.len() {
        return Err(NnError::Shape(format!(
            "gradient has {} elements, forward output had {}",
            grad_out.len(),
            cache.output.len()
        )));
    }
    let g = activation_grad(grad_out, &cache.output, cache.act);
    let kc = plan.k * plan.c;
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); filters];
    let mut dxp = vec![T::zero(); cache.padded.len()];
    for b in 0..plan.batch {
        for ol in 0..plan.out_l {
            for om in 0..plan.out_m {
                let o = ((b * plan.out_l + ol) * plan.out_m + om) * filters;
                let gs = &g[o..o + filters];
                for (d, &gv) in db.iter_mut().zip(gs) {
                    *d = *d + gv;
                }
                plan.for_each_window_row(b, ol, om, |kh, base| {
                    for kk in 0..kc {
                        let xv = cache.padded[base + kk];
                        let widx = (kh * kc + kk) * filters;
                        let wrow = &w[widx..widx + filters];
                        let dwrow = &mut dw[widx..widx + filters];
                        let mut acc = T::zero();
                        for f in 0..filters {
                            dwrow[f] = dwrow[f] + xv * gs[f];
                            acc = acc + wrow[f] * gs[f];
                        }
                        dxp[base + kk] = dxp[base + kk] + acc;
                    }
                });
            }
        }
    }
    Ok((dxp, dw, db))
}

/// `act(conv(I, w) + b)`; counts `F K^2 C` multiplies and adds and one
/// activation per output position and filter.
pub fn classical_conv_forward<T: Scalar>(
    x: &Tensor<T>,
    weights: &ClassicalConvWeights<T>,
    geom: ConvGeometry,
    act: Activation,
    ops: &mut OpCount,
) -> Result<(Tensor<T>, ClassicalCache<T>)> {
    if geom.kernel != weights.kernel() {
        return Err(NnError::Shape(format!(
            "geometry kernel {} does not match weights kernel {}",
            geom.kernel,
            weights.kernel()
        )));
    }
    let plan = ConvPlan::new(&geom, x.shape())?;
    if plan.c != weights.channels() {
        return Err(NnError::Shape(format!(
            "input has {} channels, weights expect {}",
            plan.c,
            weights.channels()
        )));
    }
    let (out, cache) = forward_raw(
        plan,
        x.data(),
        weights.w.data(),
        weights.b.data(),
        act,
        ops,
        x.shape().to_vec(),
    )?;
    let y = Tensor::from_vec(
        &[plan.batch, plan.out_l, plan.out_m, weights.filters()],
        out,
    )?;
    Ok((y, cache))
}

pub fn classical_conv_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &ClassicalCache<T>,
    weights: &ClassicalConvWeights<T>,
) -> Result<ClassicalGrads<T>> {
    let (dxp, dw, db) = backward_raw(grad_out, cache, weights.w.data(), weights.filters())?;
    Ok(ClassicalGrads {
        dx: cache.plan.unpad(&dxp)?,
        dw: Tensor::from_vec(weights.w.shape(), dw)?,
        db: Tensor::from_vec(weights.b.shape(), db)?,
    })
}

/// Splits `[batch, ...]` into `(batch, P)`.
pub(crate) fn flat_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [] => Err(NnError::Shape("empty input shape".into())),
        [batch, rest @ ..] => Ok((*batch, rest.iter().product())),
    }
}

/// `act(x w + b)` over `[batch, ...]` inputs flattened to `[batch, P]`.
pub fn classical_dense_forward<T: Scalar>(
    x: &Tensor<T>,
    weights: &ClassicalDenseWeights<T>,
    act: Activation,
    ops: &mut OpCount,
) -> Result<(Tensor<T>, ClassicalCache<T>)> {
    let (batch, p) = flat_dims(x.shape())?;
    if p != weights.inputs() {
        return Err(NnError::Shape(format!(
            "input has {p} features, weights expect {}",
            weights.inputs()
        )));
    }
    let plan = ConvPlan::new(&ConvGeometry::pointwise(), &[batch, 1, 1, p])?;
    let (out, cache) = forward_raw(
        plan,
        x.data(),
        weights.w.data(),
        weights.b.data(),
        act,
        ops,
        x.shape().to_vec(),
    )?;
    Ok((Tensor::from_vec(&[batch, weights.outputs()], out)?, cache))
}

pub fn classical_dense_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &ClassicalCache<T>,
    weights: &ClassicalDenseWeights<T>,
) -> Result<ClassicalGrads<T>> {
    let (dxp, dw, db) = backward_raw(grad_out, cache, weights.w.data(), weights.outputs())?;
    Ok(ClassicalGrads {
        dx: Tensor::from_vec(&cache.input_shape, dxp)?,
        dw: Tensor::from_vec(weights.w.shape(), dw)?,
        db: Tensor::from_vec(weights.b.shape(), db)?,
    })
}
