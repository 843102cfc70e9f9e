//! Bipolar morphological layers.
//!
//! A BM neuron replaces `sum_j w_j x_j` by four log-domain max-reductions
//!
//! ```text
//!   exp(max_j(ln x+_j + V+_j)) - exp(max_j(ln x+_j + V-_j))
//! - exp(max_j(ln x-_j + V+_j)) + exp(max_j(ln x-_j + V-_j)) + v
//! ```
//!
//! where `x+`/`x-` are the positive part and negated negative part of the
//! input. Every input is nonzero in at most one of `x+`, `x-`, so the kernel
//! walks the receptive field once and routes each log-magnitude to the two
//! terms of its sign path. Terms that receive no candidate evaluate to zero,
//! which is what `ln 0 = -inf` gives in the formula.

use super::classical::{activation_grad, apply_activation, flat_dims};
use super::conv::{ConvGeometry, ConvPlan};
use super::{Activation, MathMode, NnError, OpCount, Result, LOG_FLOOR_INPUT, NEG_SENTINEL};
use crate::approx::{exp_approx, ln_approx};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Signs with which the four terms enter the neuron output.
pub(crate) const TERM_SIGNS: [f64; 4] = [1.0, -1.0, -1.0, 1.0];
const NO_ARG: u32 = u32::MAX;

/// Log-domain weights `{V+, V-, v}` of a BM layer.
///
/// `vplus`/`vminus` have the shape of the classical weight they replace
/// (`[K, K, C, F]` or `[P, Q]`); `v` is the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct BmWeights<T> {
    pub vplus: Tensor<T>,
    pub vminus: Tensor<T>,
    pub v: Tensor<T>,
    pub neg_sentinel: T,
}

impl<T: Scalar> BmWeights<T> {
    pub fn new(vplus: Tensor<T>, vminus: Tensor<T>, v: Tensor<T>) -> Result<Self> {
        Self::with_sentinel(vplus, vminus, v, T::lit(NEG_SENTINEL))
    }

    pub fn with_sentinel(
        vplus: Tensor<T>,
        vminus: Tensor<T>,
        v: Tensor<T>,
        neg_sentinel: T,
    ) -> Result<Self> {
        if vplus.shape() != vminus.shape() {
            return Err(NnError::Shape(format!(
                "V+ {:?} and V- {:?} differ in shape",
                vplus.shape(),
                vminus.shape()
            )));
        }
        let outputs = *vplus.shape().last().expect("non-empty shape");
        if v.shape() != [outputs] {
            return Err(NnError::Shape(format!(
                "bias {:?} does not match {outputs} outputs",
                v.shape()
            )));
        }
        Ok(Self {
            vplus,
            vminus,
            v,
            neg_sentinel,
        })
    }

    pub fn outputs(&self) -> usize {
        self.v.len()
    }

    /// Number of weight slots feeding one output.
    pub fn fan_in(&self) -> usize {
        self.vplus.len() / self.outputs()
    }

    /// True when no index has both banks above the sentinel, as is the case
    /// right after sign-split conversion.
    pub fn is_sign_exclusive(&self) -> bool {
        let s = self.neg_sentinel;
        self.vplus
            .data()
            .iter()
            .zip(self.vminus.data())
            .all(|(&p, &m)| !(p > s && m > s))
    }
}

#[inline]
fn ln_abs<T: Scalar>(x: T, sentinel: T, mode: MathMode) -> T {
    let a = x.abs();
    match mode {
        MathMode::Exact => {
            if a == T::zero() || a < T::lit(LOG_FLOOR_INPUT) {
                sentinel
            } else {
                let l = a.ln();
                if l < sentinel {
                    sentinel
                } else {
                    l
                }
            }
        }
        MathMode::Approx => {
            let a32 = a.to_f32().unwrap_or(0.0);
            match ln_approx(a32) {
                Ok(l) => T::lit(f64::from(l)).max(sentinel),
                Err(_) => sentinel,
            }
        }
    }
}

#[inline]
fn exp_term<T: Scalar>(t: T, mode: MathMode) -> T {
    match mode {
        MathMode::Exact => t.exp(),
        MathMode::Approx => T::lit(f64::from(exp_approx(
            t.to_f32().unwrap_or(f32::NEG_INFINITY),
        ))),
    }
}

/// `ln|x|` with zeros (and magnitudes under the floor) mapped to `sentinel`,
/// plus the sign path of each entry (`true` for `x >= 0`). Counts one log per
/// input entry.
pub fn log_domain<T: Scalar>(
    x: &[T],
    sentinel: T,
    mode: MathMode,
    ops: &mut OpCount,
) -> (Vec<T>, Vec<bool>) {
    ops.log += x.len() as u64;
    let lx = x.iter().map(|&v| ln_abs(v, sentinel, mode)).collect();
    let pos = x.iter().map(|&v| v >= T::zero()).collect();
    (lx, pos)
}

/// State kept by a BM forward pass: argmax slot and `exp` value of each of
/// the four terms per output, plus the padded input for the `1/x` factor.
#[derive(Debug, Clone)]
pub struct BmCache<T> {
    pub(crate) plan: ConvPlan,
    pub(crate) padded: Vec<T>,
    pub(crate) act: Activation,
    pub(crate) output: Vec<T>,
    pub(crate) input_shape: Vec<usize>,
    pub(crate) exp_terms: Vec<T>,
    pub(crate) argmax: Vec<u32>,
}

impl<T: Scalar> BmCache<T> {
    /// The four `exp(max(...))` values per output, laid out `[..., F, 4]` in
    /// the order `(x+,V+), (x+,V-), (x-,V+), (x-,V-)`.
    pub fn exp_terms(&self) -> &[T] {
        &self.exp_terms
    }

    /// Receptive-field slot that won each max-reduction, `None` when the
    /// term received no candidate.
    pub fn argmax(&self) -> Vec<Option<usize>> {
        self.argmax
            .iter()
            .map(|&a| (a != NO_ARG).then_some(a as usize))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct BmGrads<T> {
    pub dx: Tensor<T>,
    pub dvplus: Tensor<T>,
    pub dvminus: Tensor<T>,
    pub dv: Tensor<T>,
}

#[allow(clippy::too_many_arguments)]
fn forward_raw<T: Scalar>(
    plan: ConvPlan,
    x: &[T],
    weights: &BmWeights<T>,
    act: Activation,
    mode: MathMode,
    ops: &mut OpCount,
    input_shape: Vec<usize>,
) -> (Vec<T>, BmCache<T>) {
    let sentinel = weights.neg_sentinel;
    let filters = weights.outputs();
    let vplus = weights.vplus.data();
    let vminus = weights.vminus.data();
    let bias = weights.v.data();
    let (lx, pos) = log_domain(x, sentinel, mode, ops);
    let lxp = plan.pad(&lx, sentinel);
    let posp = plan.pad(&pos, true);
    let padded = plan.pad(x, T::zero());
    let kc = plan.k * plan.c;
    let floor = sentinel + sentinel;
    let outputs = plan.batch * plan.out_l * plan.out_m;
    let mut out = vec![T::zero(); outputs * filters];
    let mut exp_terms = vec![T::zero(); outputs * filters * 4];
    let mut argmax = vec![NO_ARG; outputs * filters * 4];
    let mut acc = vec![T::neg_infinity(); filters * 4];
    // Winning slot per term, kept in the value type so the select vectorizes;
    // -1 marks a term without candidates.
    let none = -T::one();
    let mut arg = vec![none; filters * 4];
    for b in 0..plan.batch {
        for ol in 0..plan.out_l {
            for om in 0..plan.out_m {
                acc.fill(T::neg_infinity());
                arg.fill(none);
                plan.for_each_window_row(b, ol, om, |kh, base| {
                    for kk in 0..kc {
                        let j = kh * kc + kk;
                        ops.add += 2 * filters as u64;
                        if j > 0 {
                            ops.max += 2 * filters as u64;
                        }
                        let l = lxp[base + kk];
                        // exp(sentinel + v) is exactly 0, so zero inputs never change a term.
                        if l <= sentinel {
                            continue;
                        }
                        let (ta, tb) = if posp[base + kk] { (0, 1) } else { (2, 3) };
                        let jj = T::from_usize(j).expect("slot index fits");
                        let vp = &vplus[j * filters..(j + 1) * filters];
                        let vm = &vminus[j * filters..(j + 1) * filters];
                        for (bank, t) in [(vp, ta), (vm, tb)] {
                            let acc_t = &mut acc[t * filters..(t + 1) * filters];
                            let arg_t = &mut arg[t * filters..(t + 1) * filters];
                            for ((a, i), &v) in acc_t.iter_mut().zip(arg_t.iter_mut()).zip(bank) {
                                let cand = l + v;
                                let better = cand > *a;
                                *a = if better { cand } else { *a };
                                *i = if better { jj } else { *i };
                            }
                        }
                    }
                });
                let o = (b * plan.out_l + ol) * plan.out_m + om;
                for f in 0..filters {
                    let mut y = bias[f];
                    for t in 0..4 {
                        let slot = t * filters + f;
                        let won = arg[slot] >= T::zero();
                        let term = if !won { floor } else { acc[slot] };
                        let e = exp_term(term, mode);
                        exp_terms[(o * filters + f) * 4 + t] = e;
                        argmax[(o * filters + f) * 4 + t] = if won {
                            arg[slot].to_u32().expect("slot index fits")
                        } else {
                            NO_ARG
                        };
                        y = if TERM_SIGNS[t] > 0.0 { y + e } else { y - e };
                    }
                    out[o * filters + f] = y;
                }
                ops.exp += 4 * filters as u64;
                ops.add += 4 * filters as u64;
                ops.activation += filters as u64;
            }
        }
    }
    apply_activation(&mut out, act);
    let cache = BmCache {
        plan,
        padded,
        act,
        output: out.clone(),
        input_shape,
        exp_terms,
        argmax,
    };
    (out, cache)
}

/// BM convolution over NHWC input with `[K, K, C, F]` weight banks.
///
/// Per output position and filter this counts `4` exps, `2(K^2 C + 2)` adds,
/// `2(K^2 C - 1)` maxes and one activation; the input logs (`C L M` per
/// sample) are shared by all filters.
pub fn bm_conv_forward<T: Scalar>(
    x: &Tensor<T>,
    weights: &BmWeights<T>,
    geom: ConvGeometry,
    act: Activation,
    mode: MathMode,
    ops: &mut OpCount,
) -> Result<(Tensor<T>, BmCache<T>)> {
    let &[k1, k2, c, f] = weights.vplus.shape() else {
        return Err(NnError::Shape(format!(
            "BM conv weights must be [K, K, C, F], got {:?}",
            weights.vplus.shape()
        )));
    };
    if k1 != k2 || k1 != geom.kernel {
        return Err(NnError::Shape(format!(
            "kernel {k1}x{k2} does not match geometry {}",
            geom.kernel
        )));
    }
    let plan = ConvPlan::new(&geom, x.shape())?;
    if plan.c != c {
        return Err(NnError::Shape(format!(
            "input has {} channels, weights expect {c}",
            plan.c
        )));
    }
    let (out, cache) = forward_raw(plan, x.data(), weights, act, mode, ops, x.shape().to_vec());
    Ok((
        Tensor::from_vec(&[plan.batch, plan.out_l, plan.out_m, f], out)?,
        cache,
    ))
}

/// BM fully-connected layer on `[batch, ...]` inputs flattened to `[batch, P]`.
pub fn bm_dense_forward<T: Scalar>(
    x: &Tensor<T>,
    weights: &BmWeights<T>,
    act: Activation,
    mode: MathMode,
    ops: &mut OpCount,
) -> Result<(Tensor<T>, BmCache<T>)> {
    let &[p, q] = weights.vplus.shape() else {
        return Err(NnError::Shape(format!(
            "BM dense weights must be [P, Q], got {:?}",
            weights.vplus.shape()
        )));
    };
    let (batch, xp) = flat_dims(x.shape())?;
    if xp != p {
        return Err(NnError::Shape(format!(
            "input has {xp} features, weights expect {p}"
        )));
    }
    let plan = ConvPlan::new(&ConvGeometry::pointwise(), &[batch, 1, 1, p])?;
    let (out, cache) = forward_raw(plan, x.data(), weights, act, mode, ops, x.shape().to_vec());
    Ok((Tensor::from_vec(&[batch, q], out)?, cache))
}

/// Subgradient of a BM layer.
///
/// Each term passes `sign * grad * exp(term)` to the single weight slot and
/// input that won its max; the input additionally picks up the `1/x` factor
/// of `d ln|x| / dx`. Inputs that were zero (or padding) get no gradient.
pub fn bm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &BmCache<T>,
    weights: &BmWeights<T>,
) -> Result<BmGrads<T>> {
    let plan = cache.plan;
    let filters = weights.outputs();
    if grad_out.len() != cache.output.len() {
        return Err(NnError::Shape(format!(
            "gradient has {} elements, forward output had {}",
            grad_out.len(),
            cache.output.len()
        )));
    }
    if weights.fan_in() != plan.fan_in() {
        return Err(NnError::Shape(
            "weights do not match the cached forward pass".into(),
        ));
    }
    let g = activation_grad(grad_out, &cache.output, cache.act);
    let kc = plan.k * plan.c;
    let floor = T::lit(LOG_FLOOR_INPUT);
    let mut dvp = vec![T::zero(); weights.vplus.len()];
    let mut dvm = vec![T::zero(); weights.vminus.len()];
    let mut dv = vec![T::zero(); filters];
    let mut dxp = vec![T::zero(); cache.padded.len()];
    for b in 0..plan.batch {
        for ol in 0..plan.out_l {
            for om in 0..plan.out_m {
                let o = (b * plan.out_l + ol) * plan.out_m + om;
                for f in 0..filters {
                    let gv = g[o * filters + f];
                    dv[f] = dv[f] + gv;
                    if gv == T::zero() {
                        continue;
                    }
                    for (t, &sign) in TERM_SIGNS.iter().enumerate() {
                        let idx = (o * filters + f) * 4 + t;
                        let j = cache.argmax[idx];
                        if j == NO_ARG {
                            continue;
                        }
                        let j = j as usize;
                        let gt = T::lit(sign) * gv * cache.exp_terms[idx];
                        let bank = if t % 2 == 0 { &mut dvp } else { &mut dvm };
                        bank[j * filters + f] = bank[j * filters + f] + gt;
                        let (kh, kk) = (j / kc, j % kc);
                        let pidx =
                            plan.padded_offset(b, ol * plan.stride + kh, om * plan.stride) + kk;
                        let xv = cache.padded[pidx];
                        if xv.abs() >= floor {
                            dxp[pidx] = dxp[pidx] + gt / xv;
                        }
                    }
                }
            }
        }
    }
    let dx = plan.unpad(&dxp)?.reshape(&cache.input_shape)?;
    Ok(BmGrads {
        dx,
        dvplus: Tensor::from_vec(weights.vplus.shape(), dvp)?,
        dvminus: Tensor::from_vec(weights.vminus.shape(), dvm)?,
        dv: Tensor::from_vec(weights.v.shape(), dv)?,
    })
}
