//! Executable networks built from a [`NetworkSpec`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::conversion::convert_weights;
use crate::netspec::{LayerSpec, LinearKind, NetworkSpec, SpecError};
use crate::nn::{
    batchnorm_backward, batchnorm_forward_eval, batchnorm_forward_train, bm_backward,
    bm_conv_forward, bm_dense_forward, classical_conv_backward, classical_conv_forward,
    classical_dense_backward, classical_dense_forward, global_avg_pool_backward,
    global_avg_pool_forward, max_pool_backward, max_pool_forward, relu_backward, relu_forward,
    Activation, BatchNormCache, BatchNormParams, BmCache, BmWeights, ClassicalCache,
    ClassicalConvWeights, ClassicalDenseWeights, ConvGeometry, MathMode, MaxPoolCache, NnError,
    OpCount, Padding,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BATCHNORM_MOMENTUM: f64 = 0.9;
pub const BATCHNORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("unknown layer {0:?}")]
    UnknownLayer(String),
    #[error("layer {0:?} is not convertible")]
    NotConvertible(String),
    #[error("forward caches do not match the network structure")]
    CacheMismatch,
}

impl From<crate::tensor::TensorError> for NetworkError {
    fn from(e: crate::tensor::TensorError) -> Self {
        Self::Nn(e.into())
    }
}

pub type Result<T> = std::result::Result<T, NetworkError>;

/// Per-layer operation tallies from one inference pass, in execution order.
pub type LayerOps = Vec<(String, OpCount)>;

#[derive(Debug, Clone, PartialEq)]
pub enum LinearForm<T> {
    ClassicalConv(ClassicalConvWeights<T>),
    ClassicalDense(ClassicalDenseWeights<T>),
    Bm(BmWeights<T>),
}

/// A conv or fc layer in either classical or BM form.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearNode<T> {
    pub id: String,
    pub kind: LinearKind,
    pub geom: ConvGeometry,
    pub convertible: bool,
    pub form: LinearForm<T>,
    grads: Vec<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormNode<T> {
    pub id: String,
    pub params: BatchNormParams<T>,
    grads: Vec<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualNode<T> {
    pub id: String,
    pub pre: Vec<Node<T>>,
    pub body: Vec<Node<T>>,
    pub shortcut: Option<LinearNode<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node<T> {
    Linear(LinearNode<T>),
    Relu,
    BatchNorm(BatchNormNode<T>),
    MaxPool(usize),
    GlobalAvgPool,
    Residual(Box<ResidualNode<T>>),
    /// Marks the logits; softmax itself is applied by the loss and metrics.
    Softmax,
}

#[derive(Debug, Clone)]
enum NodeCache<T> {
    Classical(ClassicalCache<T>),
    Bm(BmCache<T>),
    Relu(Tensor<T>),
    BatchNorm(BatchNormCache<T>),
    MaxPool(MaxPoolCache),
    Gap(Vec<usize>),
    Pass,
    Residual {
        pre: Vec<NodeCache<T>>,
        body: Vec<NodeCache<T>>,
        shortcut: Option<Box<NodeCache<T>>>,
    },
}

/// Opaque record of a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape<T>(Vec<NodeCache<T>>);

fn he_normal<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Tensor<T>> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    Ok(Tensor::from_vec(shape, data)?)
}

impl<T: Scalar> LinearNode<T> {
    fn from_spec<R: Rng>(layer: &LayerSpec, rng: &mut R) -> Result<Self> {
        match layer {
            LayerSpec::Conv {
                id,
                filters,
                channels,
                kernel,
                stride,
                padding,
                convertible,
            } => {
                let shape = [*kernel, *kernel, *channels, *filters];
                let w = he_normal(&shape, kernel * kernel * channels, rng)?;
                let b = Tensor::zeros(&[*filters])?;
                Ok(Self::new(
                    id,
                    LinearKind::Conv,
                    ConvGeometry::new(*kernel, *stride, *padding),
                    *convertible,
                    LinearForm::ClassicalConv(ClassicalConvWeights::new(w, b)?),
                ))
            }
            LayerSpec::Fc {
                id,
                inputs,
                outputs,
                convertible,
            } => {
                let w = he_normal(&[*inputs, *outputs], *inputs, rng)?;
                let b = Tensor::zeros(&[*outputs])?;
                Ok(Self::new(
                    id,
                    LinearKind::Fc,
                    ConvGeometry::new(1, 1, Padding::Valid),
                    *convertible,
                    LinearForm::ClassicalDense(ClassicalDenseWeights::new(w, b)?),
                ))
            }
            other => Err(NetworkError::UnknownLayer(other.kind_name().into())),
        }
    }

    pub fn new(
        id: &str,
        kind: LinearKind,
        geom: ConvGeometry,
        convertible: bool,
        form: LinearForm<T>,
    ) -> Self {
        let mut node = Self {
            id: id.into(),
            kind,
            geom,
            convertible,
            form,
            grads: Vec::new(),
        };
        node.reset_grads();
        node
    }

    pub fn is_bm(&self) -> bool {
        matches!(self.form, LinearForm::Bm(_))
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        match &self.form {
            LinearForm::ClassicalConv(w) => vec![&w.w, &w.b],
            LinearForm::ClassicalDense(w) => vec![&w.w, &w.b],
            LinearForm::Bm(w) => vec![&w.vplus, &w.vminus, &w.v],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match &mut self.form {
            LinearForm::ClassicalConv(w) => vec![&mut w.w, &mut w.b],
            LinearForm::ClassicalDense(w) => vec![&mut w.w, &mut w.b],
            LinearForm::Bm(w) => vec![&mut w.vplus, &mut w.vminus, &mut w.v],
        }
    }

    pub(crate) fn reset_grads(&mut self) {
        self.grads = self
            .params()
            .iter()
            .map(|p| vec![T::zero(); p.len()])
            .collect();
    }

    /// Replaces classical weights by their sign-split log-domain form.
    pub fn convert(&mut self) -> Result<()> {
        let bm = match &self.form {
            LinearForm::ClassicalConv(w) => convert_weights(&w.w, &w.b)?,
            LinearForm::ClassicalDense(w) => convert_weights(&w.w, &w.b)?,
            LinearForm::Bm(_) => return Ok(()),
        };
        self.form = LinearForm::Bm(bm);
        self.reset_grads();
        Ok(())
    }

    fn forward(
        &self,
        x: &Tensor<T>,
        mode: MathMode,
        ops: &mut OpCount,
    ) -> Result<(Tensor<T>, NodeCache<T>)> {
        let act = Activation::Identity;
        Ok(match (&self.form, self.kind) {
            (LinearForm::ClassicalConv(w), _) => {
                let (y, c) = classical_conv_forward(x, w, self.geom, act, ops)?;
                (y, NodeCache::Classical(c))
            }
            (LinearForm::ClassicalDense(w), _) => {
                let (y, c) = classical_dense_forward(x, w, act, ops)?;
                (y, NodeCache::Classical(c))
            }
            (LinearForm::Bm(w), LinearKind::Conv) => {
                let (y, c) = bm_conv_forward(x, w, self.geom, act, mode, ops)?;
                (y, NodeCache::Bm(c))
            }
            (LinearForm::Bm(w), LinearKind::Fc) => {
                let (y, c) = bm_dense_forward(x, w, act, mode, ops)?;
                (y, NodeCache::Bm(c))
            }
        })
    }

    fn backward(&mut self, grad: &Tensor<T>, cache: &NodeCache<T>) -> Result<Tensor<T>> {
        let (dx, grads): (Tensor<T>, Vec<Tensor<T>>) = match (&self.form, cache) {
            (LinearForm::ClassicalConv(w), NodeCache::Classical(c)) => {
                let g = classical_conv_backward(grad, c, w)?;
                (g.dx, vec![g.dw, g.db])
            }
            (LinearForm::ClassicalDense(w), NodeCache::Classical(c)) => {
                let g = classical_dense_backward(grad, c, w)?;
                (g.dx, vec![g.dw, g.db])
            }
            (LinearForm::Bm(w), NodeCache::Bm(c)) => {
                let g = bm_backward(grad, c, w)?;
                (g.dx, vec![g.dvplus, g.dvminus, g.dv])
            }
            _ => return Err(NetworkError::CacheMismatch),
        };
        for (acc, g) in self.grads.iter_mut().zip(&grads) {
            for (a, &v) in acc.iter_mut().zip(g.data()) {
                *a = *a + v;
            }
        }
        Ok(dx)
    }
}

impl<T: Scalar> Node<T> {
    fn from_spec<R: Rng>(layer: &LayerSpec, rng: &mut R) -> Result<Self> {
        Ok(match layer {
            LayerSpec::Conv { .. } | LayerSpec::Fc { .. } => {
                Node::Linear(LinearNode::from_spec(layer, rng)?)
            }
            LayerSpec::Relu => Node::Relu,
            LayerSpec::BatchNorm { id, channels } => {
                let params = BatchNormParams::new(*channels, BATCHNORM_MOMENTUM, BATCHNORM_EPS)?;
                Node::BatchNorm(BatchNormNode {
                    id: id.clone(),
                    grads: vec![vec![T::zero(); *channels]; 2],
                    params,
                })
            }
            LayerSpec::MaxPool { size } => Node::MaxPool(*size),
            LayerSpec::GlobalAvgPool => Node::GlobalAvgPool,
            LayerSpec::Residual {
                id,
                pre,
                body,
                shortcut,
            } => {
                let pre = pre
                    .iter()
                    .map(|l| Node::from_spec(l, rng))
                    .collect::<Result<_>>()?;
                let body = body
                    .iter()
                    .map(|l| Node::from_spec(l, rng))
                    .collect::<Result<_>>()?;
                let shortcut = shortcut
                    .as_ref()
                    .map(|s| LinearNode::from_spec(s, rng))
                    .transpose()?;
                Node::Residual(Box::new(ResidualNode {
                    id: id.clone(),
                    pre,
                    body,
                    shortcut,
                }))
            }
            LayerSpec::Softmax => Node::Softmax,
        })
    }

    fn infer(&self, x: &Tensor<T>, mode: MathMode, ops: &mut LayerOps) -> Result<Tensor<T>> {
        Ok(match self {
            Node::Linear(l) => {
                let mut count = OpCount::default();
                let (y, _) = l.forward(x, mode, &mut count)?;
                ops.push((l.id.clone(), count));
                y
            }
            Node::Relu => relu_forward(x),
            Node::BatchNorm(bn) => batchnorm_forward_eval(x, &bn.params)?,
            Node::MaxPool(size) => max_pool_forward(x, *size)?.0,
            Node::GlobalAvgPool => global_avg_pool_forward(x)?,
            Node::Softmax => x.clone(),
            Node::Residual(r) => {
                let mut h = x.clone();
                for n in &r.pre {
                    h = n.infer(&h, mode, ops)?;
                }
                let mut body = h.clone();
                for n in &r.body {
                    body = n.infer(&body, mode, ops)?;
                }
                let short = match &r.shortcut {
                    Some(s) => {
                        let mut count = OpCount::default();
                        let (y, _) = s.forward(&h, mode, &mut count)?;
                        ops.push((s.id.clone(), count));
                        y
                    }
                    None => x.clone(),
                };
                body.add(&short)?
            }
        })
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, NodeCache<T>)> {
        let mut ops = OpCount::default();
        Ok(match self {
            Node::Linear(l) => l.forward(x, MathMode::Exact, &mut ops)?,
            Node::Relu => (relu_forward(x), NodeCache::Relu(x.clone())),
            Node::BatchNorm(bn) => {
                let (y, c) = batchnorm_forward_train(x, &mut bn.params)?;
                (y, NodeCache::BatchNorm(c))
            }
            Node::MaxPool(size) => {
                let (y, c) = max_pool_forward(x, *size)?;
                (y, NodeCache::MaxPool(c))
            }
            Node::GlobalAvgPool => (
                global_avg_pool_forward(x)?,
                NodeCache::Gap(x.shape().to_vec()),
            ),
            Node::Softmax => (x.clone(), NodeCache::Pass),
            Node::Residual(r) => {
                let mut h = x.clone();
                let mut pre = Vec::with_capacity(r.pre.len());
                for n in r.pre.iter_mut() {
                    let (y, c) = n.forward_train(&h)?;
                    pre.push(c);
                    h = y;
                }
                let mut out = h.clone();
                let mut body = Vec::with_capacity(r.body.len());
                for n in r.body.iter_mut() {
                    let (y, c) = n.forward_train(&out)?;
                    body.push(c);
                    out = y;
                }
                let (short, shortcut) = match &r.shortcut {
                    Some(s) => {
                        let (y, c) = s.forward(&h, MathMode::Exact, &mut ops)?;
                        (y, Some(Box::new(c)))
                    }
                    None => (x.clone(), None),
                };
                (
                    out.add(&short)?,
                    NodeCache::Residual {
                        pre,
                        body,
                        shortcut,
                    },
                )
            }
        })
    }

    fn backward(&mut self, grad: &Tensor<T>, cache: &NodeCache<T>) -> Result<Tensor<T>> {
        Ok(match (self, cache) {
            (Node::Linear(l), c) => l.backward(grad, c)?,
            (Node::Relu, NodeCache::Relu(input)) => relu_backward(grad, input)?,
            (Node::BatchNorm(bn), NodeCache::BatchNorm(c)) => {
                let (dx, dg, db) = batchnorm_backward(grad, c, &bn.params)?;
                for (acc, g) in bn.grads.iter_mut().zip([dg, db]) {
                    for (a, &v) in acc.iter_mut().zip(g.data()) {
                        *a = *a + v;
                    }
                }
                dx
            }
            (Node::MaxPool(_), NodeCache::MaxPool(c)) => max_pool_backward(grad, c)?,
            (Node::GlobalAvgPool, NodeCache::Gap(shape)) => global_avg_pool_backward(grad, shape)?,
            (Node::Softmax, NodeCache::Pass) => grad.clone(),
            (
                Node::Residual(r),
                NodeCache::Residual {
                    pre,
                    body,
                    shortcut,
                },
            ) => {
                let mut g = grad.clone();
                for (n, c) in r.body.iter_mut().zip(body).rev() {
                    g = n.backward(&g, c)?;
                }
                let dx_identity = match (&mut r.shortcut, shortcut) {
                    (Some(s), Some(c)) => {
                        g = g.add(&s.backward(grad, c)?)?;
                        None
                    }
                    (None, None) => Some(grad.clone()),
                    _ => return Err(NetworkError::CacheMismatch),
                };
                for (n, c) in r.pre.iter_mut().zip(pre).rev() {
                    g = n.backward(&g, c)?;
                }
                match dx_identity {
                    Some(d) => g.add(&d)?,
                    None => g,
                }
            }
            _ => return Err(NetworkError::CacheMismatch),
        })
    }

    fn visit_linear<'a>(&'a self, f: &mut dyn FnMut(&'a LinearNode<T>)) {
        match self {
            Node::Linear(l) => f(l),
            Node::Residual(r) => {
                r.pre.iter().for_each(|n| n.visit_linear(f));
                r.body.iter().for_each(|n| n.visit_linear(f));
                if let Some(s) = &r.shortcut {
                    f(s);
                }
            }
            _ => {}
        }
    }

    fn visit_linear_mut(&mut self, f: &mut dyn FnMut(&mut LinearNode<T>)) {
        match self {
            Node::Linear(l) => f(l),
            Node::Residual(r) => {
                r.pre.iter_mut().for_each(|n| n.visit_linear_mut(f));
                r.body.iter_mut().for_each(|n| n.visit_linear_mut(f));
                if let Some(s) = &mut r.shortcut {
                    f(s);
                }
            }
            _ => {}
        }
    }

    fn visit_param_nodes_mut(&mut self, f: &mut dyn FnMut(ParamNodeMut<'_, T>)) {
        match self {
            Node::Linear(l) => f(ParamNodeMut::Linear(l)),
            Node::BatchNorm(bn) => f(ParamNodeMut::BatchNorm(bn)),
            Node::Residual(r) => {
                r.pre.iter_mut().for_each(|n| n.visit_param_nodes_mut(f));
                r.body.iter_mut().for_each(|n| n.visit_param_nodes_mut(f));
                if let Some(s) = &mut r.shortcut {
                    f(ParamNodeMut::Linear(s));
                }
            }
            _ => {}
        }
    }

    fn visit_param_nodes<'a>(&'a self, f: &mut dyn FnMut(ParamNode<'a, T>)) {
        match self {
            Node::Linear(l) => f(ParamNode::Linear(l)),
            Node::BatchNorm(bn) => f(ParamNode::BatchNorm(bn)),
            Node::Residual(r) => {
                r.pre.iter().for_each(|n| n.visit_param_nodes(f));
                r.body.iter().for_each(|n| n.visit_param_nodes(f));
                if let Some(s) = &r.shortcut {
                    f(ParamNode::Linear(s));
                }
            }
            _ => {}
        }
    }
}

/// A node that owns trainable state, in execution order.
pub enum ParamNode<'a, T> {
    Linear(&'a LinearNode<T>),
    BatchNorm(&'a BatchNormNode<T>),
}

pub enum ParamNodeMut<'a, T> {
    Linear(&'a mut LinearNode<T>),
    BatchNorm(&'a mut BatchNormNode<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub spec: NetworkSpec,
    pub nodes: Vec<Node<T>>,
}

impl<T: Scalar> Network<T> {
    /// Builds a classical network with He-normal weights and zero biases.
    pub fn from_spec<R: Rng>(spec: &NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let nodes = spec
            .layers
            .iter()
            .map(|l| Node::from_spec(l, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: spec.clone(),
            nodes,
        })
    }

    /// [`Self::from_spec`] driven by a ChaCha8 stream seeded with `seed`.
    pub fn seeded(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        Self::from_spec(spec, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Shape `[batch, H, W, C]` expected by [`Self::infer`].
    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        let [h, w, c] = self.spec.input;
        [batch, h, w, c]
    }

    /// Logits for `x`, recording per-layer operation counts.
    pub fn infer_counted(
        &self,
        x: &Tensor<T>,
        mode: MathMode,
        ops: &mut LayerOps,
    ) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for n in &self.nodes {
            h = n.infer(&h, mode, ops)?;
        }
        Ok(h)
    }

    pub fn infer(&self, x: &Tensor<T>, mode: MathMode) -> Result<Tensor<T>> {
        self.infer_counted(x, mode, &mut Vec::new())
    }

    pub fn predict(&self, x: &Tensor<T>, mode: MathMode) -> Result<Vec<usize>> {
        Ok(self.infer(x, mode)?.argmax_axis(1)?)
    }

    /// Training-mode forward pass: batchnorm uses and updates batch
    /// statistics, and every layer records what its backward pass needs.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, ForwardTape<T>)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.nodes.len());
        for n in self.nodes.iter_mut() {
            let (y, c) = n.forward_train(&h)?;
            caches.push(c);
            h = y;
        }
        Ok((h, ForwardTape(caches)))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, grad: &Tensor<T>, tape: &ForwardTape<T>) -> Result<Tensor<T>> {
        if tape.0.len() != self.nodes.len() {
            return Err(NetworkError::CacheMismatch);
        }
        let mut g = grad.clone();
        for (n, c) in self.nodes.iter_mut().zip(&tape.0).rev() {
            g = n.backward(&g, c)?;
        }
        Ok(g)
    }

    pub fn zero_grads(&mut self) {
        self.visit_param_nodes_mut(&mut |node| match node {
            ParamNodeMut::Linear(l) => l.grads.iter_mut().for_each(|g| g.fill(T::zero())),
            ParamNodeMut::BatchNorm(bn) => bn.grads.iter_mut().for_each(|g| g.fill(T::zero())),
        });
    }

    /// Calls `f(param, grad)` for every trainable buffer in a fixed order.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [T], &[T])) {
        self.visit_param_nodes_mut(&mut |node| match node {
            ParamNodeMut::Linear(l) => {
                let grads = std::mem::take(&mut l.grads);
                for (p, g) in l.params_mut().into_iter().zip(&grads) {
                    f(p.data_mut(), g);
                }
                l.grads = grads;
            }
            ParamNodeMut::BatchNorm(bn) => {
                let [gg, gb] = [&bn.grads[0], &bn.grads[1]];
                f(bn.params.gamma.data_mut(), gg);
                f(bn.params.beta.data_mut(), gb);
            }
        });
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::new();
        self.visit_param_nodes(&mut |node| match node {
            ParamNode::Linear(l) => sizes.extend(l.params().iter().map(|p| p.len())),
            ParamNode::BatchNorm(bn) => sizes.extend([bn.params.gamma.len(), bn.params.beta.len()]),
        });
        sizes
    }

    pub fn visit_param_nodes<'a>(&'a self, f: &mut dyn FnMut(ParamNode<'a, T>)) {
        for n in &self.nodes {
            n.visit_param_nodes(f);
        }
    }

    pub fn visit_param_nodes_mut(&mut self, f: &mut dyn FnMut(ParamNodeMut<'_, T>)) {
        for n in self.nodes.iter_mut() {
            n.visit_param_nodes_mut(f);
        }
    }

    /// Conv and fc layers in execution order.
    pub fn linear_layers(&self) -> Vec<&LinearNode<T>> {
        let mut out = Vec::new();
        for n in &self.nodes {
            n.visit_linear(&mut |l| out.push(l));
        }
        out
    }

    pub fn linear(&self, id: &str) -> Option<&LinearNode<T>> {
        self.linear_layers().into_iter().find(|l| l.id == id)
    }

    pub fn with_linear_mut<R>(
        &mut self,
        id: &str,
        f: impl FnOnce(&mut LinearNode<T>) -> R,
    ) -> Result<R> {
        let mut f = Some(f);
        let mut out = None;
        for n in self.nodes.iter_mut() {
            n.visit_linear_mut(&mut |l| {
                if l.id == id {
                    if let Some(f) = f.take() {
                        out = Some(f(l));
                    }
                }
            });
        }
        out.ok_or_else(|| NetworkError::UnknownLayer(id.into()))
    }

    /// Converts one convertible layer to BM form in place.
    pub fn convert_layer(&mut self, id: &str) -> Result<()> {
        self.with_linear_mut(id, |l| {
            if !l.convertible {
                return Err(NetworkError::NotConvertible(l.id.clone()));
            }
            l.convert()
        })?
    }

    pub fn converted_ids(&self) -> Vec<String> {
        self.linear_layers()
            .into_iter()
            .filter(|l| l.is_bm())
            .map(|l| l.id.clone())
            .collect()
    }
}
