//! The `bmnet-v1` weight file.
//!
//! A checkpoint is a JSON document holding the network spec and every
//! trainable or running buffer in execution order. Tensor payloads are
//! base64-encoded little-endian bytes so that save, load, save is
//! byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netspec::LinearKind;
use crate::netspec::NetworkSpec;
use crate::network::{LinearForm, Network, NetworkError, ParamNode, ParamNodeMut};
use crate::nn::{BmWeights, ClassicalConvWeights, ClassicalDenseWeights};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "bmnet-v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint format {0:?}")]
    Format(String),
    #[error("checkpoint holds {found} data, expected {expected}")]
    Dtype {
        found: String,
        expected: &'static str,
    },
    #[error("layer {id:?}: {message}")]
    Layer { id: String, message: String },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedTensor {
    pub shape: Vec<usize>,
    pub data: String,
}

impl EncodedTensor {
    pub fn encode<T: Scalar>(t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.len() * T::BYTES);
        t.data().iter().for_each(|&v| v.write_le(&mut bytes));
        Self {
            shape: t.shape().to_vec(),
            data: STANDARD.encode(bytes),
        }
    }

    pub fn decode<T: Scalar>(&self) -> std::result::Result<Tensor<T>, String> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| format!("base64: {e}"))?;
        let n: usize = self.shape.iter().product();
        if bytes.len() != n * T::BYTES {
            return Err(format!("{} bytes for shape {:?}", bytes.len(), self.shape));
        }
        let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        Tensor::from_vec(&self.shape, data).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryForm {
    Classical,
    Bm,
    BatchNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub id: String,
    pub form: EntryForm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neg_sentinel: Option<f64>,
    pub tensors: BTreeMap<String, EncodedTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub dtype: String,
    pub spec: NetworkSpec,
    pub params: Vec<ParamEntry>,
    /// Per-pixel training mean `[H, W, C]` subtracted from inputs, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_image: Option<EncodedTensor>,
}

impl Checkpoint {
    pub fn from_network<T: Scalar>(net: &Network<T>, mean_image: Option<&Tensor<T>>) -> Self {
        let mut params = Vec::new();
        net.visit_param_nodes(&mut |node| match node {
            ParamNode::Linear(l) => {
                let (form, neg_sentinel, tensors) = match &l.form {
                    LinearForm::ClassicalConv(w) => {
                        (EntryForm::Classical, None, vec![("w", &w.w), ("b", &w.b)])
                    }
                    LinearForm::ClassicalDense(w) => {
                        (EntryForm::Classical, None, vec![("w", &w.w), ("b", &w.b)])
                    }
                    LinearForm::Bm(w) => (
                        EntryForm::Bm,
                        Some(w.neg_sentinel.as_f64()),
                        vec![("vplus", &w.vplus), ("vminus", &w.vminus), ("v", &w.v)],
                    ),
                };
                params.push(ParamEntry {
                    id: l.id.clone(),
                    form,
                    neg_sentinel,
                    tensors: tensors
                        .into_iter()
                        .map(|(k, t)| (k.to_string(), EncodedTensor::encode(t)))
                        .collect(),
                });
            }
            ParamNode::BatchNorm(bn) => {
                let p = &bn.params;
                let tensors = [
                    ("gamma", &p.gamma),
                    ("beta", &p.beta),
                    ("running_mean", &p.running_mean),
                    ("running_var", &p.running_var),
                ];
                params.push(ParamEntry {
                    id: bn.id.clone(),
                    form: EntryForm::BatchNorm,
                    neg_sentinel: None,
                    tensors: tensors
                        .into_iter()
                        .map(|(k, t)| (k.to_string(), EncodedTensor::encode(t)))
                        .collect(),
                });
            }
        });
        Self {
            format: CHECKPOINT_FORMAT.into(),
            dtype: T::DTYPE.into(),
            spec: net.spec.clone(),
            params,
            mean_image: mean_image.map(EncodedTensor::encode),
        }
    }

    /// Rebuilds the network, checking every buffer against the spec.
    pub fn to_network<T: Scalar>(&self) -> Result<(Network<T>, Option<Tensor<T>>)> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::Format(self.format.clone()));
        }
        if self.dtype != T::DTYPE {
            return Err(CheckpointError::Dtype {
                found: self.dtype.clone(),
                expected: T::DTYPE,
            });
        }
        let mut net = Network::<T>::from_spec(&self.spec, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut entries = self.params.iter();
        let mut failure: Option<CheckpointError> = None;
        net.visit_param_nodes_mut(&mut |node| {
            if failure.is_some() {
                return;
            }
            let (id, result) = match node {
                ParamNodeMut::Linear(l) => {
                    (l.id.clone(), entries.next().map(|e| load_linear(l, e)))
                }
                ParamNodeMut::BatchNorm(bn) => (
                    bn.id.clone(),
                    entries.next().map(|e| load_bn(&mut bn.params, e)),
                ),
            };
            match result {
                None => failure = Some(layer_err(&id, "missing from checkpoint")),
                Some(Err(e)) => failure = Some(e),
                Some(Ok(())) => {}
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some(extra) = entries.next() {
            return Err(layer_err(&extra.id, "not present in the spec"));
        }
        let mean = match &self.mean_image {
            Some(m) => {
                let t: Tensor<T> = m.decode().map_err(|e| layer_err("mean_image", &e))?;
                if t.shape() != self.spec.input {
                    return Err(layer_err(
                        "mean_image",
                        &format!("shape {:?} vs input {:?}", t.shape(), self.spec.input),
                    ));
                }
                Some(t)
            }
            None => None,
        };
        Ok((net, mean))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_json())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn layer_err(id: &str, message: &str) -> CheckpointError {
    CheckpointError::Layer {
        id: id.into(),
        message: message.into(),
    }
}

fn take<T: Scalar>(entry: &ParamEntry, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
    let enc = entry
        .tensors
        .get(name)
        .ok_or_else(|| layer_err(&entry.id, &format!("missing tensor {name:?}")))?;
    let t: Tensor<T> = enc
        .decode()
        .map_err(|e| layer_err(&entry.id, &format!("{name}: {e}")))?;
    if t.shape() != shape {
        return Err(layer_err(
            &entry.id,
            &format!("{name} has shape {:?}, expected {shape:?}", t.shape()),
        ));
    }
    Ok(t)
}

fn load_linear<T: Scalar>(l: &mut crate::network::LinearNode<T>, e: &ParamEntry) -> Result<()> {
    if e.id != l.id {
        return Err(layer_err(
            &l.id,
            &format!("checkpoint has {:?} in its place", e.id),
        ));
    }
    let (wshape, bshape) = match &l.form {
        LinearForm::ClassicalConv(w) => (w.w.shape().to_vec(), w.b.shape().to_vec()),
        LinearForm::ClassicalDense(w) => (w.w.shape().to_vec(), w.b.shape().to_vec()),
        LinearForm::Bm(w) => (w.vplus.shape().to_vec(), w.v.shape().to_vec()),
    };
    let nn_err = |err: crate::nn::NnError| layer_err(&e.id, &err.to_string());
    l.form = match e.form {
        EntryForm::Classical => {
            let (w, b) = (take(e, "w", &wshape)?, take(e, "b", &bshape)?);
            match l.kind {
                LinearKind::Conv => {
                    LinearForm::ClassicalConv(ClassicalConvWeights::new(w, b).map_err(nn_err)?)
                }
                LinearKind::Fc => {
                    LinearForm::ClassicalDense(ClassicalDenseWeights::new(w, b).map_err(nn_err)?)
                }
            }
        }
        EntryForm::Bm => {
            let sentinel = T::lit(e.neg_sentinel.unwrap_or(crate::nn::NEG_SENTINEL));
            let w = BmWeights::with_sentinel(
                take(e, "vplus", &wshape)?,
                take(e, "vminus", &wshape)?,
                take(e, "v", &bshape)?,
                sentinel,
            )
            .map_err(nn_err)?;
            LinearForm::Bm(w)
        }
        EntryForm::BatchNorm => {
            return Err(layer_err(
                &e.id,
                "batch_norm entry where a linear layer was expected",
            ))
        }
    };
    l.reset_grads();
    Ok(())
}

fn load_bn<T: Scalar>(p: &mut crate::nn::BatchNormParams<T>, e: &ParamEntry) -> Result<()> {
    if e.form != EntryForm::BatchNorm {
        return Err(layer_err(&e.id, "expected a batch_norm entry"));
    }
    let shape = [p.channels()];
    p.gamma = take(e, "gamma", &shape)?;
    p.beta = take(e, "beta", &shape)?;
    p.running_mean = take(e, "running_mean", &shape)?;
    p.running_var = take(e, "running_var", &shape)?;
    Ok(())
}
