//! Declarative network descriptions.
//!
//! A [`NetworkSpec`] is an ordered list of [`LayerSpec`] entries plus the
//! input extent `[H, W, C]`. It is stored as JSON:
//!
//! ```json
//! {
//!   "format": "bmnet-spec-v1",
//!   "name": "lenet-like",
//!   "input": [28, 28, 1],
//!   "num_classes": 10,
//!   "layers": [
//!     { "kind": "conv", "id": "conv1", "filters": 16, "channels": 1, "kernel": 3 },
//!     { "kind": "relu" },
//!     { "kind": "max_pool", "size": 2 },
//!     { "kind": "fc", "id": "fc1", "inputs": 3136, "outputs": 10 },
//!     { "kind": "softmax" }
//!   ]
//! }
//! ```
//!
//! Residual blocks use pre-activation ordering: `pre` layers run first, the
//! `body` and the optional projection `shortcut` both read the pre-activated
//! tensor, and an absent shortcut adds the block input unchanged.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Padding;

pub const SPEC_FORMAT: &str = "bmnet-spec-v1";

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("cannot parse network spec: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported spec format {0:?}")]
    Format(String),
    #[error("layer {index} ({name}): {message}")]
    Layer {
        index: String,
        name: String,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SpecError>;

fn default_stride() -> usize {
    1
}

fn default_true() -> bool {
    true
}

fn is_one(v: &usize) -> bool {
    *v == 1
}

fn is_true(v: &bool) -> bool {
    *v
}

fn is_same(p: &Padding) -> bool {
    *p == Padding::Same
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        id: String,
        filters: usize,
        channels: usize,
        kernel: usize,
        #[serde(default = "default_stride", skip_serializing_if = "is_one")]
        stride: usize,
        #[serde(default, skip_serializing_if = "is_same")]
        padding: Padding,
        #[serde(default = "default_true", skip_serializing_if = "is_true")]
        convertible: bool,
    },
    Fc {
        id: String,
        inputs: usize,
        outputs: usize,
        #[serde(default = "default_true", skip_serializing_if = "is_true")]
        convertible: bool,
    },
    Relu,
    BatchNorm {
        id: String,
        channels: usize,
    },
    MaxPool {
        size: usize,
    },
    GlobalAvgPool,
    Residual {
        id: String,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        pre: Vec<LayerSpec>,
        body: Vec<LayerSpec>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        shortcut: Option<Box<LayerSpec>>,
    },
    Softmax,
}

impl LayerSpec {
    pub fn conv(id: &str, filters: usize, channels: usize, kernel: usize, stride: usize) -> Self {
        Self::Conv {
            id: id.into(),
            filters,
            channels,
            kernel,
            stride,
            padding: Padding::Same,
            convertible: true,
        }
    }

    pub fn fc(id: &str, inputs: usize, outputs: usize) -> Self {
        Self::Fc {
            id: id.into(),
            inputs,
            outputs,
            convertible: true,
        }
    }

    pub fn batch_norm(id: &str, channels: usize) -> Self {
        Self::BatchNorm {
            id: id.into(),
            channels,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Conv { .. } => "conv",
            Self::Fc { .. } => "fc",
            Self::Relu => "relu",
            Self::BatchNorm { .. } => "batch_norm",
            Self::MaxPool { .. } => "max_pool",
            Self::GlobalAvgPool => "global_avg_pool",
            Self::Residual { .. } => "residual",
            Self::Softmax => "softmax",
        }
    }

    pub fn id(&self) -> Option<&str> {
        match self {
            Self::Conv { id, .. }
            | Self::Fc { id, .. }
            | Self::BatchNorm { id, .. }
            | Self::Residual { id, .. } => Some(id),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearKind {
    Conv,
    Fc,
}

/// Shape summary of one conv or fc layer after shape inference.
///
/// For fc layers `channels` holds `P`, `filters` holds `Q`, and the kernel
/// and spatial extents are 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearLayerInfo {
    pub id: String,
    pub kind: LinearKind,
    pub filters: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub input_l: usize,
    pub input_m: usize,
    pub output_l: usize,
    pub output_m: usize,
    pub convertible: bool,
}

/// `[H, W, C]` for images, `[P]` after flattening.
type Extent = Vec<usize>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub format: String,
    pub name: String,
    pub input: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

struct Walker {
    linear: Vec<LinearLayerInfo>,
    params: usize,
}

fn layer_err(index: &str, layer: &LayerSpec, message: impl Into<String>) -> SpecError {
    SpecError::Layer {
        index: index.to_string(),
        name: layer
            .id()
            .map(str::to_string)
            .unwrap_or_else(|| layer.kind_name().to_string()),
        message: message.into(),
    }
}

fn spatial(index: &str, layer: &LayerSpec, shape: &Extent) -> Result<(usize, usize, usize)> {
    match shape.as_slice() {
        &[h, w, c] => Ok((h, w, c)),
        _ => Err(layer_err(
            index,
            layer,
            format!("expects an image input, got extent {shape:?}"),
        )),
    }
}

impl Walker {
    fn walk(&mut self, layers: &[LayerSpec], mut shape: Extent, prefix: &str) -> Result<Extent> {
        for (i, layer) in layers.iter().enumerate() {
            let index = if prefix.is_empty() {
                i.to_string()
            } else {
                format!("{prefix}.{i}")
            };
            shape = self.layer(layer, shape, &index)?;
        }
        Ok(shape)
    }

    fn layer(&mut self, layer: &LayerSpec, shape: Extent, index: &str) -> Result<Extent> {
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
                let (h, w, c) = spatial(index, layer, &shape)?;
                if c != *channels {
                    return Err(layer_err(
                        index,
                        layer,
                        format!("declares C={channels} but receives {c} channels"),
                    ));
                }
                if *filters == 0 || *kernel == 0 || *stride == 0 {
                    return Err(layer_err(
                        index,
                        layer,
                        "filters, kernel and stride must be at least 1",
                    ));
                }
                let geom = crate::nn::ConvGeometry::new(*kernel, *stride, *padding);
                let (oh, _, _) = geom
                    .axis(h)
                    .map_err(|e| layer_err(index, layer, e.to_string()))?;
                let (ow, _, _) = geom
                    .axis(w)
                    .map_err(|e| layer_err(index, layer, e.to_string()))?;
                self.params += kernel * kernel * channels * filters + filters;
                self.linear.push(LinearLayerInfo {
                    id: id.clone(),
                    kind: LinearKind::Conv,
                    filters: *filters,
                    channels: *channels,
                    kernel: *kernel,
                    stride: *stride,
                    input_l: h,
                    input_m: w,
                    output_l: oh,
                    output_m: ow,
                    convertible: *convertible,
                });
                Ok(vec![oh, ow, *filters])
            }
            LayerSpec::Fc {
                id,
                inputs,
                outputs,
                convertible,
            } => {
                let p: usize = shape.iter().product();
                if p != *inputs {
                    return Err(layer_err(
                        index,
                        layer,
                        format!("declares P={inputs} but receives {p} features"),
                    ));
                }
                if *outputs == 0 {
                    return Err(layer_err(index, layer, "outputs must be at least 1"));
                }
                self.params += inputs * outputs + outputs;
                self.linear.push(LinearLayerInfo {
                    id: id.clone(),
                    kind: LinearKind::Fc,
                    filters: *outputs,
                    channels: *inputs,
                    kernel: 1,
                    stride: 1,
                    input_l: 1,
                    input_m: 1,
                    output_l: 1,
                    output_m: 1,
                    convertible: *convertible,
                });
                Ok(vec![*outputs])
            }
            LayerSpec::Relu | LayerSpec::Softmax => Ok(shape),
            LayerSpec::BatchNorm { channels, .. } => {
                let c = *shape.last().expect("non-empty extent");
                if c != *channels {
                    return Err(layer_err(
                        index,
                        layer,
                        format!("declares {channels} channels but receives {c}"),
                    ));
                }
                self.params += 2 * channels;
                Ok(shape)
            }
            LayerSpec::MaxPool { size } => {
                let (h, w, c) = spatial(index, layer, &shape)?;
                if *size == 0 || h < *size || w < *size {
                    return Err(layer_err(
                        index,
                        layer,
                        format!("pool size {size} does not fit {h}x{w}"),
                    ));
                }
                Ok(vec![h / size, w / size, c])
            }
            LayerSpec::GlobalAvgPool => {
                let (_, _, c) = spatial(index, layer, &shape)?;
                Ok(vec![c])
            }
            LayerSpec::Residual {
                pre,
                body,
                shortcut,
                ..
            } => {
                let pre_out = self.walk(pre, shape.clone(), &format!("{index}.pre"))?;
                let body_out = self.walk(body, pre_out.clone(), &format!("{index}.body"))?;
                let short_out = match shortcut {
                    Some(s) => {
                        if !matches!(**s, LayerSpec::Conv { .. }) {
                            return Err(layer_err(
                                index,
                                layer,
                                "shortcut must be a conv projection",
                            ));
                        }
                        self.layer(s, pre_out, &format!("{index}.shortcut"))?
                    }
                    None => shape,
                };
                if body_out != short_out {
                    return Err(layer_err(
                        index,
                        layer,
                        format!("body output {body_out:?} does not match shortcut {short_out:?}"),
                    ));
                }
                Ok(body_out)
            }
        }
    }
}

impl NetworkSpec {
    pub fn new(name: &str, input: [usize; 3], num_classes: usize, layers: Vec<LayerSpec>) -> Self {
        Self {
            format: SPEC_FORMAT.into(),
            name: name.into(),
            input,
            num_classes,
            layers,
        }
    }

    fn walk(&self) -> Result<(Walker, Extent)> {
        if self.format != SPEC_FORMAT {
            return Err(SpecError::Format(self.format.clone()));
        }
        let mut walker = Walker {
            linear: Vec::new(),
            params: 0,
        };
        let out = walker.walk(&self.layers, self.input.to_vec(), "")?;
        Ok((walker, out))
    }

    /// Checks that shapes chain from input to output and ids are unique.
    pub fn validate(&self) -> Result<()> {
        let out = self.output_extent()?;
        if out != [self.num_classes] {
            return Err(SpecError::Layer {
                index: "output".into(),
                name: self.name.clone(),
                message: format!("network produces {out:?}, expected [{}]", self.num_classes),
            });
        }
        let mut ids = Vec::new();
        collect_ids(&self.layers, &mut ids);
        ids.sort();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(SpecError::Layer {
                index: "ids".into(),
                name: w[0].clone(),
                message: "duplicate layer id".into(),
            });
        }
        Ok(())
    }

    pub fn output_extent(&self) -> Result<Vec<usize>> {
        Ok(self.walk()?.1)
    }

    /// Every conv and fc layer in execution order.
    pub fn linear_layers(&self) -> Result<Vec<LinearLayerInfo>> {
        Ok(self.walk()?.0.linear)
    }

    /// The convertible subset of [`Self::linear_layers`], first to last.
    pub fn convertible_layers(&self) -> Result<Vec<LinearLayerInfo>> {
        Ok(self
            .linear_layers()?
            .into_iter()
            .filter(|l| l.convertible)
            .collect())
    }

    pub fn conv_count(&self) -> Result<usize> {
        Ok(self
            .linear_layers()?
            .iter()
            .filter(|l| l.kind == LinearKind::Conv)
            .count())
    }

    /// Trainable parameters (weights, biases, batchnorm scale and shift).
    pub fn parameter_count(&self) -> Result<usize> {
        Ok(self.walk()?.0.params)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Canonical pretty-printed JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("spec serializes");
        s.push('\n');
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

fn collect_ids(layers: &[LayerSpec], out: &mut Vec<String>) {
    for layer in layers {
        if let Some(id) = layer.id() {
            out.push(id.to_string());
        }
        if let LayerSpec::Residual {
            pre,
            body,
            shortcut,
            ..
        } = layer
        {
            collect_ids(pre, out);
            collect_ids(body, out);
            if let Some(s) = shortcut {
                collect_ids(std::slice::from_ref(s.as_ref()), out);
            }
        }
    }
}

/// Two 3x3 convolutions (16 and 32 filters) with ReLU and 2x2 max pooling,
/// followed by two fully-connected layers. Four convertible layers.
pub fn build_lenet_like(num_classes: usize) -> NetworkSpec {
    build_lenet_like_for([28, 28, 1], num_classes)
}

pub fn build_lenet_like_for(input: [usize; 3], num_classes: usize) -> NetworkSpec {
    let [h, w, c] = input;
    let flat = (h / 4) * (w / 4) * 32;
    NetworkSpec::new(
        "lenet-like",
        input,
        num_classes,
        vec![
            LayerSpec::conv("conv1", 16, c, 3, 1),
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::conv("conv2", 32, 16, 3, 1),
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::fc("fc1", flat, 64),
            LayerSpec::Relu,
            LayerSpec::fc("fc2", 64, num_classes),
            LayerSpec::Softmax,
        ],
    )
}

/// Pre-activation ResNet with 22 convolutions for 32x32x3 input: a 3x3 stem,
/// three stages of three residual blocks (16, 32, 64 filters; stages two and
/// three downsample with stride 2), a 1x1 projection shortcut on the first
/// block of every stage, then global average pooling and one fc layer.
pub fn build_resnet22(num_classes: usize) -> NetworkSpec {
    let mut layers = vec![LayerSpec::conv("conv0", 16, 3, 3, 1)];
    let mut channels = 16;
    for (stage, &filters) in [16usize, 32, 64].iter().enumerate() {
        for block in 0..3 {
            let first = block == 0;
            let stride = if first && stage > 0 { 2 } else { 1 };
            let tag = format!("s{}b{}", stage + 1, block + 1);
            let pre = vec![
                LayerSpec::batch_norm(&format!("{tag}_bn0"), channels),
                LayerSpec::Relu,
            ];
            let body = vec![
                LayerSpec::conv(&format!("{tag}_conv1"), filters, channels, 3, stride),
                LayerSpec::batch_norm(&format!("{tag}_bn1"), filters),
                LayerSpec::Relu,
                LayerSpec::conv(&format!("{tag}_conv2"), filters, filters, 3, 1),
            ];
            let shortcut = first.then(|| {
                Box::new(LayerSpec::conv(
                    &format!("{tag}_proj"),
                    filters,
                    channels,
                    1,
                    stride,
                ))
            });
            layers.push(LayerSpec::Residual {
                id: tag,
                pre,
                body,
                shortcut,
            });
            channels = filters;
        }
    }
    layers.extend([
        LayerSpec::batch_norm("final_bn", channels),
        LayerSpec::Relu,
        LayerSpec::GlobalAvgPool,
        LayerSpec::fc("fc", channels, num_classes),
        LayerSpec::Softmax,
    ]);
    NetworkSpec::new("resnet22", [32, 32, 3], num_classes, layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lenet_shapes() {
        let spec = build_lenet_like(10);
        spec.validate().unwrap();
        assert_eq!(spec.output_extent().unwrap(), vec![10]);
        assert_eq!(spec.convertible_layers().unwrap().len(), 4);
    }

    #[test]
    fn resnet22_counts() {
        let spec = build_resnet22(10);
        spec.validate().unwrap();
        assert_eq!(spec.conv_count().unwrap(), 22);
        assert_eq!(spec.output_extent().unwrap(), vec![10]);
        let layers = spec.linear_layers().unwrap();
        let last_conv = layers.iter().rfind(|l| l.kind == LinearKind::Conv).unwrap();
        assert_eq!((last_conv.output_l, last_conv.filters), (8, 64));
    }

    #[test]
    fn resnet22_parameter_count_by_hand() {
        // stem 3*3*3*16+16
        let mut expect = 3 * 3 * 3 * 16 + 16;
        let conv = |k: usize, c: usize, f: usize| k * k * c * f + f;
        let mut c = 16;
        for f in [16usize, 32, 64] {
            for block in 0..3 {
                expect += 2 * c; // bn0
                expect += conv(3, c, f) + 2 * f + conv(3, f, f);
                if block == 0 {
                    expect += conv(1, c, f);
                }
                c = f;
            }
        }
        expect += 2 * 64 + 64 * 10 + 10;
        assert_eq!(build_resnet22(10).parameter_count().unwrap(), expect);
    }

    #[test]
    fn round_trip_is_canonical() {
        for spec in [build_lenet_like(10), build_resnet22(10)] {
            let text = spec.to_json();
            let parsed = NetworkSpec::from_json(&text).unwrap();
            assert_eq!(parsed, spec);
            assert_eq!(parsed.to_json(), text);
        }
    }

    #[test]
    fn mismatched_channels_name_the_layer() {
        let mut spec = build_lenet_like(10);
        if let LayerSpec::Conv { channels, .. } = &mut spec.layers[3] {
            *channels = 8;
        }
        let err = spec.validate().unwrap_err().to_string();
        assert!(err.contains("conv2") && err.contains("layer 3"), "{err}");
    }

    #[test]
    fn unknown_kind_is_rejected() {
        let text = r#"{"format":"bmnet-spec-v1","name":"x","input":[4,4,1],"num_classes":2,
            "layers":[{"kind":"dropout"}]}"#;
        let err = NetworkSpec::from_json(text).unwrap_err().to_string();
        assert!(err.contains("dropout"), "{err}");
    }

    #[test]
    fn residual_shape_mismatch_detected() {
        let spec = NetworkSpec::new(
            "bad",
            [8, 8, 4],
            2,
            vec![
                LayerSpec::Residual {
                    id: "r".into(),
                    pre: vec![],
                    body: vec![LayerSpec::conv("c", 8, 4, 3, 1)],
                    shortcut: None,
                },
                LayerSpec::GlobalAvgPool,
                LayerSpec::fc("fc", 8, 2),
            ],
        );
        assert!(spec
            .validate()
            .unwrap_err()
            .to_string()
            .contains("shortcut"));
    }
}
