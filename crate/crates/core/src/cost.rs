//! Closed-form operation counts and the gate/latency cost model.
//!
//! The standard and BM costs of one output value (one filter at one output
//! position) are weighted by per-operation gate and latency constants. The
//! four BM terms run on parallel paths, so one path pays for half of the adds
//! and maxes and a quarter of the exps; the input logs are shared by all
//! filters and cost `C / F` per output. Activations appear identically on
//! both sides and are left out.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netspec::{LinearKind, LinearLayerInfo, NetworkSpec, SpecError};
use crate::nn::OpCount;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("shape extents must be >= 1, got {0:?}")]
    Shape(ConvShape),
    #[error("converted prefix {k} exceeds the {convs} conv layers")]
    Prefix { k: usize, convs: usize },
    #[error(transparent)]
    Spec(#[from] SpecError),
}

pub type Result<T> = std::result::Result<T, CostError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpCost {
    pub gates: f64,
    /// Clock cycles.
    pub latency: f64,
}

/// Gates and latency per arithmetic unit. Defaults are single-precision
/// units synthesized at 65 nm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConstants {
    pub add: OpCost,
    pub max: OpCost,
    pub mul: OpCost,
    pub log: OpCost,
    pub exp: OpCost,
}

impl Default for GateConstants {
    fn default() -> Self {
        let c = |gates, latency| OpCost { gates, latency };
        Self {
            add: c(16048.0, 3.0),
            max: c(1464.0, 2.0),
            mul: c(35345.0, 4.0),
            log: c(154179.0, 35.0),
            exp: c(256965.0, 21.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Standard,
    Bm,
}

/// Geometry of a conv layer: `F` filters over `C` channels with a `K x K`
/// kernel and an `L x M` output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvShape {
    pub f: usize,
    pub c: usize,
    pub k: usize,
    pub l: usize,
    pub m: usize,
}

impl ConvShape {
    pub fn new(f: usize, c: usize, k: usize, l: usize, m: usize) -> Result<Self> {
        let s = Self { f, c, k, l, m };
        if [f, c, k, l, m].contains(&0) {
            return Err(CostError::Shape(s));
        }
        Ok(s)
    }

    /// An fc layer `P -> Q` as a `1 x 1` conv on a single position.
    pub fn fc(p: usize, q: usize) -> Result<Self> {
        Self::new(q, p, 1, 1, 1)
    }

    fn fan_in(&self) -> u64 {
        (self.k * self.k * self.c) as u64
    }

    fn volume(&self) -> u64 {
        (self.f * self.l * self.m) as u64
    }
}

pub fn opcount_conv(s: &ConvShape, model: Model) -> OpCount {
    let n = s.fan_in();
    let out = s.volume();
    match model {
        Model::Standard => OpCount {
            activation: out,
            add: n * out,
            mul: n * out,
            ..Default::default()
        },
        Model::Bm => OpCount {
            activation: out,
            exp: 4 * out,
            log: (s.c * s.l * s.m) as u64,
            add: 2 * (n + 2) * out,
            max: 2 * (n - 1) * out,
            mul: 0,
        },
    }
}

pub fn opcount_fc(p: usize, q: usize, model: Model) -> OpCount {
    let (p, q) = (p as u64, q as u64);
    match model {
        Model::Standard => OpCount {
            activation: q,
            add: q * p,
            mul: q * p,
            ..Default::default()
        },
        Model::Bm => OpCount {
            activation: q,
            exp: 4 * q,
            log: p,
            add: 2 * q * (p + 2),
            max: 2 * q * (p - 1),
            mul: 0,
        },
    }
}

/// Gate and latency cost of producing one output value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitCost {
    pub gates: f64,
    pub latency: f64,
}

fn weigh(n: f64, per_filter_logs: f64, g: &GateConstants, pick: fn(&OpCost) -> f64) -> (f64, f64) {
    let std = n * (pick(&g.mul) + pick(&g.add));
    let bm = (n + 2.0) * pick(&g.add)
        + (n - 1.0) * pick(&g.max)
        + pick(&g.exp)
        + per_filter_logs * pick(&g.log);
    (std, bm)
}

/// Per-output `(standard, BM)` costs for a layer with `fan_in` inputs per
/// output, `channels` logged inputs per position and `filters` outputs.
pub fn unit_costs(
    fan_in: usize,
    channels: usize,
    filters: usize,
    g: &GateConstants,
) -> (UnitCost, UnitCost) {
    let n = fan_in as f64;
    let logs = channels as f64 / filters as f64;
    let (gs, gb) = weigh(n, logs, g, |c| c.gates);
    let (ls, lb) = weigh(n, logs, g, |c| c.latency);
    (
        UnitCost {
            gates: gs,
            latency: ls,
        },
        UnitCost {
            gates: gb,
            latency: lb,
        },
    )
}

/// `(gate_ratio, latency_ratio)`, standard over BM, for a conv layer.
pub fn ratio_conv(f: usize, c: usize, k: usize, g: &GateConstants) -> (f64, f64) {
    let (s, b) = unit_costs(k * k * c, c, f, g);
    (s.gates / b.gates, s.latency / b.latency)
}

/// `(gate_ratio, latency_ratio)` for an fc layer `P -> Q`.
pub fn ratio_fc(p: usize, q: usize, g: &GateConstants) -> (f64, f64) {
    let (s, b) = unit_costs(p, p, q, g);
    (s.gates / b.gates, s.latency / b.latency)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer_id: String,
    pub kind: LinearKind,
    #[serde(rename = "F")]
    pub f: usize,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub ops_std: OpCount,
    pub ops_bm: OpCount,
    pub gates_std: f64,
    pub gates_bm: f64,
    pub gate_ratio: f64,
    pub latency_std: f64,
    pub latency_bm: f64,
    pub latency_ratio: f64,
    /// Whether this layer counts as BM in the totals.
    pub converted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub network: String,
    /// Number of leading conv layers counted in BM form.
    pub converted_prefix: usize,
    pub layers: Vec<LayerCost>,
    /// Gates of all conv layers with the first `converted_prefix` in BM form.
    pub conv_gates: f64,
    /// As `conv_gates`, over every conv and fc layer.
    pub total_gates: f64,
    pub conv_gates_std: f64,
    pub conv_gates_bm: f64,
    pub total_latency: f64,
}

pub const CSV_HEADER: &str =
    "layer_id,kind,F,C,K,L,M,gates_std,gates_bm,gate_ratio,latency_std,latency_bm,latency_ratio";

fn layer_cost(info: &LinearLayerInfo, converted: bool, g: &GateConstants) -> LayerCost {
    let (l, m) = (info.output_l, info.output_m);
    let (fan_in, ops_std, ops_bm) = match info.kind {
        LinearKind::Conv => {
            let s = ConvShape {
                f: info.filters,
                c: info.channels,
                k: info.kernel,
                l,
                m,
            };
            (
                s.fan_in() as usize,
                opcount_conv(&s, Model::Standard),
                opcount_conv(&s, Model::Bm),
            )
        }
        LinearKind::Fc => (
            info.channels,
            opcount_fc(info.channels, info.filters, Model::Standard),
            opcount_fc(info.channels, info.filters, Model::Bm),
        ),
    };
    let (s, b) = unit_costs(fan_in, info.channels, info.filters, g);
    let vol = (info.filters * l * m) as f64;
    LayerCost {
        layer_id: info.id.clone(),
        kind: info.kind,
        f: info.filters,
        c: info.channels,
        k: info.kernel,
        l,
        m,
        ops_std,
        ops_bm,
        gates_std: s.gates * vol,
        gates_bm: b.gates * vol,
        gate_ratio: s.gates / b.gates,
        latency_std: s.latency * vol,
        latency_bm: b.latency * vol,
        latency_ratio: s.latency / b.latency,
        converted,
    }
}

/// Costs every conv and fc layer of `spec` with the first `k` conv layers
/// in BM form.
pub fn network_gate_report(spec: &NetworkSpec, k: usize, g: &GateConstants) -> Result<CostReport> {
    let infos = spec.linear_layers()?;
    let convs = infos.iter().filter(|i| i.kind == LinearKind::Conv).count();
    if k > convs {
        return Err(CostError::Prefix { k, convs });
    }
    let mut seen = 0;
    let layers: Vec<LayerCost> = infos
        .iter()
        .map(|info| {
            let converted = info.kind == LinearKind::Conv && seen < k;
            if info.kind == LinearKind::Conv {
                seen += 1;
            }
            layer_cost(info, converted, g)
        })
        .collect();
    let used = |l: &LayerCost| if l.converted { l.gates_bm } else { l.gates_std };
    let conv = || layers.iter().filter(|l| l.kind == LinearKind::Conv);
    Ok(CostReport {
        network: spec.name.clone(),
        converted_prefix: k,
        conv_gates: conv().map(used).sum(),
        total_gates: layers.iter().map(used).sum(),
        conv_gates_std: conv().map(|l| l.gates_std).sum(),
        conv_gates_bm: conv().map(|l| l.gates_bm).sum(),
        total_latency: layers
            .iter()
            .map(|l| {
                if l.converted {
                    l.latency_bm
                } else {
                    l.latency_std
                }
            })
            .sum(),
        layers,
    })
}

/// Conv-layer gate totals for every prefix `k = 0..=convs`.
pub fn gate_sweep(spec: &NetworkSpec, g: &GateConstants) -> Result<Vec<(usize, f64)>> {
    let convs = spec.conv_count()?;
    (0..=convs)
        .map(|k| Ok((k, network_gate_report(spec, k, g)?.conv_gates)))
        .collect()
}

pub const SHAPES_FORMAT: &str = "bmnet-shapes-v1";

fn one() -> usize {
    1
}

/// A bare conv shape for tabulating ratios without a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeRow {
    pub id: String,
    #[serde(rename = "F")]
    pub f: usize,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "L", default = "one")]
    pub l: usize,
    #[serde(rename = "M", default = "one")]
    pub m: usize,
    /// Reference ratios to compare against, if known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_gate_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_latency_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeTable {
    pub format: String,
    pub name: String,
    pub rows: Vec<ShapeRow>,
}

impl ShapeTable {
    /// Costs every row as a standalone conv layer, all counted in BM form.
    pub fn report(&self, g: &GateConstants) -> Result<CostReport> {
        let mut layers = Vec::with_capacity(self.rows.len());
        for r in &self.rows {
            ConvShape::new(r.f, r.c, r.k, r.l, r.m)?;
            let info = LinearLayerInfo {
                id: r.id.clone(),
                kind: LinearKind::Conv,
                filters: r.f,
                channels: r.c,
                kernel: r.k,
                stride: 1,
                input_l: r.l,
                input_m: r.m,
                output_l: r.l,
                output_m: r.m,
                convertible: true,
            };
            layers.push(layer_cost(&info, true, g));
        }
        let std: f64 = layers.iter().map(|l| l.gates_std).sum();
        let bm: f64 = layers.iter().map(|l| l.gates_bm).sum();
        Ok(CostReport {
            network: self.name.clone(),
            converted_prefix: layers.len(),
            conv_gates: bm,
            total_gates: bm,
            conv_gates_std: std,
            conv_gates_bm: bm,
            total_latency: layers.iter().map(|l| l.latency_bm).sum(),
            layers,
        })
    }
}

impl CostReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for l in &self.layers {
            let kind = match l.kind {
                LinearKind::Conv => "conv",
                LinearKind::Fc => "fc",
            };
            out.push_str(&format!(
                "{},{kind},{},{},{},{},{},{},{},{:.6},{},{},{:.6}\n",
                l.layer_id,
                l.f,
                l.c,
                l.k,
                l.l,
                l.m,
                l.gates_std,
                l.gates_bm,
                l.gate_ratio,
                l.latency_std,
                l.latency_bm,
                l.latency_ratio
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::build_resnet22;

    #[test]
    fn closed_form_instantiation() {
        let s = ConvShape::new(16, 16, 3, 32, 32).unwrap();
        assert_eq!(opcount_conv(&s, Model::Standard).mul, 2_359_296);
        assert_eq!(opcount_conv(&s, Model::Bm).add, 4_784_128);
        let pointwise = ConvShape::new(8, 1, 1, 4, 4).unwrap();
        assert_eq!(opcount_conv(&pointwise, Model::Bm).max, 0);
        assert_eq!(opcount_fc(100, 10, Model::Bm).add, 2040);
        assert_eq!(opcount_fc(1, 1, Model::Bm).max, 0);
    }

    #[test]
    fn fc_ratio_matches_conv_ratio() {
        let g = GateConstants::default();
        assert_eq!(ratio_fc(16, 32, &g), ratio_conv(32, 16, 1, &g));
        assert!(ratio_fc(1, 1, &g).0 < 1.0);
        let limit = (g.mul.gates + g.add.gates) / (g.add.gates + g.max.gates);
        assert!((ratio_fc(1 << 20, 1 << 20, &g).0 - limit).abs() < 1e-3);
    }

    #[test]
    fn equal_mul_and_add_doubles_standard_cost() {
        let mut g = GateConstants::default();
        g.mul = g.add;
        let (s, _) = unit_costs(27, 3, 16, &g);
        assert_eq!(s.gates, 2.0 * 27.0 * g.add.gates);
    }

    #[test]
    fn prefix_out_of_range() {
        let spec = build_resnet22(10);
        assert!(matches!(
            network_gate_report(&spec, 23, &GateConstants::default()),
            Err(CostError::Prefix { k: 23, convs: 22 })
        ));
    }

    #[test]
    fn csv_has_fixed_columns() {
        let spec = build_resnet22(10);
        let csv = network_gate_report(&spec, 3, &GateConstants::default())
            .unwrap()
            .to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert!(lines.all(|l| l.split(',').count() == 13));
    }

    #[test]
    fn constants_override_from_partial_json() {
        let g: GateConstants =
            serde_json::from_str(r#"{"mul": {"gates": 1.0, "latency": 1.0}}"#).unwrap();
        assert_eq!(g.mul.gates, 1.0);
        assert_eq!(g.add, GateConstants::default().add);
    }
}
