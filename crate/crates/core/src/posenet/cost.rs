//! Parameter and FLOP accounting over a graph description.
//!
//! Elementwise work (normalization, activation, residual add, gating) costs
//! the same under both conventions: 2 ops per element for normalization and
//! activation, 1 for an add or a gating multiply. Max pooling costs one
//! comparison per window element.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ops::conv::ConvGeom;
use crate::param::ParamRole;
use crate::tensor::Shape4;

use super::graph::{LayerKind, NetworkGraph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FlopConvention {
    /// A multiply-accumulate counts once; a bilinear shift costs its 4
    /// multiply-accumulates per output value.
    #[default]
    Mac,
    /// A multiply-accumulate counts as two ops; a bilinear shift costs
    /// 4 multiplies and 3 adds per output value.
    TwoOpMac,
}

impl FlopConvention {
    fn mac(self) -> u64 {
        match self {
            FlopConvention::Mac => 1,
            FlopConvention::TwoOpMac => 2,
        }
    }

    fn shift(self) -> u64 {
        match self {
            FlopConvention::Mac => 4,
            FlopConvention::TwoOpMac => 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    pub id: String,
    pub params: u64,
    pub flops: u64,
}

/// Trainable parameters of the whole graph (running statistics excluded).
pub fn count_params(graph: &NetworkGraph) -> Result<u64> {
    Ok(layer_costs(graph, FlopConvention::Mac)?.iter().map(|c| c.params).sum())
}

pub fn count_flops(graph: &NetworkGraph, convention: FlopConvention) -> Result<u64> {
    Ok(layer_costs(graph, convention)?.iter().map(|c| c.flops).sum())
}

fn conv_flops(g: &ConvGeom, out: Shape4, cv: FlopConvention) -> u64 {
    let macs = (g.out_channels * g.in_channels * g.kernel * g.kernel * out.height * out.width) as u64;
    macs * cv.mac()
}

fn elems(s: Shape4) -> u64 {
    (s.channels * s.height * s.width) as u64
}

/// Per-layer costs for a single input at the graph's input resolution.
pub fn layer_costs(graph: &NetworkGraph, cv: FlopConvention) -> Result<Vec<LayerCost>> {
    let shapes = graph.layer_shapes()?;
    let slots = graph.param_slots()?;
    let params_of = |owner: &str| -> u64 {
        slots
            .iter()
            .filter(|s| s.owner == owner && s.role != ParamRole::Buffer)
            .map(|s| s.numel() as u64)
            .sum()
    };
    let mut out = Vec::new();
    let mut prev = graph.input.shape(1);
    for (l, &s) in graph.layers.iter().zip(&shapes) {
        let flops = match &l.kind {
            LayerKind::Conv { geom, bias, norm, act } => {
                let mut f = conv_flops(geom, s, cv);
                if *bias {
                    f += elems(s);
                }
                if norm.is_some() {
                    f += 2 * elems(s);
                }
                if act.is_some() {
                    f += 2 * elems(s);
                }
                f
            }
            LayerKind::MaxPool { geom } => elems(s) * (geom.kernel * geom.kernel) as u64,
            LayerKind::Fsm { config } => {
                let (c, k) = (config.channels, config.shift_channels);
                let px = (s.height * s.width) as u64;
                let pointwise = 3 * (k * c) as u64 * px * cv.mac();
                let shifting = cv.shift() * k as u64 * px;
                let attention = 2 * k as u64 * px + if config.ca_variant.normalized() { 2 * k as u64 * px } else { 0 };
                let gating = k as u64 * px;
                let residual_norm_act = (1 + 2 + 2) * elems(s);
                pointwise + shifting + attention + gating + residual_norm_act
            }
            LayerKind::Bottleneck { config: b } => {
                let mid1 = b.conv1().out_shape(prev);
                let mid2 = b.conv2().out_shape(mid1);
                let mut f = conv_flops(&b.conv1(), mid1, cv) + 4 * elems(mid1);
                f += conv_flops(&b.conv2(), mid2, cv) + 4 * elems(mid2);
                f += conv_flops(&b.conv3(), s, cv) + 2 * elems(s);
                if b.has_projection() {
                    f += conv_flops(&b.projection(), s, cv) + 2 * elems(s);
                }
                f + 3 * elems(s)
            }
        };
        out.push(LayerCost {
            id: l.id.clone(),
            params: params_of(&l.id),
            flops,
        });
        prev = s;
    }
    for e in &graph.esps {
        let i = graph.layer_index(&e.from).expect("validated ESP source");
        let src = shapes[i];
        let g = ConvGeom::pointwise(src.channels, graph.keypoints);
        let os = g.out_shape(src);
        out.push(LayerCost {
            id: e.id.clone(),
            params: params_of(&e.id),
            flops: conv_flops(&g, os, cv) + elems(os),
        });
    }
    Ok(out)
}
