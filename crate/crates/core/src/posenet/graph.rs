use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsm::FsmConfig;
use crate::ops::activation::Activation;
use crate::ops::conv::ConvGeom;
use crate::ops::norm::NormKind;
use crate::ops::pool::PoolGeom;
use crate::param::ParamRole;
use crate::tensor::Shape4;

pub const GRAPH_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputSpec {
    pub fn shape(&self, batch: usize) -> Shape4 {
        Shape4::new(batch, self.channels, self.height, self.width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BottleneckConfig {
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// For group norm, `groups` is an upper bound clamped per channel count.
    pub norm: NormKind,
}

impl BottleneckConfig {
    /// Bottleneck with the usual `out / 4` middle width.
    pub fn new(in_channels: usize, out_channels: usize, stride: usize, norm: NormKind) -> Self {
        Self {
            in_channels,
            mid_channels: (out_channels / 4).max(1),
            out_channels,
            stride,
            norm,
        }
    }

    pub fn has_projection(&self) -> bool {
        self.in_channels != self.out_channels || self.stride != 1
    }

    pub fn conv1(&self) -> ConvGeom {
        ConvGeom::pointwise(self.in_channels, self.mid_channels)
    }

    pub fn conv2(&self) -> ConvGeom {
        ConvGeom {
            in_channels: self.mid_channels,
            out_channels: self.mid_channels,
            kernel: 3,
            stride: self.stride,
            pad: 1,
        }
    }

    pub fn conv3(&self) -> ConvGeom {
        ConvGeom::pointwise(self.mid_channels, self.out_channels)
    }

    pub fn projection(&self) -> ConvGeom {
        ConvGeom {
            stride: self.stride,
            ..ConvGeom::pointwise(self.in_channels, self.out_channels)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerKind {
    Conv {
        geom: ConvGeom,
        bias: bool,
        norm: Option<NormKind>,
        act: Option<Activation>,
    },
    MaxPool {
        geom: PoolGeom,
    },
    Fsm {
        config: FsmConfig,
    },
    Bottleneck {
        config: BottleneckConfig,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub id: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

/// Early stage predictor: a 1x1 convolution with bias from the output of
/// layer `from` to the keypoint channels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EspSpec {
    pub id: String,
    pub from: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkGraph {
    pub version: u32,
    pub input: InputSpec,
    /// Output channels of the last layer, one heatmap per keypoint.
    pub keypoints: usize,
    pub layers: Vec<Layer>,
    #[serde(default)]
    pub esps: Vec<EspSpec>,
    /// When set, an FSM may not directly follow a pooling or downsampling
    /// layer.
    #[serde(default)]
    pub placement_rule: bool,
}

/// One named parameter tensor a graph owns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    pub owner: String,
}

impl SlotSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Group count actually used for `channels`.
pub fn resolve_norm(kind: NormKind, channels: usize) -> NormKind {
    match kind {
        NormKind::Group { groups } => NormKind::Group {
            groups: groups.min(channels),
        },
        k => k,
    }
}

fn norm_slots(out: &mut Vec<SlotSpec>, owner: &str, prefix: &str, kind: NormKind, c: usize) {
    let mut put = |slot: &str, role| {
        out.push(SlotSpec {
            name: format!("{prefix}.{slot}"),
            shape: vec![c],
            role,
            owner: owner.to_string(),
        })
    };
    put("gamma", ParamRole::Weight);
    put("beta", ParamRole::Weight);
    if kind == NormKind::Batch {
        put("running_mean", ParamRole::Buffer);
        put("running_var", ParamRole::Buffer);
    }
}

fn conv_slots(out: &mut Vec<SlotSpec>, owner: &str, prefix: &str, g: &ConvGeom, bias: bool) {
    out.push(SlotSpec {
        name: format!("{prefix}.w"),
        shape: vec![g.out_channels, g.in_channels, g.kernel, g.kernel],
        role: ParamRole::Weight,
        owner: owner.to_string(),
    });
    if bias {
        out.push(SlotSpec {
            name: format!("{prefix}.b"),
            shape: vec![g.out_channels],
            role: ParamRole::Weight,
            owner: owner.to_string(),
        });
    }
}

impl LayerKind {
    pub fn out_shape(&self, s: Shape4) -> Result<Shape4> {
        match self {
            LayerKind::Conv { geom, norm, .. } => {
                if s.channels != geom.in_channels {
                    return Err(Error::dim("conv input channels", geom.in_channels, s.channels));
                }
                if let Some(n) = norm {
                    resolve_norm(*n, geom.out_channels).check(geom.out_channels)?;
                }
                check_extent(geom.kernel, geom.pad, s)?;
                Ok(geom.out_shape(s))
            }
            LayerKind::MaxPool { geom } => {
                check_extent(geom.kernel, geom.pad, s)?;
                Ok(geom.out_shape(s))
            }
            LayerKind::Fsm { config } => {
                if s.channels != config.channels {
                    return Err(Error::dim("FSM input channels", config.channels, s.channels));
                }
                Ok(s)
            }
            LayerKind::Bottleneck { config: b } => {
                if s.channels != b.in_channels {
                    return Err(Error::dim("bottleneck input channels", b.in_channels, s.channels));
                }
                if b.stride == 0 || b.mid_channels == 0 {
                    return Err(Error::Config("bottleneck stride and width must be positive".into()));
                }
                for c in [b.mid_channels, b.out_channels] {
                    resolve_norm(b.norm, c).check(c)?;
                }
                Ok(b.conv2().out_shape(s).with_channels(b.out_channels))
            }
        }
    }

    fn downsamples(&self) -> bool {
        match self {
            LayerKind::MaxPool { .. } => true,
            LayerKind::Bottleneck { config } => config.stride > 1,
            LayerKind::Conv { geom, .. } => geom.stride > 1,
            LayerKind::Fsm { .. } => false,
        }
    }
}

fn check_extent(kernel: usize, pad: usize, s: Shape4) -> Result<()> {
    if kernel == 0 || s.height + 2 * pad < kernel || s.width + 2 * pad < kernel {
        return Err(Error::Config(format!(
            "kernel {kernel} with padding {pad} does not fit a {}x{} map",
            s.height, s.width
        )));
    }
    Ok(())
}

impl NetworkGraph {
    pub fn new(input: InputSpec, keypoints: usize, layers: Vec<Layer>) -> Self {
        Self {
            version: GRAPH_VERSION,
            input,
            keypoints,
            layers,
            esps: Vec::new(),
            placement_rule: false,
        }
    }

    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn fsm_ids(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Fsm { .. }))
            .map(|l| l.id.clone())
            .collect()
    }

    /// Output shape of every layer for a batch of one.
    pub fn layer_shapes(&self) -> Result<Vec<Shape4>> {
        let mut s = self.input.shape(1);
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            s = l
                .kind
                .out_shape(s)
                .map_err(|e| Error::Config(format!("layer `{}`: {e}", l.id)))?;
            out.push(s);
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Shape4> {
        self.layer_shapes()?
            .last()
            .copied()
            .ok_or_else(|| Error::Config("graph has no layers".into()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != GRAPH_VERSION {
            return Err(Error::Config(format!(
                "graph version {} is not supported (expected {GRAPH_VERSION})",
                self.version
            )));
        }
        if self.input.channels == 0 || self.input.height == 0 || self.input.width == 0 {
            return Err(Error::Config("input dimensions must be positive".into()));
        }
        let mut ids = BTreeSet::new();
        for l in &self.layers {
            if !ids.insert(l.id.as_str()) {
                return Err(Error::Config(format!("duplicate layer id `{}`", l.id)));
            }
        }
        for e in &self.esps {
            if !ids.insert(e.id.as_str()) {
                return Err(Error::Config(format!("duplicate layer id `{}`", e.id)));
            }
            if self.layer_index(&e.from).is_none() {
                return Err(Error::Config(format!("ESP `{}` reads unknown layer `{}`", e.id, e.from)));
            }
        }
        let out = self.output_shape()?;
        if out.channels != self.keypoints {
            return Err(Error::dim("head output channels", self.keypoints, out.channels));
        }
        if self.placement_rule {
            for w in self.layers.windows(2) {
                if matches!(w[1].kind, LayerKind::Fsm { .. }) && w[0].kind.downsamples() {
                    return Err(Error::Config(format!(
                        "FSM `{}` directly follows downsampling layer `{}`",
                        w[1].id, w[0].id
                    )));
                }
            }
        }
        let mut names = BTreeSet::new();
        for s in self.param_slots()? {
            if !names.insert(s.name.clone()) {
                return Err(Error::Config(format!("parameter slot `{}` has two owners", s.name)));
            }
        }
        Ok(())
    }

    /// Every parameter tensor in creation order.
    pub fn param_slots(&self) -> Result<Vec<SlotSpec>> {
        let shapes = self.layer_shapes()?;
        let mut out = Vec::new();
        for l in &self.layers {
            let id = l.id.as_str();
            match &l.kind {
                LayerKind::Conv { geom, bias, norm, .. } => {
                    conv_slots(&mut out, id, id, geom, *bias);
                    if let Some(n) = norm {
                        norm_slots(&mut out, id, &format!("{id}.norm"), *n, geom.out_channels);
                    }
                }
                LayerKind::MaxPool { .. } => {}
                LayerKind::Fsm { config } => {
                    let (c, k) = (config.channels, config.shift_channels);
                    for (slot, shape, role) in [
                        ("w_alpha", vec![k, c], ParamRole::Weight),
                        ("w_beta", vec![c, k], ParamRole::Weight),
                        ("w_f", vec![k, c], ParamRole::Weight),
                        ("offsets", vec![k, 2], ParamRole::Offset),
                    ] {
                        out.push(SlotSpec {
                            name: format!("{id}.{slot}"),
                            shape,
                            role,
                            owner: id.to_string(),
                        });
                    }
                    norm_slots(&mut out, id, &format!("{id}.bn"), NormKind::Batch, c);
                }
                LayerKind::Bottleneck { config: b } => {
                    let convs = [("conv1", b.conv1()), ("conv2", b.conv2()), ("conv3", b.conv3())];
                    for (i, (name, g)) in convs.iter().enumerate() {
                        conv_slots(&mut out, id, &format!("{id}.{name}"), g, false);
                        let c = g.out_channels;
                        norm_slots(&mut out, id, &format!("{id}.norm{}", i + 1), resolve_norm(b.norm, c), c);
                    }
                    if b.has_projection() {
                        conv_slots(&mut out, id, &format!("{id}.proj"), &b.projection(), false);
                        let c = b.out_channels;
                        norm_slots(&mut out, id, &format!("{id}.proj_norm"), resolve_norm(b.norm, c), c);
                    }
                }
            }
        }
        for e in &self.esps {
            let i = self.layer_index(&e.from).expect("validated ESP source");
            let g = ConvGeom::pointwise(shapes[i].channels, self.keypoints);
            conv_slots(&mut out, &e.id, &e.id, &g, true);
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: Self = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }
}
