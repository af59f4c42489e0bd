use crate::error::{Error, Result};
use crate::fsm::{CaVariant, FsmConfig};
use crate::ops::activation::Activation;
use crate::ops::conv::ConvGeom;
use crate::ops::norm::{NormKind, DEFAULT_GROUPS};
use crate::ops::pool::PoolGeom;

use super::graph::{resolve_norm, BottleneckConfig, EspSpec, InputSpec, Layer, LayerKind, NetworkGraph};

const GN: NormKind = NormKind::Group { groups: DEFAULT_GROUPS };

fn layer(id: &str, kind: LayerKind) -> Layer {
    Layer { id: id.to_string(), kind }
}

fn conv(cin: usize, cout: usize, kernel: usize, stride: usize, norm: Option<NormKind>, act: Option<Activation>) -> LayerKind {
    LayerKind::Conv {
        geom: ConvGeom {
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            pad: kernel / 2,
        },
        bias: false,
        norm: norm.map(|n| resolve_norm(n, cout)),
        act,
    }
}

fn fsm(channels: usize, shift_channels: usize, ca_variant: CaVariant) -> LayerKind {
    LayerKind::Fsm {
        config: FsmConfig {
            channels,
            shift_channels,
            ca_variant,
        },
    }
}

/// The three-block network: a strided 7x7 stem, a 3x3/2 max pool, three
/// FSM + Bottleneck pairs at 256 channels, and a two-layer head producing
/// `keypoints` heatmaps at a quarter of the input resolution.
pub fn build_3block3fsm(
    height: usize,
    width: usize,
    shift_channels: usize,
    keypoints: usize,
    ca_variant: CaVariant,
) -> Result<NetworkGraph> {
    if height % 4 != 0 || width % 4 != 0 || height == 0 || width == 0 {
        return Err(Error::Config(format!(
            "input size {height}x{width} must be a positive multiple of 4"
        )));
    }
    if shift_channels == 0 || keypoints == 0 {
        return Err(Error::Config("shift channels and keypoints must be positive".into()));
    }
    let relu = Some(Activation::Relu);
    let mut layers = vec![
        layer("stem", conv(3, 64, 7, 2, Some(GN), relu)),
        layer(
            "pool",
            LayerKind::MaxPool {
                geom: PoolGeom {
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                },
            },
        ),
    ];
    let mut c = 64;
    for i in 1..=3 {
        layers.push(layer(&format!("fsm{i}"), fsm(c, shift_channels, ca_variant)));
        layers.push(layer(
            &format!("block{i}"),
            LayerKind::Bottleneck {
                config: BottleneckConfig::new(c, 256, 1, GN),
            },
        ));
        c = 256;
    }
    layers.push(layer("head_conv", conv(256, 256, 1, 1, Some(GN), relu)));
    layers.push(layer("head", conv(256, keypoints, 3, 1, Some(NormKind::Batch), None)));
    let graph = NetworkGraph::new(
        InputSpec {
            channels: 3,
            height,
            width,
        },
        keypoints,
        layers,
    );
    graph.validate()?;
    Ok(graph)
}

/// Backbone of a ResNet-50 style network with an FSM after every block
/// that keeps its resolution, and a 1x1 keypoint head on the last stage.
/// The first stage's FSMs use half of `shift_channels`.
pub fn build_resnet50_fsm(
    height: usize,
    width: usize,
    shift_channels: usize,
    keypoints: usize,
    ca_variant: CaVariant,
) -> Result<NetworkGraph> {
    if height % 32 != 0 || width % 32 != 0 || height == 0 || width == 0 {
        return Err(Error::Config(format!(
            "input size {height}x{width} must be a positive multiple of 32"
        )));
    }
    let relu = Some(Activation::Relu);
    let mut layers = vec![
        layer("stem", conv(3, 64, 7, 2, Some(GN), relu)),
        layer(
            "pool",
            LayerKind::MaxPool {
                geom: PoolGeom {
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                },
            },
        ),
    ];
    let mut c = 64;
    for (stage, (blocks, width_out)) in [(3, 256), (4, 512), (6, 1024), (3, 2048)].into_iter().enumerate() {
        let k = if stage == 0 { (shift_channels / 2).max(1) } else { shift_channels };
        for b in 0..blocks {
            let stride = if b == 0 && stage > 0 { 2 } else { 1 };
            layers.push(layer(
                &format!("s{}b{}", stage + 1, b + 1),
                LayerKind::Bottleneck {
                    config: BottleneckConfig::new(c, width_out, stride, GN),
                },
            ));
            c = width_out;
            if stride == 1 {
                layers.push(layer(&format!("s{}fsm{}", stage + 1, b + 1), fsm(c, k, ca_variant)));
            }
        }
    }
    layers.push(layer("head", conv(c, keypoints, 1, 1, None, None)));
    let mut graph = NetworkGraph::new(
        InputSpec {
            channels: 3,
            height,
            width,
        },
        keypoints,
        layers,
    );
    graph.placement_rule = true;
    graph.validate()?;
    Ok(graph)
}

/// Small network for desk-scale experiments:
/// `conv3x3-GN-ReLU, (FSM, conv3x3-GN-ReLU) x fsms, conv1x1 head`, all at
/// full resolution.
pub fn build_tiny_fsm_net(
    input: InputSpec,
    channels: usize,
    shift_channels: usize,
    fsms: usize,
    keypoints: usize,
    ca_variant: CaVariant,
) -> Result<NetworkGraph> {
    let relu = Some(Activation::Relu);
    let mut layers = vec![layer("stem", conv(input.channels, channels, 3, 1, Some(GN), relu))];
    for i in 1..=fsms {
        layers.push(layer(&format!("fsm{i}"), fsm(channels, shift_channels, ca_variant)));
        layers.push(layer(&format!("conv{i}"), conv(channels, channels, 3, 1, Some(GN), relu)));
    }
    layers.push(layer(
        "head",
        LayerKind::Conv {
            geom: ConvGeom::pointwise(channels, keypoints),
            bias: true,
            norm: None,
            act: None,
        },
    ));
    let graph = NetworkGraph::new(input, keypoints, layers);
    graph.validate()?;
    Ok(graph)
}

/// One FSM followed by a 1x1 head with bias that maps back to the input
/// channels.
pub fn build_shift_probe_net(input: InputSpec, shift_channels: usize, ca_variant: CaVariant) -> Result<NetworkGraph> {
    let layers = vec![
        layer("fsm1", fsm(input.channels, shift_channels, ca_variant)),
        layer(
            "head",
            LayerKind::Conv {
                geom: ConvGeom::pointwise(input.channels, input.channels),
                bias: true,
                norm: None,
                act: None,
            },
        ),
    ];
    let graph = NetworkGraph::new(input, input.channels, layers);
    graph.validate()?;
    Ok(graph)
}

/// Adds an early stage predictor reading the output of `after_layer`.
pub fn attach_esp(mut graph: NetworkGraph, after_layer: &str) -> Result<NetworkGraph> {
    if graph.layer_index(after_layer).is_none() {
        return Err(Error::Config(format!("unknown layer `{after_layer}` for ESP")));
    }
    let id = format!("esp{}", graph.esps.len() + 1);
    graph.esps.push(EspSpec {
        id,
        from: after_layer.to_string(),
    });
    graph.validate()?;
    Ok(graph)
}
