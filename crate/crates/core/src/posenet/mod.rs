//! Pose network construction, accounting and evaluation.

pub mod build;
pub mod cost;
pub mod graph;
pub mod model;

pub use build::{attach_esp, build_3block3fsm, build_resnet50_fsm, build_shift_probe_net, build_tiny_fsm_net};
pub use cost::{count_flops, count_params, layer_costs, FlopConvention, LayerCost};
pub use graph::{BottleneckConfig, EspSpec, InputSpec, Layer, LayerKind, NetworkGraph, SlotSpec, GRAPH_VERSION};
pub use model::{bottleneck_forward, Model, Trace};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::fsm::CaVariant;
    use crate::ops::norm::Mode;
    use crate::tensor::{Shape4, Tensor4};

    #[test]
    fn three_block_network_shapes_and_counts() {
        let g = build_3block3fsm(256, 192, 256, 17, CaVariant::SigmoidUnnormalized).unwrap();
        let out = g.output_shape().unwrap();
        assert_eq!((out.channels, out.height, out.width), (17, 64, 48));
        assert_eq!(count_params(&g).unwrap(), 775_650);
        let g512 = build_3block3fsm(256, 192, 512, 17, CaVariant::SigmoidUnnormalized).unwrap();
        assert_eq!(count_params(&g512).unwrap(), 1_219_554);
    }

    #[test]
    fn indivisible_input_rejected() {
        assert!(build_3block3fsm(30, 32, 8, 1, CaVariant::default()).is_err());
    }

    #[test]
    fn tiny_output_shape() {
        let g = build_3block3fsm(32, 32, 8, 1, CaVariant::SigmoidUnnormalized).unwrap();
        let out = g.output_shape().unwrap();
        assert_eq!((out.channels, out.height, out.width), (1, 8, 8));
    }

    #[test]
    fn single_pointwise_conv_costs_eight_ops() {
        let g = NetworkGraph::new(
            InputSpec {
                channels: 1,
                height: 2,
                width: 2,
            },
            1,
            vec![Layer {
                id: "c".into(),
                kind: LayerKind::Conv {
                    geom: crate::ops::conv::ConvGeom::pointwise(1, 1),
                    bias: false,
                    norm: None,
                    act: None,
                },
            }],
        );
        assert_eq!(count_flops(&g, FlopConvention::TwoOpMac).unwrap(), 8);
        assert_eq!(count_flops(&g, FlopConvention::Mac).unwrap(), 4);
    }

    #[test]
    fn slot_enumeration_matches_model_store() {
        let g = attach_esp(build_3block3fsm(32, 32, 8, 2, CaVariant::SigmoidUnnormalized).unwrap(), "block1").unwrap();
        let m = Model::<f32>::init(g.clone(), 1).unwrap();
        let slots = g.param_slots().unwrap();
        assert_eq!(slots.len(), m.store.len());
        for (s, (_, p)) in slots.iter().zip(m.store.iter()) {
            assert_eq!(s.name, p.name);
            assert_eq!(s.shape, p.shape);
            assert_eq!(s.role, p.role);
        }
        let mut active = m.clone();
        for id in g.fsm_ids() {
            active.set_fsm_active(&id, true).unwrap();
        }
        assert_eq!(count_params(&g).unwrap() as usize, active.store.trainable_count());
    }

    #[test]
    fn placement_rule_rejects_fsm_after_pool() {
        let mut g = build_3block3fsm(32, 32, 8, 1, CaVariant::SigmoidUnnormalized).unwrap();
        g.placement_rule = true;
        assert!(g.validate().is_err());
        g.placement_rule = false;
        assert!(g.validate().is_ok());
        assert!(build_resnet50_fsm(64, 64, 16, 3, CaVariant::default()).is_ok());
    }

    #[test]
    fn graph_json_roundtrip() {
        let g = attach_esp(build_3block3fsm(64, 32, 16, 3, CaVariant::SigmoidUnnormalized).unwrap(), "fsm2").unwrap();
        let back = NetworkGraph::from_json(&g.to_json()).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.param_slots().unwrap(), g.param_slots().unwrap());
    }

    #[test]
    fn unknown_esp_layer_is_config_error() {
        let g = build_3block3fsm(32, 32, 8, 1, CaVariant::SigmoidUnnormalized).unwrap();
        assert!(matches!(attach_esp(g, "nope"), Err(crate::Error::Config(_))));
    }

    #[test]
    fn bypassed_forward_matches_declared_shapes() {
        let g = attach_esp(build_3block3fsm(32, 16, 8, 2, CaVariant::SigmoidUnnormalized).unwrap(), "block3").unwrap();
        let m = Model::<f64>::init(g.clone(), 4).unwrap();
        let mut tape = Tape::new(&m.store);
        let x = tape.input(Tensor4::filled(Shape4::new(2, 3, 32, 16), 0.25));
        let tr = m.forward(&mut tape, x, Mode::Train).unwrap();
        let shapes = g.layer_shapes().unwrap();
        for (v, s) in tr.layers.iter().zip(&shapes) {
            assert_eq!(tape.shape(*v).with_channels(s.channels), Shape4::new(2, s.channels, s.height, s.width));
        }
        assert_eq!(tape.shape(tr.esps[0]), tape.shape(tr.head));
        assert!(tr.fsm.is_empty());
    }
}
