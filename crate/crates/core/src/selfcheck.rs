//! Seeded self-check suites: finite-difference gradient checks over every
//! differentiable building block, and the tape FSM against its
//! explicit-convolution oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::error::Result;
use crate::fsm::oracle::fsm_oracle;
use crate::fsm::{ca_forward, fsm_forward, CaVariant, FsmConfig, FsmParams, ShiftOffsets};
use crate::gradcheck::{finite_diff_gradcheck, rel_error, GradCheckOptions, GradCheckReport};
use crate::ops::norm::{Mode, NormKind};
use crate::param::{ParamRole, ParamStore, ParamTensor};
use crate::posenet::{BottleneckConfig, InputSpec, Layer, LayerKind, Model, NetworkGraph};
use crate::tensor::{Shape4, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Conv1x1,
    ShiftMaps,
    ShiftOffsets,
    CaSoftplus,
    CaSigmoid,
    Fsm,
    Bottleneck,
}

impl CheckKind {
    pub const ALL: [CheckKind; 7] = [
        CheckKind::Conv1x1,
        CheckKind::ShiftMaps,
        CheckKind::ShiftOffsets,
        CheckKind::CaSoftplus,
        CheckKind::CaSigmoid,
        CheckKind::Fsm,
        CheckKind::Bottleneck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckKind::Conv1x1 => "conv1x1",
            CheckKind::ShiftMaps => "shift_maps",
            CheckKind::ShiftOffsets => "shift_offsets",
            CheckKind::CaSoftplus => "ca_softplus",
            CheckKind::CaSigmoid => "ca_sigmoid",
            CheckKind::Fsm => "fsm",
            CheckKind::Bottleneck => "bottleneck",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCase {
    pub index: usize,
    pub kind: CheckKind,
    pub seed: u64,
    pub report: GradCheckReport,
}

fn random(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::uniform(shape, -1.0, 1.0, rng.gen())
}

/// Fractional value at least 0.1 away from every integer, in `(-range, range)`.
fn fractional(rng: &mut ChaCha8Rng, range: f64) -> f64 {
    loop {
        let v: f64 = rng.gen_range(-range..range);
        let f = v - v.floor();
        if (0.1..=0.9).contains(&f) {
            return v;
        }
    }
}

fn fractional_offsets(k: usize, rng: &mut ChaCha8Rng) -> ShiftOffsets<f64> {
    let dx = (0..k).map(|_| fractional(rng, 2.5)).collect();
    let dy = (0..k).map(|_| fractional(rng, 2.5)).collect();
    ShiftOffsets::new(dx, dy).expect("equal lengths")
}

fn small_shape(rng: &mut ChaCha8Rng, channels: usize) -> Shape4 {
    Shape4::new(rng.gen_range(1..=2), channels, rng.gen_range(3..=5), rng.gen_range(3..=5))
}

fn random_fsm(rng: &mut ChaCha8Rng, c: usize, k: usize, variant: CaVariant) -> FsmParams<f64> {
    let cfg = FsmConfig {
        channels: c,
        shift_channels: k,
        ca_variant: variant,
    };
    let mut p = FsmParams::init(cfg, rng);
    p.w_beta = (0..c * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
    p.offsets = fractional_offsets(k, rng);
    p.norm_scale = (0..c).map(|_| rng.gen_range(0.5..1.5)).collect();
    p.norm_offset = (0..c).map(|_| rng.gen_range(-0.2..0.2)).collect();
    p.running_mean = (0..c).map(|_| rng.gen_range(-0.3..0.3)).collect();
    p.running_var = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
    p
}

/// Runs one gradient check of `kind` with everything drawn from `seed`.
pub fn grad_case(kind: CheckKind, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions {
        projection_seed: seed ^ 0x9e37_79b9,
        ..Default::default()
    };
    let mut store = ParamStore::<f64>::new();
    match kind {
        CheckKind::Conv1x1 => {
            let (c, o) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
            let w = random(Shape4::new(1, 1, 1, c * o), &mut rng).into_vec();
            let w = store.insert(ParamTensor::new("w", vec![o, c], w, ParamRole::Weight))?;
            let b = random(Shape4::new(1, 1, 1, o), &mut rng).into_vec();
            let b = store.insert(ParamTensor::new("b", vec![o], b, ParamRole::Weight))?;
            let x = random(small_shape(&mut rng, c), &mut rng);
            finite_diff_gradcheck(|t, v| t.conv1x1(v[0], w, Some(b)), &[x], &store, opts)
        }
        CheckKind::ShiftMaps | CheckKind::ShiftOffsets => {
            let k = rng.gen_range(1..=3);
            let offsets = fractional_offsets(k, &mut rng);
            let mut p = ParamTensor::new("offsets", vec![k, 2], offsets.to_interleaved(), ParamRole::Offset);
            p.requires_grad = kind == CheckKind::ShiftOffsets;
            let off = store.insert(p)?;
            let x = random(small_shape(&mut rng, k), &mut rng);
            finite_diff_gradcheck(|t, v| t.shift(v[0], off), &[x], &store, opts)
        }
        CheckKind::CaSoftplus | CheckKind::CaSigmoid => {
            let variant = if kind == CheckKind::CaSoftplus {
                CaVariant::SoftplusNormalized
            } else {
                CaVariant::SigmoidUnnormalized
            };
            let (c, k) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let w = random(Shape4::new(1, 1, 1, k * c), &mut rng).into_vec();
            let w = store.insert(ParamTensor::new("w_f", vec![k, c], w, ParamRole::Weight))?;
            let x = random(small_shape(&mut rng, c), &mut rng);
            finite_diff_gradcheck(|t, v| ca_forward(t, v[0], w, variant), &[x], &store, opts)
        }
        CheckKind::Fsm => {
            let variant = if rng.gen() {
                CaVariant::SoftplusNormalized
            } else {
                CaVariant::SigmoidUnnormalized
            };
            let mode = if rng.gen() { Mode::Train } else { Mode::Eval };
            let (c, k) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let slots = random_fsm(&mut rng, c, k, variant).register(&mut store, "fsm")?;
            let mut shape = small_shape(&mut rng, c);
            if mode == Mode::Train {
                shape.batch = 2;
            }
            let x = random(shape, &mut rng);
            finite_diff_gradcheck(
                |t, v| Ok(fsm_forward(t, v[0], &slots, variant, mode)?.output),
                &[x],
                &store,
                opts,
            )
        }
        CheckKind::Bottleneck => {
            let cin = rng.gen_range(2..=4);
            let out = 8 * rng.gen_range(1..=2);
            let stride = rng.gen_range(1..=2);
            let norm = NormKind::Group { groups: 2 };
            let input = InputSpec {
                channels: cin,
                height: rng.gen_range(6..=7),
                width: rng.gen_range(6..=7),
            };
            let graph = NetworkGraph::new(
                input,
                out,
                vec![Layer {
                    id: "block".into(),
                    kind: LayerKind::Bottleneck {
                        config: BottleneckConfig::new(cin, out, stride, norm),
                    },
                }],
            );
            let mut model = Model::<f64>::init(graph, rng.gen())?;
            for (_, p) in model.store.iter_mut() {
                if p.name.ends_with(".gamma") || p.name.ends_with(".beta") {
                    for v in &mut p.values {
                        *v += rng.gen_range(-0.3..0.3);
                    }
                }
            }
            let x = random(input.shape(1), &mut rng);
            let model = &model;
            finite_diff_gradcheck(
                |t, v| Ok(model.forward(t, v[0], Mode::Train)?.head),
                &[x],
                &model.store,
                opts,
            )
        }
    }
}

/// `cases` checks cycling through every [`CheckKind`], case `i` seeded
/// with `seed + i`.
pub fn gradient_suite(cases: usize, seed: u64) -> Result<Vec<GradCase>> {
    (0..cases)
        .map(|i| {
            let kind = CheckKind::ALL[i % CheckKind::ALL.len()];
            let s = seed.wrapping_add(i as u64);
            Ok(GradCase {
                index: i,
                kind,
                seed: s,
                report: grad_case(kind, s)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleCase {
    pub index: usize,
    pub config: FsmConfig,
    pub shape: [usize; 4],
    pub train_mode: bool,
    /// Largest [`rel_error`] over all outputs.
    pub max_rel_diff: f64,
}

/// Compares the tape FSM with the explicit-convolution oracle on `configs`
/// random small configurations, in double precision.
pub fn oracle_suite(configs: usize, seed: u64) -> Result<Vec<OracleCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(configs);
    for index in 0..configs {
        let variant = if index % 2 == 0 {
            CaVariant::SoftplusNormalized
        } else {
            CaVariant::SigmoidUnnormalized
        };
        let (c, k) = (rng.gen_range(1..=5), rng.gen_range(1..=6));
        let params = random_fsm(&mut rng, c, k, variant);
        let mode = if index % 4 < 2 { Mode::Eval } else { Mode::Train };
        let shape = Shape4::new(rng.gen_range(1..=3), c, rng.gen_range(2..=7), rng.gen_range(2..=7));
        let p = random(shape, &mut rng);
        let oracle = fsm_oracle(&p, &params, mode)?;
        let mut store = ParamStore::new();
        let slots = params.register(&mut store, "fsm")?;
        let mut tape = Tape::new(&store);
        let x = tape.constant(p);
        let q = fsm_forward(&mut tape, x, &slots, variant, mode)?.output;
        let got = tape.value(q);
        let max_rel_diff = got
            .data()
            .iter()
            .zip(oracle.data())
            .map(|(&a, &b)| rel_error(a, b))
            .fold(0.0, f64::max);
        out.push(OracleCase {
            index,
            config: params.config(),
            shape: [shape.batch, shape.channels, shape.height, shape.width],
            train_mode: mode == Mode::Train,
            max_rel_diff,
        });
    }
    Ok(out)
}
