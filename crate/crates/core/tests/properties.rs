use proptest::prelude::*;

use ssn_core::autodiff::Tape;
use ssn_core::fsm::{ca_forward, shift_forward, CaVariant, ShiftOffsets};
use ssn_core::ops::conv::{conv2d_forward, ConvGeom};
use ssn_core::param::{ParamRole, ParamStore, ParamTensor};
use ssn_core::posenet::{attach_esp, build_tiny_fsm_net, InputSpec, Model};
use ssn_core::trainer::{heatmap_target, SynthSpec, TrainConfig, Trainer};
use ssn_core::{Shape4, Tensor4};

fn tensor(shape: Shape4, seed: u64) -> Tensor4<f64> {
    Tensor4::uniform(shape, -1.0, 1.0, seed)
}

fn small_spec() -> SynthSpec {
    SynthSpec {
        height: 16,
        width: 16,
        displacement: (5.0, 0.0),
        count: 16,
        ..Default::default()
    }
}

fn small_net(fsms: usize) -> Model<f32> {
    let input = InputSpec {
        channels: 3,
        height: 16,
        width: 16,
    };
    Model::init(build_tiny_fsm_net(input, 6, 4, fsms, 1, CaVariant::SoftplusNormalized).unwrap(), 2).unwrap()
}

fn config(iterations: u64, insertion: u64) -> TrainConfig {
    TrainConfig {
        base_lr: 3e-3,
        offset_lr: 0.05,
        batch_size: 4,
        iterations,
        insertion_iteration: insertion,
        seed: 9,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conv_is_linear_in_its_input(
        cin in 1usize..4, cout in 1usize..4, kernel in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3, h in 3usize..8, w in 3usize..8, seed in any::<u64>(),
        a in -2.0f64..2.0, b in -2.0f64..2.0,
    ) {
        let g = ConvGeom { in_channels: cin, out_channels: cout, kernel, stride, pad: kernel / 2 };
        let shape = Shape4::new(2, cin, h, w);
        let (x1, x2) = (tensor(shape, seed), tensor(shape, seed ^ 1));
        let wts = tensor(Shape4::new(1, 1, 1, g.weight_len()), seed ^ 2).into_vec();
        let mixed = x1.scale(a).add(&x2.scale(b)).unwrap();
        let lhs = conv2d_forward(&mixed, &wts, None, &g).unwrap();
        let rhs = conv2d_forward(&x1, &wts, None, &g).unwrap().scale(a)
            .add(&conv2d_forward(&x2, &wts, None, &g).unwrap().scale(b)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn same_direction_integer_shifts_compose(
        a in 0i32..4, b in 0i32..4, c in 0i32..4, d in 0i32..4,
        sign_x in prop::bool::ANY, sign_y in prop::bool::ANY, seed in any::<u64>(),
    ) {
        let sx = if sign_x { 1.0 } else { -1.0 };
        let sy = if sign_y { 1.0 } else { -1.0 };
        let x = tensor(Shape4::new(1, 1, 7, 9), seed);
        let off = |dx: f64, dy: f64| ShiftOffsets::new(vec![dx], vec![dy]).unwrap();
        let (a, b, c, d) = (a as f64, b as f64, c as f64, d as f64);
        let twice = shift_forward(&shift_forward(&x, &off(sx * a, sy * c)).unwrap(), &off(sx * b, sy * d)).unwrap();
        let once = shift_forward(&x, &off(sx * (a + b), sy * (c + d))).unwrap();
        prop_assert_eq!(twice.data(), once.data());
    }

    #[test]
    fn fractional_shift_is_linear_and_bounded(dx in -3.0f64..3.0, dy in -3.0f64..3.0, seed in any::<u64>()) {
        let off = ShiftOffsets::new(vec![dx], vec![dy]).unwrap();
        let shape = Shape4::new(1, 1, 6, 6);
        let (x1, x2) = (tensor(shape, seed), tensor(shape, seed ^ 5));
        let lhs = shift_forward(&x1.add(&x2).unwrap(), &off).unwrap();
        let rhs = shift_forward(&x1, &off).unwrap().add(&shift_forward(&x2, &off).unwrap()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        let peak = x1.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(shift_forward(&x1, &off).unwrap().data().iter().all(|v| v.abs() <= peak + 1e-12));
    }

    #[test]
    fn gates_stay_in_range(c in 1usize..4, k in 1usize..4, h in 1usize..7, w in 1usize..7, seed in any::<u64>()) {
        let mut store = ParamStore::<f64>::new();
        let wf = tensor(Shape4::new(1, 1, 1, k * c), seed).scale(3.0).into_vec();
        let wf = store.insert(ParamTensor::new("w_f", vec![k, c], wf, ParamRole::Weight)).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.constant(tensor(Shape4::new(2, c, h, w), seed ^ 3).scale(4.0));
        let sig = ca_forward(&mut tape, x, wf, CaVariant::SigmoidUnnormalized).unwrap();
        let soft = ca_forward(&mut tape, x, wf, CaVariant::SoftplusNormalized).unwrap();
        prop_assert!(tape.value(sig).data().iter().all(|&v| v > 0.0 && v < 1.0));
        prop_assert!(tape.value(soft).data().iter().all(|&v| v > 0.0 && v <= 1.0));
    }
}

#[test]
fn random_tiny_networks_produce_target_sized_maps() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let input = InputSpec {
            channels: rng.gen_range(1..=3),
            height: rng.gen_range(4..=12),
            width: rng.gen_range(4..=12),
        };
        let (ch, k, fsms, kp) = (rng.gen_range(2..=6), rng.gen_range(1..=5), rng.gen_range(0..=2), rng.gen_range(1..=3));
        let variant = if rng.gen() { CaVariant::SoftplusNormalized } else { CaVariant::SigmoidUnnormalized };
        let graph = build_tiny_fsm_net(input, ch, k, fsms, kp, variant).unwrap();
        let mut model = Model::<f64>::init(graph, rng.gen()).unwrap();
        model.insert_fsms(&mut rng).unwrap();
        let batch = rng.gen_range(1..=2);
        let mut tape = Tape::new(&model.store);
        let x = tape.input(tensor(input.shape(batch), rng.gen()));
        let trace = model.forward(&mut tape, x, ssn_core::ops::norm::Mode::Train).unwrap();
        assert_eq!(tape.shape(trace.head), Shape4::new(batch, kp, input.height, input.width));
        assert_eq!(trace.fsm.len(), fsms);
        assert!(tape.value(trace.head).all_finite());
    }
}

#[test]
fn esp_loss_reaches_the_backbone() {
    let model = small_net(1);
    let graph = attach_esp(model.graph.clone(), "conv1").unwrap();
    let mut model = Model::<f32>::init(graph, 2).unwrap();
    model.insert_fsms(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0)).unwrap();
    let target = heatmap_target::<f32>(&[(5.0, 7.0)], 16, 16, 1.5).unwrap();
    let mut tape = Tape::new(&model.store);
    let x = tape.input(Tensor4::uniform(Shape4::new(1, 3, 16, 16), 0.0, 1.0, 4));
    let y = tape.constant(target);
    let trace = model.forward(&mut tape, x, ssn_core::ops::norm::Mode::Train).unwrap();
    assert_eq!(trace.esps.len(), 1);
    let esp_only = tape.mse(trace.esps[0], y).unwrap();
    let grads = tape.backward(esp_only).unwrap();
    let norm = |prefix: &str| {
        grads
            .params()
            .filter(|(id, _)| model.store.get(*id).name.starts_with(prefix))
            .flat_map(|(_, g)| g.iter())
            .map(|&g| (g as f64).powi(2))
            .sum::<f64>()
    };
    assert!(norm("stem") > 0.0);
    assert!(norm("head") == 0.0);
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let data = small_spec().generate().unwrap();
    let run = || {
        let mut t = Trainer::new(small_net(2), TrainConfig { augment: true, ..config(8, 3) }, small_spec()).unwrap();
        let mut losses = Vec::new();
        t.run(&data, |m, _| {
            losses.push(m.loss_main.to_bits());
            Ok(())
        })
        .unwrap();
        let values: Vec<u32> = t.model.store.iter().flat_map(|(_, p)| p.values.iter().map(|v| v.to_bits())).collect();
        (losses, values)
    };
    assert_eq!(run(), run());
}

#[test]
fn training_reduces_the_loss() {
    let data = small_spec().generate().unwrap();
    let mut t = Trainer::new(small_net(1), config(60, 0), small_spec()).unwrap();
    let mut losses = Vec::new();
    t.run(&data, |m, _| {
        losses.push(m.loss_main);
        Ok(())
    })
    .unwrap();
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[losses.len() - 5..].iter().sum::<f64>() / 5.0;
    assert!(tail < 0.5 * head, "{head} -> {tail}");
}

#[test]
fn offsets_get_gradient_soon_after_insertion() {
    let data = small_spec().generate().unwrap();
    let mut t = Trainer::new(small_net(2), config(10, 2), small_spec()).unwrap();
    let mut norms = Vec::new();
    t.run(&data, |m, _| {
        norms.push(m.offset_grad_norm);
        Ok(())
    })
    .unwrap();
    assert_eq!(&norms[..2], &[0.0, 0.0]);
    assert!(norms[2..].iter().any(|&n| n > 0.0), "{norms:?}");
}
