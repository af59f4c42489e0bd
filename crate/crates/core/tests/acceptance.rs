//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Built with `harness = false` so the lines always print.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssn_core::analysis::{contribution_counts, erf_map, keypoint_offset_scores, ScoreOptions};
use ssn_core::autodiff::Tape;
use ssn_core::checkpoint::Checkpoint;
use ssn_core::fsm::{ca_forward, shift_forward, CaVariant, FsmConfig, ShiftOffsets};
use ssn_core::ops::conv::ConvGeom;
use ssn_core::param::{ParamRole, ParamStore, ParamTensor};
use ssn_core::posenet::{
    build_3block3fsm, build_shift_probe_net, build_tiny_fsm_net, count_flops, count_params, FlopConvention, InputSpec, Layer,
    LayerKind, Model, NetworkGraph,
};
use ssn_core::selfcheck::{gradient_suite, oracle_suite};
use ssn_core::trainer::{evaluate_loss, ShiftTaskSpec, SynthSpec, TrainConfig, Trainer};
use ssn_core::{Real, Shape4, Tensor4};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(budget: Duration, t0: Instant) -> (bool, String) {
    let e = t0.elapsed();
    (e < budget, format!("{:.1}s of {:.0}s", e.as_secs_f64(), budget.as_secs_f64()))
}

fn oracle_equivalence() -> Outcome {
    let t0 = Instant::now();
    let cases = oracle_suite(20, 0).unwrap();
    let worst = cases.iter().map(|c| c.max_rel_diff).fold(0.0, f64::max);
    let (fast, time) = within(Duration::from_secs(10), t0);
    outcome(
        cases.len() == 20 && worst < 1e-6 && fast,
        format!("20 configs, max rel diff {worst:.3e}, {time}"),
    )
}

fn gradient_checks() -> Outcome {
    let t0 = Instant::now();
    let cases = gradient_suite(100, 0).unwrap();
    let worst = cases.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<_> = cases.iter().filter(|c| !c.report.pass).map(|c| c.index).collect();
    let (fast, time) = within(Duration::from_secs(120), t0);
    outcome(
        failed.is_empty() && worst < 1e-4 && fast,
        format!("100 cases, max rel error {worst:.3e}, failed {failed:?}, {time}"),
    )
}

/// Zero-filled integer translation: `out(x, y) = in(x - dx, y - dy)`.
fn translated<T: Real>(maps: &Tensor4<T>, dx: &[i64], dy: &[i64]) -> Tensor4<T> {
    let s = maps.shape();
    let mut out = Tensor4::zeros(s);
    for b in 0..s.batch {
        for k in 0..s.channels {
            for y in 0..s.height as i64 {
                for x in 0..s.width as i64 {
                    let (sx, sy) = (x - dx[k], y - dy[k]);
                    if (0..s.width as i64).contains(&sx) && (0..s.height as i64).contains(&sy) {
                        out.set(b, k, y as usize, x as usize, maps.at(b, k, sy as usize, sx as usize));
                    }
                }
            }
        }
    }
    out
}

fn bits<T: Real>(t: &Tensor4<T>) -> Vec<u64> {
    t.data().iter().map(|v| Real::to_f64(*v).to_bits()).collect()
}

fn exact_shift_for<T: Real>(rng: &mut ChaCha8Rng) -> (bool, bool) {
    let (mut translation, mut identity) = (true, true);
    for _ in 0..25 {
        let k = rng.gen_range(1..=5);
        let shape = Shape4::new(rng.gen_range(1..=3), k, rng.gen_range(1..=9), rng.gen_range(1..=9));
        let maps = Tensor4::<T>::uniform(shape, -3.0, 3.0, rng.gen());
        let dx: Vec<i64> = (0..k).map(|_| rng.gen_range(-10..=10)).collect();
        let dy: Vec<i64> = (0..k).map(|_| rng.gen_range(-10..=10)).collect();
        let offsets = ShiftOffsets::new(
            dx.iter().map(|&v| T::c(v as f64)).collect(),
            dy.iter().map(|&v| T::c(v as f64)).collect(),
        )
        .unwrap();
        translation &= bits(&shift_forward(&maps, &offsets).unwrap()) == bits(&translated(&maps, &dx, &dy));

        let mut store = ParamStore::<T>::new();
        let off = store
            .insert(ParamTensor::new("offsets", vec![k, 2], offsets.to_interleaved(), ParamRole::Offset))
            .unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.constant(maps.clone());
        let y = tape.shift(x, off).unwrap();
        translation &= bits(tape.value(y)) == bits(&translated(&maps, &dx, &dy));

        identity &= bits(&shift_forward(&maps, &ShiftOffsets::zeros(k)).unwrap()) == bits(&maps);
    }
    (translation, identity)
}

fn exact_shift() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (t64, i64_) = exact_shift_for::<f64>(&mut rng);
    let (t32, i32_) = exact_shift_for::<f32>(&mut rng);
    outcome(
        t64 && i64_ && t32 && i32_,
        format!("translation f64 {t64} f32 {t32}, identity f64 {i64_} f32 {i32_}"),
    )
}

fn softplus_sums<T: Real>(rng: &mut ChaCha8Rng) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (c, k) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let shape = Shape4::new(rng.gen_range(1..=3), c, rng.gen_range(1..=24), rng.gen_range(1..=24));
        let mut store = ParamStore::<T>::new();
        let w = Tensor4::<T>::uniform(Shape4::new(1, 1, 1, k * c), -2.0, 2.0, rng.gen()).into_vec();
        let w = store.insert(ParamTensor::new("w_f", vec![k, c], w, ParamRole::Weight)).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor4::uniform(shape, -4.0, 4.0, rng.gen()));
        let f = ca_forward(&mut tape, x, w, CaVariant::SoftplusNormalized).unwrap();
        let f = tape.value(f);
        for b in 0..shape.batch {
            for kk in 0..k {
                let s: f64 = f.plane(b, kk).iter().map(|&v| Real::to_f64(v)).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
    }
    worst
}

fn ca_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d64 = softplus_sums::<f64>(&mut rng);
    let d32 = softplus_sums::<f32>(&mut rng);
    outcome(
        d64 < 1e-6 && d32 < 1e-6,
        format!("max |sum - 1| f64 {d64:.2e}, f32 {d32:.2e}"),
    )
}

fn cost_reproduction() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (k, params_ref, flops_ref) in [(256, 0.8e6, 2.5e9), (512, 1.2e6, 3.9e9)] {
        let g = build_3block3fsm(256, 192, k, 17, CaVariant::SoftplusNormalized).unwrap();
        let p = count_params(&g).unwrap() as f64;
        let f = count_flops(&g, FlopConvention::Mac).unwrap() as f64;
        let (dp, df) = ((p - params_ref).abs() / params_ref, (f - flops_ref).abs() / flops_ref);
        pass &= dp <= 0.05 && df <= 0.20;
        parts.push(format!(
            "K={k}: {:.3} M params ({:+.1}%), {:.3} G MAC ({:+.1}%)",
            p / 1e6,
            100.0 * (p - params_ref) / params_ref,
            f / 1e9,
            100.0 * (f - flops_ref) / flops_ref
        ));
    }
    outcome(pass, parts.join("; "))
}

fn ablation() -> Outcome {
    let t0 = Instant::now();
    let input = InputSpec {
        channels: 3,
        height: 32,
        width: 32,
    };
    let mut wins = 0;
    let mut losses = Vec::new();
    for seed in 0..10u64 {
        let spec = SynthSpec {
            count: 256,
            seed: 100 + seed,
            ..Default::default()
        };
        let train = spec.generate().unwrap();
        let eval = SynthSpec {
            count: 64,
            seed: 900 + seed,
            ..spec
        }
        .generate()
        .unwrap();
        let graph = build_tiny_fsm_net(input, 16, 16, 2, 1, CaVariant::SoftplusNormalized).unwrap();
        let mut pair = [0.0; 2];
        for (slot, insertion) in [0, u64::MAX].into_iter().enumerate() {
            let config = TrainConfig {
                base_lr: 3e-3,
                offset_lr: 0.05,
                batch_size: 16,
                iterations: 300,
                insertion_iteration: insertion,
                seed,
                ..Default::default()
            };
            let mut t = Trainer::new(Model::init(graph.clone(), seed).unwrap(), config, spec).unwrap();
            t.run(&train, |_, _| Ok(())).unwrap();
            pair[slot] = evaluate_loss(&t.model, &eval, 32).unwrap();
        }
        if pair[0] < pair[1] {
            wins += 1;
        }
        losses.push(format!("{:.2e}/{:.2e}", pair[0], pair[1]));
    }
    let (fast, time) = within(Duration::from_secs(15 * 60), t0);
    outcome(
        wins >= 8 && fast,
        format!("FSM wins {wins}/10, eval loss fsm/bypass [{}], {time}", losses.join(" ")),
    )
}

fn offset_recovery() -> Outcome {
    let t0 = Instant::now();
    let d = (3.0, -2.0);
    let mut hits = 0;
    let mut best = Vec::new();
    for seed in 0..10u64 {
        let spec = ShiftTaskSpec {
            displacement: d,
            seed,
            ..Default::default()
        };
        let data = spec.generate().unwrap();
        let input = InputSpec {
            channels: 1,
            height: spec.height,
            width: spec.width,
        };
        let graph = build_shift_probe_net(input, 8, CaVariant::SigmoidUnnormalized).unwrap();
        let config = TrainConfig {
            base_lr: 3e-3,
            offset_lr: 0.05,
            offset_decay_per_epoch: 0.0,
            batch_size: 8,
            iterations: 1500,
            insertion_iteration: 0,
            seed,
            ..Default::default()
        };
        let mut t = Trainer::new(Model::init(graph, seed).unwrap(), config, SynthSpec::default()).unwrap();
        t.run(&data, |_, _| Ok(())).unwrap();
        let p = t.model.fsm_params("fsm1").unwrap();
        let dist = p
            .offsets
            .dx
            .iter()
            .zip(&p.offsets.dy)
            .map(|(&x, &y)| (x as f64 + d.0).hypot(y as f64 + d.1))
            .fold(f64::INFINITY, f64::min);
        if dist <= 0.5 {
            hits += 1;
        }
        best.push(format!("{dist:.3}"));
    }
    let (fast, time) = within(Duration::from_secs(5 * 60), t0);
    outcome(
        hits >= 8 && fast,
        format!("within 0.5 px of -d in {hits}/10 seeds, closest distances [{}], {time}", best.join(" ")),
    )
}

fn small_synth() -> SynthSpec {
    SynthSpec {
        height: 16,
        width: 16,
        displacement: (5.0, 0.0),
        count: 12,
        ..Default::default()
    }
}

fn small_trainer(iterations: u64, insertion: u64, augment: bool) -> Trainer {
    let synth = small_synth();
    let graph = build_tiny_fsm_net(
        InputSpec {
            channels: 3,
            height: 16,
            width: 16,
        },
        6,
        4,
        2,
        1,
        CaVariant::SoftplusNormalized,
    )
    .unwrap();
    let config = TrainConfig {
        base_lr: 1e-3,
        batch_size: 4,
        iterations,
        insertion_iteration: insertion,
        augment,
        seed: 17,
        ..Default::default()
    };
    Trainer::new(Model::init(graph, 17).unwrap(), config, synth).unwrap()
}

fn fsm_bits(model: &Model<f32>) -> Vec<(String, Vec<u32>)> {
    model
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with("fsm"))
        .map(|(_, p)| (p.name.clone(), p.values.iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn schedule_fidelity() -> Outcome {
    let defaults = TrainConfig::default();
    let mut exact = true;
    for epoch in 0..200u64 {
        let mut expected = 1e-3f64;
        for _ in 0..epoch {
            expected *= 0.9;
        }
        let got = defaults.offset_lr_at(epoch);
        // Repeated multiplication rounds once per epoch.
        exact &= (got - expected).abs() <= 1e-13 * expected;
        exact &= got == 1e-3 * 0.9f64.powi(epoch as i32);
    }

    let data = small_synth().generate().unwrap();
    let insertion = 7;
    let mut t = small_trainer(12, insertion, true);
    let before = fsm_bits(&t.model);
    let mut frozen = true;
    let mut applied = true;
    let mut inserted_at = None;
    let ipe = t.config.iterations_per_epoch(data.len());
    while t.iteration < t.config.iterations {
        let m = t.step(&data).unwrap();
        if m.inserted_fsms {
            inserted_at = Some(m.iteration);
        }
        if m.iteration + 1 < insertion {
            frozen &= fsm_bits(&t.model) == before;
        }
        applied &= m.epoch == m.iteration / ipe && m.offset_lr == t.config.offset_lr_at(m.epoch);
    }
    let changed = fsm_bits(&t.model) != before;
    outcome(
        exact && frozen && applied && changed && inserted_at == Some(insertion),
        format!(
            "lr formula exact {exact}, applied per epoch {applied}, FSM bits frozen before insertion {frozen}, inserted at {inserted_at:?}, trained after {changed}"
        ),
    )
}

fn fsm_head(c: usize, k: usize, variant: CaVariant, h: usize, w: usize) -> Model<f64> {
    let graph = NetworkGraph::new(
        InputSpec {
            channels: c,
            height: h,
            width: w,
        },
        1,
        vec![
            Layer {
                id: "fsm1".into(),
                kind: LayerKind::Fsm {
                    config: FsmConfig {
                        channels: c,
                        shift_channels: k,
                        ca_variant: variant,
                    },
                },
            },
            Layer {
                id: "head".into(),
                kind: LayerKind::Conv {
                    geom: ConvGeom::pointwise(c, 1),
                    bias: true,
                    norm: None,
                    act: None,
                },
            },
        ],
    );
    let mut model = Model::init(graph, 5).unwrap();
    model.set_fsm_active("fsm1", true).unwrap();
    model
}

fn analysis_sanity() -> Outcome {
    let (k, wired) = (5, 3);
    let mut model = fsm_head(2, k, CaVariant::SoftplusNormalized, 10, 12);
    let mut p = model.fsm_params("fsm1").unwrap();
    p.w_alpha.iter_mut().for_each(|w| *w = 0.5);
    p.w_beta = (0..2 * k).map(|i| if i % k == wired { 1.0 } else { 0.0 }).collect();
    model.set_fsm_params("fsm1", &p).unwrap();
    model.store.by_name_mut("head.w").unwrap().values = vec![1.0, 1.0];
    let batch = Tensor4::uniform(Shape4::new(3, 2, 10, 12), 0.1, 1.0, 8);
    let scores = keypoint_offset_scores(&model, &batch, "fsm1", ScoreOptions::default()).unwrap();
    let expected: Vec<f64> = (0..k).map(|i| if i == wired { 1.0 } else { 0.0 }).collect();
    let single = scores.values == expected && contribution_counts(&scores, 0.5) == vec![1];

    let (h, w) = (15, 17);
    let mut peaks = true;
    let mut seen = Vec::new();
    for (dx, dy) in [(3.0, 0.0), (-4.0, 2.0), (2.0, -3.0), (0.0, 5.0)] {
        let mut m = fsm_head(1, 1, CaVariant::SigmoidUnnormalized, h, w);
        let mut p = m.fsm_params("fsm1").unwrap();
        p.w_alpha = vec![1.0];
        p.w_beta = vec![1.0];
        p.w_f = vec![0.05];
        p.offsets = ShiftOffsets::new(vec![dx], vec![dy]).unwrap();
        m.set_fsm_params("fsm1", &p).unwrap();
        let input = Tensor4::uniform(Shape4::new(1, 1, h, w), -1.0, 1.0, 9);
        let at = (8usize, 7usize);
        let map = erf_map(&m, &input, "fsm1", 0, at).unwrap();
        let (px, py) = map.peak();
        let dist = (px as f64 - at.0 as f64).hypot(py as f64 - at.1 as f64);
        peaks &= (dist - f64::hypot(dx, dy)).abs() < 1e-12 && (px as f64, py as f64) == (at.0 as f64 - dx, at.1 as f64 - dy);
        seen.push(format!("({dx},{dy})->{dist:.2}"));
    }
    outcome(
        single && peaks,
        format!("scores {:?}, ERF peak distances {}", scores.values, seen.join(" ")),
    )
}

fn checkpoint_determinism() -> Outcome {
    let data = small_synth().generate().unwrap();
    let total = 11;
    let mut straight = small_trainer(total, 4, true);
    straight.run(&data, |_, _| Ok(())).unwrap();
    let reference = Checkpoint::from_trainer(&straight).to_bytes().unwrap();

    let dir = std::env::temp_dir().join(format!("ssn-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let mut all = true;
    let mut splits = Vec::new();
    // Before insertion, at it, mid-epoch and at an epoch boundary.
    for split in [2, 4, 5, 6] {
        let mut first = small_trainer(split, 4, true);
        first.run(&data, |_, _| Ok(())).unwrap();
        let path = dir.join(format!("split{split}.ssnc"));
        Checkpoint::from_trainer(&first).save(&path).unwrap();
        let mut resumed = Checkpoint::load(&path).unwrap().into_trainer().unwrap();
        resumed.config.iterations = total;
        resumed.run(&data, |_, _| Ok(())).unwrap();
        let same = Checkpoint::from_trainer(&resumed).to_bytes().unwrap() == reference;
        all &= same;
        splits.push(format!("{split}:{same}"));
    }
    let _ = std::fs::remove_dir_all(&dir);
    outcome(all, format!("resume at iterations [{}] byte-identical to an {total}-iteration run", splits.join(" ")))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("oracle equivalence", oracle_equivalence),
        ("gradient suite", gradient_checks),
        ("exact-shift law", exact_shift),
        ("CA normalization", ca_normalization),
        ("cost reproduction", cost_reproduction),
        ("long-range ablation", ablation),
        ("offset recovery", offset_recovery),
        ("schedule fidelity", schedule_fidelity),
        ("analysis sanity", analysis_sanity),
        ("checkpoint determinism", checkpoint_determinism),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.into_iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !result.pass {
            failed += 1;
        }
        println!(
            "criterion {n:>2} {name}: {} ({})",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
