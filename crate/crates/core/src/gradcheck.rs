//! Central finite-difference check of tape gradients.
//!
//! The op under test maps leaf inputs (and the parameters in a store) to a
//! tensor. A fixed random projection turns that tensor into a scalar, so a
//! single backward sweep yields the full vector-Jacobian product that the
//! perturbation loop checks coordinate by coordinate. Coordinates whose
//! perturbation moves the evaluation onto a different smooth piece (ReLU
//! sign flip, shift cell change, pooling winner change) are retried
//! with a smaller step and counted as skipped only if that keeps
//! failing; the error measure is `|a - n| / max(1, |a|, |n|)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::param::ParamStore;
use crate::tensor::Tensor4;

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Largest fraction of coordinates that may be skipped as non-smooth before
/// the check counts as failed.
pub const MAX_SKIP_FRACTION: f64 = 0.05;
/// Tenfold step reductions tried on a coordinate near a non-smooth point.
pub const MAX_REFINEMENTS: usize = 3;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    pub projection_seed: u64,
    /// Multiplies every analytic gradient; `1.0` except in negative controls.
    pub analytic_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            projection_seed: 0x5eed,
            analytic_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    /// Coordinates checked with a reduced step.
    pub refined: usize,
    pub worst: Option<String>,
    pub pass: bool,
    pub diagnostic: Option<String>,
}

impl GradCheckReport {
    fn failed(diagnostic: String) -> Self {
        Self {
            max_rel_error: f64::INFINITY,
            checked: 0,
            skipped_kinks: 0,
            refined: 0,
            worst: None,
            pass: false,
            diagnostic: Some(diagnostic),
        }
    }
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

struct Eval {
    loss: f64,
    regime: Vec<i64>,
}

fn evaluate<F>(build: &F, inputs: &[Tensor4<f64>], params: &ParamStore<f64>, proj: &mut Option<Tensor4<f64>>, seed: u64) -> Result<Eval>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let w = proj.get_or_insert_with(|| projection(tape.value(out).shape(), seed)).clone();
    let loss = tape.project(out, w)?;
    Ok(Eval {
        loss: tape.value(loss).data()[0],
        regime: tape.regime().to_vec(),
    })
}

enum Probe {
    Smooth { numeric: f64, step: f64 },
    Kink,
    NonFinite,
}

/// Central difference at step `h`. When either side lands on another
/// smooth piece the step shrinks tenfold, at most [`MAX_REFINEMENTS`]
/// times, before the coordinate counts as a kink.
fn central_difference(mut eval_at: impl FnMut(f64) -> Result<Eval>, base: &[i64], h: f64) -> Result<Probe> {
    let mut step = h;
    for _ in 0..=MAX_REFINEMENTS {
        let plus = eval_at(step)?;
        let minus = eval_at(-step)?;
        if plus.regime == base && minus.regime == base {
            if !plus.loss.is_finite() || !minus.loss.is_finite() {
                return Ok(Probe::NonFinite);
            }
            return Ok(Probe::Smooth {
                numeric: (plus.loss - minus.loss) / (2.0 * step),
                step,
            });
        }
        step /= 10.0;
    }
    Ok(Probe::Kink)
}

fn projection(shape: crate::tensor::Shape4, seed: u64) -> Tensor4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor4::from_vec(shape, data).expect("projection shape")
}

/// Checks the analytic gradient of `build` with respect to every input
/// scalar and every parameter scalar that requires a gradient.
pub fn finite_diff_gradcheck<F>(
    build: F,
    inputs: &[Tensor4<f64>],
    params: &ParamStore<f64>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut proj;
    let (analytic_inputs, analytic_params, base) = {
        let mut tape = Tape::new(params);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        if let Some((_, name)) = tape.first_non_finite() {
            return Ok(GradCheckReport::failed(format!("non-finite forward value at {name}")));
        }
        let w = projection(tape.value(out).shape(), opts.projection_seed);
        proj = Some(w.clone());
        let loss = tape.project(out, w)?;
        let grads = tape.backward(loss)?;
        let gi: Vec<Option<Vec<f64>>> = vars.iter().map(|&v| grads.node(v).map(|g| g.data().to_vec())).collect();
        let gp: Vec<(crate::param::ParamId, Vec<f64>)> =
            grads.params().map(|(id, g)| (id, g.to_vec())).collect();
        (gi, gp, Eval {
            loss: tape.value(loss).data()[0],
            regime: tape.regime().to_vec(),
        })
    };
    if !base.loss.is_finite() {
        return Ok(GradCheckReport::failed("non-finite loss".into()));
    }

    let h = opts.step;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
        refined: 0,
        worst: None,
        pass: false,
        diagnostic: None,
    };
    let record = |what: String, a: f64, probe: Probe, report: &mut GradCheckReport| {
        let (n, step) = match probe {
            Probe::Kink => {
                report.skipped_kinks += 1;
                return;
            }
            Probe::NonFinite => {
                report.diagnostic = Some(format!("non-finite perturbed loss at {what}"));
                report.max_rel_error = f64::INFINITY;
                return;
            }
            Probe::Smooth { numeric, step } => (numeric, step),
        };
        if step < h {
            report.refined += 1;
        }
        let a = a * opts.analytic_scale;
        let e = rel_error(a, n);
        report.checked += 1;
        if e > report.max_rel_error || e.is_nan() {
            report.max_rel_error = e;
            report.worst = Some(format!("{what}: analytic {a:.6e}, numeric {n:.6e}"));
        }
    };

    let mut work: Vec<Tensor4<f64>> = inputs.to_vec();
    for (i, g) in analytic_inputs.iter().enumerate() {
        let n = work[i].data().len();
        for j in 0..n {
            let orig = work[i].data()[j];
            let probe = central_difference(
                |d| {
                    work[i].data_mut()[j] = orig + d;
                    let e = evaluate(&build, &work, params, &mut proj, opts.projection_seed);
                    work[i].data_mut()[j] = orig;
                    e
                },
                &base.regime,
                h,
            )?;
            let a = g.as_ref().map_or(0.0, |g| g[j]);
            record(format!("input {i}[{j}]"), a, probe, &mut report);
        }
    }

    let mut store = params.clone();
    let trainable: Vec<_> = params
        .iter()
        .filter(|(_, p)| p.requires_grad)
        .map(|(id, p)| (id, p.name.clone(), p.numel()))
        .collect();
    for (id, name, n) in trainable {
        let g = analytic_params.iter().find(|(pid, _)| *pid == id).map(|(_, g)| g);
        for j in 0..n {
            let orig = store.get(id).values[j];
            let probe = central_difference(
                |d| {
                    store.get_mut(id).values[j] = orig + d;
                    let e = evaluate(&build, inputs, &store, &mut proj, opts.projection_seed);
                    store.get_mut(id).values[j] = orig;
                    e
                },
                &base.regime,
                h,
            )?;
            let a = g.map_or(0.0, |g| g[j]);
            record(format!("{name}[{j}]"), a, probe, &mut report);
        }
    }

    let total = report.checked + report.skipped_kinks;
    let skip_ok = total > 0 && (report.skipped_kinks as f64) <= MAX_SKIP_FRACTION * total as f64;
    if !skip_ok && report.diagnostic.is_none() {
        report.diagnostic = Some(format!(
            "{} of {} coordinates sit on non-smooth points",
            report.skipped_kinks, total
        ));
    }
    report.pass = report.diagnostic.is_none()
        && skip_ok
        && report.checked > 0
        && report.max_rel_error < opts.tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fsm::{fsm_forward, CaVariant, FsmConfig, FsmParams, ShiftOffsets};
    use crate::ops::norm::Mode;
    use crate::param::{ParamRole, ParamTensor};
    use crate::tensor::Shape4;

    fn random(shape: Shape4, seed: u64) -> Tensor4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_vec(shape, (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn fsm_store(seed: u64) -> (ParamStore<f64>, crate::fsm::FsmSlots) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = FsmConfig {
            channels: 3,
            shift_channels: 2,
            ca_variant: CaVariant::SoftplusNormalized,
        };
        let mut p = FsmParams::<f64>::init(cfg, &mut rng);
        p.w_beta = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        p.offsets = ShiftOffsets::new(vec![0.3, -1.6], vec![1.2, 0.45]).unwrap();
        let mut store = ParamStore::new();
        let slots = p.register(&mut store, "m").unwrap();
        (store, slots)
    }

    #[test]
    fn fsm_gradients_match_differences() {
        let (store, slots) = fsm_store(3);
        let x = random(Shape4::new(2, 3, 4, 5), 11);
        let rep = finite_diff_gradcheck(
            |t, v| Ok(fsm_forward(t, v[0], &slots, CaVariant::SoftplusNormalized, Mode::Train)?.output),
            &[x],
            &store,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn doubled_backward_is_caught() {
        let (store, slots) = fsm_store(3);
        let x = random(Shape4::new(1, 3, 4, 4), 12);
        let rep = finite_diff_gradcheck(
            |t, v| Ok(fsm_forward(t, v[0], &slots, CaVariant::SoftplusNormalized, Mode::Eval)?.non_local),
            &[x],
            &store,
            GradCheckOptions {
                analytic_scale: 2.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(!rep.pass);
        assert!(rep.max_rel_error > 100.0 * DEFAULT_TOLERANCE, "{rep:?}");
    }

    #[test]
    fn conv_with_bias_passes() {
        let mut store = ParamStore::new();
        let g = crate::ops::conv::ConvGeom {
            in_channels: 2,
            out_channels: 3,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let w = random(Shape4::new(1, 1, 1, g.weight_len()), 5).into_vec();
        let w = store.insert(ParamTensor::new("w", vec![g.weight_len()], w, ParamRole::Weight)).unwrap();
        let b = store.insert(ParamTensor::new("b", vec![3], vec![0.1, -0.2, 0.3], ParamRole::Weight)).unwrap();
        let x = random(Shape4::new(2, 2, 5, 4), 6);
        let rep = finite_diff_gradcheck(|t, v| t.conv(v[0], w, Some(b), g), &[x], &store, GradCheckOptions::default()).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert_eq!(rep.skipped_kinks, 0);
    }

    #[test]
    fn non_finite_input_reports_failure() {
        let store = ParamStore::new();
        let mut x = random(Shape4::new(1, 1, 2, 2), 1);
        x.data_mut()[0] = f64::NAN;
        let rep = finite_diff_gradcheck(|t, v| Ok(t.relu(v[0])), &[x], &store, GradCheckOptions::default()).unwrap();
        assert!(!rep.pass);
        assert!(rep.diagnostic.is_some());
    }
}
