//! Diagnostics over a trained model: keypoint-to-shifting-channel scores,
//! effective receptive fields and offset/window-energy exports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::fsm::export::{fmt_sig9, offset_rows, OffsetRow};
use crate::fsm::oracle::{attention_direct, window_weights};
use crate::ops::norm::Mode;
use crate::posenet::Model;
use crate::tensor::{Real, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreNorm {
    /// Divide each shifting channel's column by its largest score.
    #[default]
    Max,
    /// Divide each column by its sum.
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreOptions {
    pub normalization: ScoreNorm,
    /// Average absolute gradients; signed averages otherwise.
    pub magnitude: bool,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            normalization: ScoreNorm::Max,
            magnitude: true,
        }
    }
}

/// `M x K` keypoint-vs-shifting-channel scores of one module.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreMatrix {
    pub module_id: String,
    pub keypoints: usize,
    pub shift_channels: usize,
    /// Row-major `[M, K]`.
    pub values: Vec<f64>,
    pub normalization: ScoreNorm,
}

impl ScoreMatrix {
    pub fn get(&self, m: usize, k: usize) -> f64 {
        self.values[m * self.shift_channels + k]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("module_id,keypoint,k,score\n");
        for m in 0..self.keypoints {
            for k in 0..self.shift_channels {
                let _ = writeln!(out, "{},{m},{k},{}", self.module_id, fmt_sig9(self.get(m, k)));
            }
        }
        out
    }
}

/// For every keypoint `m`: zero the peak of prediction channel `m` in a
/// copy of the predictions, back-propagate the squared error between the
/// predictions and that copy to the post-shifting maps of `module_id`,
/// and average the gradient over samples and positions per shifting
/// channel. Columns are then normalized per `opts`.
pub fn keypoint_offset_scores<T: Real>(
    model: &Model<T>,
    batch: &Tensor4<T>,
    module_id: &str,
    opts: ScoreOptions,
) -> Result<ScoreMatrix> {
    if !model.is_fsm_active(module_id) {
        return Err(Error::Argument(format!("`{module_id}` is not an active FSM")));
    }
    let mut tape = Tape::new(&model.store);
    let x = tape.constant(batch.clone());
    let trace = model.forward(&mut tape, x, Mode::Eval)?;
    let taps = trace.fsm[module_id];
    let pred = tape.value(trace.head).clone();
    let ps = pred.shape();
    let k_n = tape.shape(taps.post_shift).channels;
    let m_n = ps.channels;
    if pred.data().iter().all(|v| *v == T::zero()) {
        log::warn!("all-zero predictions: keypoint scores are zero");
    }
    let mut values = vec![0.0; m_n * k_n];
    let scale = T::c(2.0 / ps.numel() as f64);
    for m in 0..m_n {
        // d/dpred of mean((pred - modified)^2): nonzero only at each peak.
        let mut seed = Tensor4::zeros(ps);
        for b in 0..ps.batch {
            let plane = pred.plane(b, m);
            let mut best = 0;
            for (i, &v) in plane.iter().enumerate() {
                if v > plane[best] {
                    best = i;
                }
            }
            seed.plane_mut(b, m)[best] = scale * plane[best];
        }
        let grads = tape.backward_from(&[(trace.head, seed)])?;
        let Some(g) = grads.node(taps.post_shift) else { continue };
        let gs = g.shape();
        let n = (gs.batch * gs.height * gs.width) as f64;
        for k in 0..k_n {
            let mut acc = 0.0;
            for b in 0..gs.batch {
                for &v in g.plane(b, k) {
                    let v = v.to_f64();
                    acc += if opts.magnitude { v.abs() } else { v };
                }
            }
            values[m * k_n + k] = acc / n;
        }
    }
    for k in 0..k_n {
        let col = (0..m_n).map(|m| values[m * k_n + k]);
        let denom = match opts.normalization {
            ScoreNorm::Max => col.fold(0.0f64, |a, v| a.max(v.abs())),
            ScoreNorm::Sum => col.map(f64::abs).sum(),
        };
        if denom > 0.0 {
            for m in 0..m_n {
                values[m * k_n + k] /= denom;
            }
        }
    }
    Ok(ScoreMatrix {
        module_id: module_id.to_string(),
        keypoints: m_n,
        shift_channels: k_n,
        values,
        normalization: opts.normalization,
    })
}

/// Per keypoint, the number of shifting channels scoring at least
/// `threshold`.
pub fn contribution_counts(scores: &ScoreMatrix, threshold: f64) -> Vec<usize> {
    (0..scores.keypoints)
        .map(|m| (0..scores.shift_channels).filter(|&k| scores.get(m, k) >= threshold).count())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErfMap {
    pub module_id: String,
    pub channel: usize,
    pub position: (usize, usize),
    pub height: usize,
    pub width: usize,
    /// Row-major `[H, W]` over the network input.
    pub values: Vec<f64>,
}

impl ErfMap {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Position of the largest value; ties go to the lowest `(y, x)`.
    pub fn peak(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,value\n");
        for y in 0..self.height {
            for x in 0..self.width {
                let _ = writeln!(out, "{x},{y},{}", fmt_sig9(self.at(x, y)));
            }
        }
        out
    }
}

/// Unit gradient at `(channel, position)` of the non-local map of
/// `module_id` for the first sample, back-propagated to the input and
/// squared-summed over input channels.
pub fn erf_map<T: Real>(
    model: &Model<T>,
    input: &Tensor4<T>,
    module_id: &str,
    channel: usize,
    position: (usize, usize),
) -> Result<ErfMap> {
    if !model.is_fsm_active(module_id) {
        return Err(Error::Argument(format!("`{module_id}` is not an active FSM")));
    }
    let mut tape = Tape::new(&model.store);
    let x = tape.input(input.clone());
    let trace = model.forward(&mut tape, x, Mode::Eval)?;
    let nl = trace.fsm[module_id].non_local;
    let s = tape.shape(nl);
    let (px, py) = position;
    if channel >= s.channels || px >= s.width || py >= s.height {
        return Err(Error::Argument(format!(
            "seed ({channel}, {px}, {py}) outside the {}x{}x{} non-local map",
            s.channels, s.height, s.width
        )));
    }
    let mut seed = Tensor4::zeros(s);
    seed.set(0, channel, py, px, T::one());
    let grads = tape.backward_from(&[(nl, seed)])?;
    let is = input.shape();
    let mut values = vec![0.0; is.height * is.width];
    if let Some(g) = grads.node(x) {
        for c in 0..is.channels {
            for (v, &gv) in values.iter_mut().zip(g.plane(0, c)) {
                *v += gv.to_f64().powi(2);
            }
        }
    }
    Ok(ErfMap {
        module_id: module_id.to_string(),
        channel,
        position,
        height: is.height,
        width: is.width,
        values,
    })
}

/// Offset rows of every FSM in graph order.
pub fn export_offsets<T: Real>(model: &Model<T>) -> Result<Vec<OffsetRow>> {
    let ids = model.graph.fsm_ids();
    if ids.is_empty() {
        return Err(Error::Argument("model has no FSM".into()));
    }
    let mut rows = Vec::new();
    for id in ids {
        rows.extend(offset_rows(&id, &model.fsm_params(&id)?.offsets));
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnergyRow {
    pub module_id: String,
    pub c: usize,
    pub x: usize,
    pub y: usize,
    pub k: usize,
    pub dx: f64,
    pub dy: f64,
    /// Factored form `(w_beta[c,k] F_k)^2 sum_c' w_alpha[k,c']^2`.
    pub energy: f64,
    /// Sum of squares of the explicit induced weights `w_fsm[c,k,:]`.
    pub energy_explicit: f64,
}

/// Window energies `sum_c' (w_beta[c,k] w_alpha[k,c'] F_k(x,y))^2` of FSM
/// `module_id` for output channel `c` at `(x, y)` of the first sample.
pub fn window_energies<T: Real>(
    model: &Model<T>,
    input: &Tensor4<T>,
    module_id: &str,
    c: usize,
    (x, y): (usize, usize),
) -> Result<Vec<EnergyRow>> {
    if !model.is_fsm_active(module_id) {
        return Err(Error::Argument(format!("`{module_id}` is not an active FSM")));
    }
    let params = model.fsm_params(module_id)?;
    let mut tape = Tape::new(&model.store);
    let xin = tape.constant(input.clone());
    let trace = model.forward(&mut tape, xin, Mode::Eval)?;
    let p = tape.value(trace.fsm[module_id].input).sample(0);
    let s = p.shape();
    let (c_n, k_n) = (params.channels(), params.shift_channels());
    if c >= c_n || x >= s.width || y >= s.height {
        return Err(Error::Argument(format!(
            "({c}, {x}, {y}) outside the {c_n}x{}x{} FSM input",
            s.height, s.width
        )));
    }
    let f = attention_direct(&p, &params);
    let gate: Vec<T> = (0..k_n).map(|k| f.at(0, k, y, x)).collect();
    let explicit = window_weights(&params, &gate);
    Ok((0..k_n)
        .map(|k| {
            let bf = params.w_beta[c * k_n + k].to_f64() * gate[k].to_f64();
            let alpha_sq: f64 = (0..c_n).map(|cp| params.w_alpha[k * c_n + cp].to_f64().powi(2)).sum();
            let row = &explicit[(c * k_n + k) * c_n..(c * k_n + k + 1) * c_n];
            EnergyRow {
                module_id: module_id.to_string(),
                c,
                x,
                y,
                k,
                dx: params.offsets.dx[k].to_f64(),
                dy: params.offsets.dy[k].to_f64(),
                energy: bf * bf * alpha_sq,
                energy_explicit: row.iter().map(|&w| Real::to_f64(w).powi(2)).sum(),
            }
        })
        .collect())
}

pub fn energy_csv(rows: &[EnergyRow]) -> String {
    let mut out = String::from("module_id,c,x,y,k,dx,dy,energy\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.module_id,
            r.c,
            r.x,
            r.y,
            r.k,
            fmt_sig9(r.dx),
            fmt_sig9(r.dy),
            fmt_sig9(r.energy)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fsm::{CaVariant, FsmConfig, FsmParams, ShiftOffsets};
    use crate::ops::conv::ConvGeom;
    use crate::posenet::{InputSpec, Layer, LayerKind, NetworkGraph};
    use crate::tensor::Shape4;

    const H: usize = 9;
    const W: usize = 11;

    /// `fsm -> 1x1 conv head` over a `c`-channel input.
    fn fsm_head_model(c: usize, k: usize, variant: CaVariant) -> Model<f64> {
        let graph = NetworkGraph::new(
            InputSpec {
                channels: c,
                height: H,
                width: W,
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
        let mut model = Model::init(graph, 3).unwrap();
        model.set_fsm_active("fsm1", true).unwrap();
        model
    }

    fn set_params(model: &mut Model<f64>, edit: impl FnOnce(&mut FsmParams<f64>)) {
        let mut p = model.fsm_params("fsm1").unwrap();
        edit(&mut p);
        model.set_fsm_params("fsm1", &p).unwrap();
    }

    fn single_path(k: usize, wired: usize) -> Model<f64> {
        let mut model = fsm_head_model(2, k, CaVariant::SoftplusNormalized);
        set_params(&mut model, |p| {
            p.w_alpha.iter_mut().for_each(|w| *w = 0.5);
            p.w_beta = (0..2 * k).map(|i| if i % k == wired { 1.0 } else { 0.0 }).collect();
        });
        let head = model.store.by_name_mut("head.w").unwrap();
        head.values = vec![1.0, 1.0];
        model
    }

    fn positive_batch() -> Tensor4<f64> {
        Tensor4::uniform(Shape4::new(2, 2, H, W), 0.1, 1.0, 11)
    }

    #[test]
    fn single_path_model_scores_one_channel() {
        let model = single_path(4, 2);
        let s = keypoint_offset_scores(&model, &positive_batch(), "fsm1", ScoreOptions::default()).unwrap();
        assert_eq!((s.keypoints, s.shift_channels), (1, 4));
        assert_eq!(s.values, vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(contribution_counts(&s, 0.5), vec![1]);
        assert_eq!(contribution_counts(&s, 1.5), vec![0]);
    }

    #[test]
    fn severed_branch_scores_zero() {
        let mut model = single_path(3, 0);
        set_params(&mut model, |p| p.w_beta.iter_mut().for_each(|w| *w = 0.0));
        let s = keypoint_offset_scores(&model, &positive_batch(), "fsm1", ScoreOptions::default()).unwrap();
        assert!(s.values.iter().all(|&v| v == 0.0));
        assert_eq!(contribution_counts(&s, 0.0), vec![3]);
    }

    #[test]
    fn scores_survive_head_rescaling() {
        let mut model = fsm_head_model(3, 4, CaVariant::SoftplusNormalized);
        set_params(&mut model, |p| {
            p.w_beta = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
            p.offsets = ShiftOffsets::new(vec![0.4, -1.3, 2.0, 0.0], vec![1.1, 0.2, -0.6, 0.9]).unwrap();
        });
        let batch = Tensor4::uniform(Shape4::new(2, 3, H, W), -1.0, 1.0, 5);
        let a = keypoint_offset_scores(&model, &batch, "fsm1", ScoreOptions::default()).unwrap();
        for name in ["head.w", "head.b"] {
            let p = model.store.by_name_mut(name).unwrap();
            p.values.iter_mut().for_each(|v| *v *= 7.5);
        }
        let b = keypoint_offset_scores(&model, &batch, "fsm1", ScoreOptions::default()).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
        assert!(a.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn scores_require_active_module() {
        let mut model = single_path(2, 0);
        model.set_fsm_active("fsm1", false).unwrap();
        assert!(keypoint_offset_scores(&model, &positive_batch(), "fsm1", ScoreOptions::default()).is_err());
    }

    fn erf_model(d: f64) -> Model<f64> {
        let mut model = fsm_head_model(1, 1, CaVariant::SigmoidUnnormalized);
        set_params(&mut model, |p| {
            p.w_alpha = vec![1.0];
            p.w_beta = vec![1.0];
            p.w_f = vec![0.05];
            p.offsets = ShiftOffsets::new(vec![d], vec![0.0]).unwrap();
        });
        model
    }

    #[test]
    fn erf_peaks_at_offset_distance() {
        let model = erf_model(3.0);
        let input = Tensor4::uniform(Shape4::new(1, 1, H, W), -1.0, 1.0, 2);
        let map = erf_map(&model, &input, "fsm1", 0, (7, 4)).unwrap();
        assert_eq!(map.peak(), (4, 4));
        assert!(map.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn erf_of_pointwise_conv_is_the_seed_pixel() {
        let mut model = erf_model(0.0);
        set_params(&mut model, |p| p.w_f = vec![0.0]);
        let input = Tensor4::uniform(Shape4::new(1, 1, H, W), -1.0, 1.0, 2);
        let map = erf_map(&model, &input, "fsm1", 0, (2, 6)).unwrap();
        for y in 0..H {
            for x in 0..W {
                assert_eq!(map.at(x, y) > 0.0, (x, y) == (2, 6), "({x}, {y})");
            }
        }
    }

    #[test]
    fn erf_of_zero_model_is_zero() {
        let mut model = erf_model(2.0);
        set_params(&mut model, |p| {
            p.w_alpha = vec![0.0];
            p.w_beta = vec![0.0];
            p.w_f = vec![0.0];
        });
        let input = Tensor4::uniform(Shape4::new(1, 1, H, W), -1.0, 1.0, 2);
        let map = erf_map(&model, &input, "fsm1", 0, (5, 5)).unwrap();
        assert!(map.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn erf_rejects_out_of_bounds_seed() {
        let model = erf_model(1.0);
        let input = Tensor4::zeros(Shape4::new(1, 1, H, W));
        assert!(matches!(erf_map(&model, &input, "fsm1", 0, (W, 0)), Err(Error::Argument(_))));
        assert!(matches!(erf_map(&model, &input, "fsm1", 1, (0, 0)), Err(Error::Argument(_))));
    }

    #[test]
    fn energies_agree_both_ways() {
        let mut model = fsm_head_model(3, 5, CaVariant::SoftplusNormalized);
        set_params(&mut model, |p| p.w_beta = (0..15).map(|i| (i as f64 * 0.71).cos()).collect());
        let input = Tensor4::uniform(Shape4::new(1, 3, H, W), -1.0, 1.0, 8);
        let rows = window_energies(&model, &input, "fsm1", 1, (3, 2)).unwrap();
        assert_eq!(rows.len(), 5);
        for r in &rows {
            assert!((r.energy - r.energy_explicit).abs() < 1e-9, "{r:?}");
        }
        assert_eq!(energy_csv(&rows).lines().count(), 6);
    }

    #[test]
    fn fresh_offsets_stay_in_init_range() {
        let model = fsm_head_model(2, 6, CaVariant::SoftplusNormalized);
        let rows = export_offsets(&model).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.dx.abs() <= 1.0 && r.dy.abs() <= 1.0));
    }
}
