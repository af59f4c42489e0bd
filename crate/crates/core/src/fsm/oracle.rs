//! Explicit-convolution evaluation of the feature shifting module.
//!
//! Each output channel is the input plus a convolution whose window
//! positions are the `K` offsets and whose weights
//! `w_fsm[c,k,c'](x,y) = w_beta[c,k] * w_alpha[k,c'] * F_k(x,y)`
//! vary with position through the attention. Cost is `O(B * C^2 * K * H * W)`,
//! so this is for small tensors only. Nothing here goes through the tape.

use crate::error::{Error, Result};
use crate::ops::activation::Activation;
use crate::ops::norm::{Mode, NORM_EPS};
use crate::tensor::{bilinear_sample, Real, Tensor4};

use super::FsmParams;

/// Attention maps `[B, K, H, W]` computed with direct loops.
pub fn attention_direct<T: Real>(p: &Tensor4<T>, params: &FsmParams<T>) -> Tensor4<T> {
    let s = p.shape();
    let (c_in, k_n) = (params.channels(), params.shift_channels());
    let act: Activation = params.ca_variant.activation();
    let mut f = Tensor4::zeros(s.with_channels(k_n));
    for b in 0..s.batch {
        for k in 0..k_n {
            for y in 0..s.height {
                for x in 0..s.width {
                    let mut z = T::zero();
                    for c in 0..c_in {
                        z += params.w_f[k * c_in + c] * p.at(b, c, y, x);
                    }
                    f.set(b, k, y, x, act.apply(z));
                }
            }
            if params.ca_variant.normalized() {
                let total: T = f.plane(b, k).iter().copied().sum();
                for v in f.plane_mut(b, k) {
                    *v /= total;
                }
            }
        }
    }
    f
}

/// Induced convolution weights at one position, laid out `[C, K, C']`.
pub fn window_weights<T: Real>(params: &FsmParams<T>, gate: &[T]) -> Vec<T> {
    let (c_n, k_n) = (params.channels(), params.shift_channels());
    let mut w = Vec::with_capacity(c_n * k_n * c_n);
    for c in 0..c_n {
        for (k, &g) in gate.iter().enumerate().take(k_n) {
            let beta = params.w_beta[c * k_n + k];
            for cp in 0..c_n {
                w.push(beta * params.w_alpha[k * c_n + cp] * g);
            }
        }
    }
    w
}

/// `P + sum_k sum_c' w_fsm[c,k,c'] * P*_c'(x - dx_k, y - dy_k)`.
pub fn pre_activation<T: Real>(p: &Tensor4<T>, params: &FsmParams<T>) -> Result<Tensor4<T>> {
    params.validate()?;
    let s = p.shape();
    if s.channels != params.channels() {
        return Err(Error::dim("FSM input channels", params.channels(), s.channels));
    }
    let (c_n, k_n) = (params.channels(), params.shift_channels());
    let f = attention_direct(p, params);
    let mut out = p.clone();
    let mut gate = vec![T::zero(); k_n];
    for b in 0..s.batch {
        for y in 0..s.height {
            for x in 0..s.width {
                for (k, g) in gate.iter_mut().enumerate() {
                    *g = f.at(b, k, y, x);
                }
                let w = window_weights(params, &gate);
                for c in 0..c_n {
                    let mut acc = T::zero();
                    for k in 0..k_n {
                        let sx = T::from_usize(x) - params.offsets.dx[k];
                        let sy = T::from_usize(y) - params.offsets.dy[k];
                        for cp in 0..c_n {
                            let wv = w[(c * k_n + k) * c_n + cp];
                            acc += wv * bilinear_sample(p.plane(b, cp), s.height, s.width, sx, sy);
                        }
                    }
                    out.set(b, c, y, x, out.at(b, c, y, x) + acc);
                }
            }
        }
    }
    Ok(out)
}

pub fn fsm_oracle<T: Real>(p: &Tensor4<T>, params: &FsmParams<T>, mode: Mode) -> Result<Tensor4<T>> {
    let z = pre_activation(p, params)?;
    let s = z.shape();
    let eps = T::c(NORM_EPS);
    let mut q = Tensor4::zeros(s);
    for c in 0..s.channels {
        let (mean, var) = match mode {
            Mode::Eval => (params.running_mean[c], params.running_var[c]),
            Mode::Train => {
                let n = T::from_usize(s.batch * s.plane());
                let mut m = T::zero();
                for b in 0..s.batch {
                    for &v in z.plane(b, c) {
                        m += v;
                    }
                }
                m /= n;
                let mut v2 = T::zero();
                for b in 0..s.batch {
                    for &v in z.plane(b, c) {
                        v2 += (v - m) * (v - m);
                    }
                }
                (m, v2 / n)
            }
        };
        let denom = (var + eps).sqrt();
        for b in 0..s.batch {
            for y in 0..s.height {
                for x in 0..s.width {
                    let v = params.norm_scale[c] * (z.at(b, c, y, x) - mean) / denom + params.norm_offset[c];
                    q.set(b, c, y, x, v.max(T::zero()));
                }
            }
        }
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fsm::{CaVariant, FsmConfig, ShiftOffsets};
    use crate::tensor::Shape4;

    #[test]
    fn zero_attention_leaves_normalized_input() {
        let cfg = FsmConfig {
            channels: 2,
            shift_channels: 2,
            ca_variant: CaVariant::SigmoidUnnormalized,
        };
        let mut p = FsmParams::<f64>::zeros(cfg);
        p.w_alpha = vec![1.0, 2.0, 3.0, 4.0];
        p.w_beta = vec![1.0, -1.0, 0.5, 2.0];
        // a very negative sigmoid logit drives F to 0 up to rounding
        p.w_f = vec![-1e3, 0.0, -1e3, 0.0];
        let x = Tensor4::filled(Shape4::new(1, 2, 3, 3), 1.0);
        let q = fsm_oracle(&x, &p, Mode::Eval).unwrap();
        let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!(q.data().iter().all(|&v| (v - scale).abs() < 1e-12));
    }

    #[test]
    fn integer_offset_full_gate_is_translated_rank_one_conv() {
        // K = 1, F = 1 everywhere: P + w_beta w_alpha^T translate(P)
        let cfg = FsmConfig {
            channels: 2,
            shift_channels: 1,
            ca_variant: CaVariant::SigmoidUnnormalized,
        };
        let mut p = FsmParams::<f64>::zeros(cfg);
        p.w_alpha = vec![0.5, -1.0];
        p.w_beta = vec![2.0, 3.0];
        p.w_f = vec![1e3, 0.0];
        p.offsets = ShiftOffsets::new(vec![1.0], vec![-1.0]).unwrap();
        let s = Shape4::new(1, 2, 3, 4);
        let x = Tensor4::from_vec(s, (0..s.numel()).map(|i| 1.0 + (i % 5) as f64).collect()).unwrap();
        let z = pre_activation(&x, &p).unwrap();
        for c in 0..2 {
            for y in 0..3 {
                for xx in 0..4 {
                    let (sy, sx) = (y as isize + 1, xx as isize - 1);
                    let moved = if (0..3).contains(&sy) && (0..4).contains(&sx) {
                        0.5 * x.at(0, 0, sy as usize, sx as usize) - x.at(0, 1, sy as usize, sx as usize)
                    } else {
                        0.0
                    };
                    let e = x.at(0, c, y, xx) + p.w_beta[c] * moved;
                    assert!((z.at(0, c, y, xx) - e).abs() < 1e-12);
                }
            }
        }
    }
}
