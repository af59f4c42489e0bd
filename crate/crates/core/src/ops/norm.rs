//! Batch and group normalization kernels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor4};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_GROUPS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    Group { groups: usize },
}

impl NormKind {
    /// Group norm with the default 32 groups, clamped to the channel count.
    pub fn group_for(channels: usize) -> Self {
        NormKind::Group {
            groups: DEFAULT_GROUPS.min(channels),
        }
    }

    pub fn check(&self, channels: usize) -> Result<()> {
        if let NormKind::Group { groups } = *self {
            if groups == 0 || channels % groups != 0 {
                return Err(Error::Config(format!(
                    "group count {groups} does not divide {channels} channels"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Saved forward context: normalized values and the inverse standard
/// deviation of each statistics group.
#[derive(Clone, Debug)]
pub struct NormCtx<T> {
    pub xhat: Tensor4<T>,
    pub inv_std: Vec<T>,
    /// `true` when the statistics depend on the input (train batch norm,
    /// any group norm).
    pub batch_stats: bool,
}

pub struct NormForward<T> {
    pub output: Tensor4<T>,
    pub ctx: NormCtx<T>,
    /// New running mean / variance when batch norm ran in train mode.
    pub running: Option<(Vec<T>, Vec<T>)>,
}

fn affine<T: Real>(xhat: &Tensor4<T>, gamma: &[T], beta: &[T]) -> Tensor4<T> {
    let s = xhat.shape();
    let mut out = Tensor4::zeros(s);
    for b in 0..s.batch {
        for c in 0..s.channels {
            let (g, be) = (gamma[c], beta[c]);
            for (o, &v) in out.plane_mut(b, c).iter_mut().zip(xhat.plane(b, c)) {
                *o = g * v + be;
            }
        }
    }
    out
}

pub fn batch_norm_forward<T: Real>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    mode: Mode,
) -> Result<NormForward<T>> {
    let s = x.shape();
    for (name, len) in [
        ("batch-norm scale", gamma.len()),
        ("batch-norm offset", beta.len()),
        ("running mean", running_mean.len()),
        ("running variance", running_var.len()),
    ] {
        if len != s.channels {
            return Err(Error::dim(name, s.channels, len));
        }
    }
    let eps = T::c(NORM_EPS);
    let mut xhat = Tensor4::zeros(s);
    let mut inv_std = vec![T::zero(); s.channels];
    let mut running = None;
    match mode {
        Mode::Eval => {
            for c in 0..s.channels {
                let is = T::one() / (running_var[c] + eps).sqrt();
                inv_std[c] = is;
                let m = running_mean[c];
                for b in 0..s.batch {
                    for (o, &v) in xhat.plane_mut(b, c).iter_mut().zip(x.plane(b, c)) {
                        *o = (v - m) * is;
                    }
                }
            }
        }
        Mode::Train => {
            let n = s.batch * s.plane();
            let nt = T::from_usize(n);
            let mom = T::c(BN_MOMENTUM);
            let mut rm = running_mean.to_vec();
            let mut rv = running_var.to_vec();
            for c in 0..s.channels {
                let mut sum = T::zero();
                for b in 0..s.batch {
                    sum += x.plane(b, c).iter().copied().sum::<T>();
                }
                let mean = sum / nt;
                let mut sq = T::zero();
                for b in 0..s.batch {
                    for &v in x.plane(b, c) {
                        sq += (v - mean) * (v - mean);
                    }
                }
                let var = sq / nt;
                let is = T::one() / (var + eps).sqrt();
                inv_std[c] = is;
                for b in 0..s.batch {
                    for (o, &v) in xhat.plane_mut(b, c).iter_mut().zip(x.plane(b, c)) {
                        *o = (v - mean) * is;
                    }
                }
                let unbiased = if n > 1 {
                    sq / T::from_usize(n - 1)
                } else {
                    var
                };
                rm[c] = (T::one() - mom) * rm[c] + mom * mean;
                rv[c] = (T::one() - mom) * rv[c] + mom * unbiased;
            }
            running = Some((rm, rv));
        }
    }
    Ok(NormForward {
        output: affine(&xhat, gamma, beta),
        ctx: NormCtx {
            xhat,
            inv_std,
            batch_stats: mode == Mode::Train,
        },
        running,
    })
}

pub fn group_norm_forward<T: Real>(
    x: &Tensor4<T>,
    groups: usize,
    gamma: &[T],
    beta: &[T],
) -> Result<NormForward<T>> {
    let s = x.shape();
    NormKind::Group { groups }.check(s.channels)?;
    if gamma.len() != s.channels {
        return Err(Error::dim("group-norm scale", s.channels, gamma.len()));
    }
    if beta.len() != s.channels {
        return Err(Error::dim("group-norm offset", s.channels, beta.len()));
    }
    let eps = T::c(NORM_EPS);
    let cpg = s.channels / groups;
    let n = cpg * s.plane();
    let nt = T::from_usize(n);
    let mut xhat = Tensor4::zeros(s);
    let mut inv_std = vec![T::zero(); s.batch * groups];
    for b in 0..s.batch {
        for g in 0..groups {
            let start = s.index(b, g * cpg, 0, 0);
            let src = &x.data()[start..start + n];
            let mean = src.iter().copied().sum::<T>() / nt;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let is = T::one() / (var + eps).sqrt();
            inv_std[b * groups + g] = is;
            let dst = &mut xhat.data_mut()[start..start + n];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = (v - mean) * is;
            }
        }
    }
    Ok(NormForward {
        output: affine(&xhat, gamma, beta),
        ctx: NormCtx {
            xhat,
            inv_std,
            batch_stats: true,
        },
        running: None,
    })
}

pub struct NormGrads<T> {
    pub input: Tensor4<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub fn batch_norm_backward<T: Real>(ctx: &NormCtx<T>, gamma: &[T], dy: &Tensor4<T>) -> NormGrads<T> {
    let s = dy.shape();
    let mut dx = Tensor4::zeros(s);
    let mut dgamma = vec![T::zero(); s.channels];
    let mut dbeta = vec![T::zero(); s.channels];
    let nt = T::from_usize(s.batch * s.plane());
    for c in 0..s.channels {
        let (mut sdy, mut sdyx) = (T::zero(), T::zero());
        for b in 0..s.batch {
            for (&g, &xh) in dy.plane(b, c).iter().zip(ctx.xhat.plane(b, c)) {
                sdy += g;
                sdyx += g * xh;
            }
        }
        dgamma[c] = sdyx;
        dbeta[c] = sdy;
        let k = gamma[c] * ctx.inv_std[c];
        for b in 0..s.batch {
            let xh = ctx.xhat.plane(b, c);
            let g = dy.plane(b, c);
            let d = dx.plane_mut(b, c);
            if ctx.batch_stats {
                for i in 0..d.len() {
                    d[i] = k * (g[i] - sdy / nt - xh[i] * sdyx / nt);
                }
            } else {
                for i in 0..d.len() {
                    d[i] = k * g[i];
                }
            }
        }
    }
    NormGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}

pub fn group_norm_backward<T: Real>(
    ctx: &NormCtx<T>,
    groups: usize,
    gamma: &[T],
    dy: &Tensor4<T>,
) -> NormGrads<T> {
    let s = dy.shape();
    let mut dx = Tensor4::zeros(s);
    let mut dgamma = vec![T::zero(); s.channels];
    let mut dbeta = vec![T::zero(); s.channels];
    for b in 0..s.batch {
        for c in 0..s.channels {
            for (&g, &xh) in dy.plane(b, c).iter().zip(ctx.xhat.plane(b, c)) {
                dgamma[c] += g * xh;
                dbeta[c] += g;
            }
        }
    }
    let cpg = s.channels / groups;
    let p = s.plane();
    let nt = T::from_usize(cpg * p);
    for b in 0..s.batch {
        for g in 0..groups {
            // g_hat = dy * gamma within the group
            let (mut sg, mut sgx) = (T::zero(), T::zero());
            for c in g * cpg..(g + 1) * cpg {
                let gm = gamma[c];
                for (&d, &xh) in dy.plane(b, c).iter().zip(ctx.xhat.plane(b, c)) {
                    sg += d * gm;
                    sgx += d * gm * xh;
                }
            }
            let is = ctx.inv_std[b * groups + g];
            for c in g * cpg..(g + 1) * cpg {
                let gm = gamma[c];
                let xh = ctx.xhat.plane(b, c).to_vec();
                let d = dy.plane(b, c).to_vec();
                let out = dx.plane_mut(b, c);
                for i in 0..p {
                    out[i] = is * (d[i] * gm - sg / nt - xh[i] * sgx / nt);
                }
            }
        }
    }
    NormGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    #[test]
    fn eval_batch_norm_with_unit_stats_is_near_identity() {
        let x = Tensor4::<f64>::from_vec(Shape4::new(2, 2, 2, 2), (0..16).map(|i| i as f64 - 7.5).collect()).unwrap();
        let out = batch_norm_forward(&x, &[1.0, 1.0], &[0.0, 0.0], &[0.0, 0.0], &[1.0, 1.0], Mode::Eval).unwrap();
        let scale = 1.0 / (1.0 + NORM_EPS).sqrt();
        for (o, i) in out.output.data().iter().zip(x.data()) {
            assert!((o - i * scale).abs() < 1e-15);
            assert!((o - i).abs() <= 7.5 * 1e-5);
        }
        assert!(out.running.is_none());
    }

    #[test]
    fn group_norm_on_constant_map_is_zero() {
        let x = Tensor4::<f64>::filled(Shape4::new(1, 4, 3, 3), 2.5);
        let out = group_norm_forward(&x, 1, &[1.0; 4], &[0.0; 4]).unwrap();
        assert!(out.output.data().iter().all(|&v| v == 0.0));
        assert!(out.output.all_finite());
    }

    #[test]
    fn indivisible_groups_is_config_error() {
        let x = Tensor4::<f64>::zeros(Shape4::new(1, 6, 2, 2));
        let err = group_norm_forward(&x, 4, &[1.0; 6], &[0.0; 6]).err().unwrap();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn default_groups_clamp_to_channels() {
        assert_eq!(NormKind::group_for(256), NormKind::Group { groups: 32 });
        assert_eq!(NormKind::group_for(8), NormKind::Group { groups: 8 });
    }

    #[test]
    fn train_batch_norm_updates_running_stats() {
        let x = Tensor4::<f64>::from_vec(Shape4::new(2, 1, 1, 2), vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let out = batch_norm_forward(&x, &[1.0], &[0.0], &[0.0], &[1.0], Mode::Train).unwrap();
        let (rm, rv) = out.running.unwrap();
        // mean 4, unbiased var 20/3
        assert!((rm[0] - 0.4).abs() < 1e-12);
        assert!((rv[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
        let mean: f64 = out.output.data().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }
}
