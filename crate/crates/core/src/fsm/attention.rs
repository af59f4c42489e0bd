//! Correlation attention: a per-position, per-shifting-channel gate
//! predicted from the module input.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::ops::activation::Activation;
use crate::param::ParamId;
use crate::tensor::{Real, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CaVariant {
    /// Softplus gate divided by its spatial sum per (sample, channel).
    #[default]
    SoftplusNormalized,
    /// Sigmoid gate without spatial normalization.
    SigmoidUnnormalized,
}

impl CaVariant {
    pub fn activation(self) -> Activation {
        match self {
            CaVariant::SoftplusNormalized => Activation::Softplus,
            CaVariant::SigmoidUnnormalized => Activation::Sigmoid,
        }
    }

    pub fn normalized(self) -> bool {
        matches!(self, CaVariant::SoftplusNormalized)
    }
}

/// Records the attention branch on the tape; returns `F` with shape
/// `[B, K, H, W]`.
pub fn ca_forward<T: Real>(tape: &mut Tape<'_, T>, input: Var, w_f: ParamId, variant: CaVariant) -> Result<Var> {
    let logits = tape.conv1x1(input, w_f, None)?;
    let f = tape.activation(logits, variant.activation());
    Ok(if variant.normalized() {
        tape.spatial_normalize(f)
    } else {
        f
    })
}

/// Divides every (sample, channel) plane by its sum. Returns the output and
/// the sums.
pub fn spatial_normalize_forward<T: Real>(x: &Tensor4<T>) -> (Tensor4<T>, Vec<T>) {
    let s = x.shape();
    let mut out = Tensor4::zeros(s);
    let mut sums = Vec::with_capacity(s.batch * s.channels);
    for b in 0..s.batch {
        for c in 0..s.channels {
            let total: T = x.plane(b, c).iter().copied().sum();
            sums.push(total);
            for (o, &v) in out.plane_mut(b, c).iter_mut().zip(x.plane(b, c)) {
                *o = v / total;
            }
        }
    }
    (out, sums)
}

pub fn spatial_normalize_backward<T: Real>(y: &Tensor4<T>, sums: &[T], dy: &Tensor4<T>) -> Tensor4<T> {
    let s = y.shape();
    let mut dx = Tensor4::zeros(s);
    for b in 0..s.batch {
        for c in 0..s.channels {
            let total = sums[b * s.channels + c];
            let yp = y.plane(b, c);
            let gp = dy.plane(b, c);
            let proj: T = gp.iter().zip(yp).map(|(&g, &v)| g * v).sum();
            for (d, &g) in dx.plane_mut(b, c).iter_mut().zip(gp) {
                *d = (g - proj) / total;
            }
        }
    }
    dx
}
