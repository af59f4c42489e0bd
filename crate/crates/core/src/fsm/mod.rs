//! Feature shifting module.
//!
//! The module projects `C` input channels to `K` shifting channels with a
//! 1x1 convolution (`w_alpha`), translates each shifting channel by its own
//! learnable fractional offset, gates the result with correlation attention
//! predicted from the input (`w_f`), projects back to `C` channels
//! (`w_beta`) and adds the shortcut:
//!
//! ```text
//! R = w_alpha * P          S_k(x, y) = R_k*(x - dx_k, y - dy_k)
//! F = ca(P; w_f)           N = w_beta * (F . S)
//! Q = relu(batchnorm(P + N))
//! ```
//!
//! `N` is called the non-local map. [`oracle::fsm_oracle`] evaluates the
//! same function through the explicit, attention-modulated convolution
//! weights and serves as a correctness check of this factored path.

pub mod attention;
pub mod cost;
pub mod export;
pub mod oracle;
pub mod shift;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormSlots, Tape, Var};
use crate::error::{Error, Result};
use crate::ops::norm::Mode;
use crate::param::{ParamId, ParamRole, ParamStore, ParamTensor};
use crate::tensor::{Real, Tensor4};

pub use attention::{ca_forward, CaVariant};
pub use cost::{fsm_param_count, FsmCost};
pub use shift::{shift_backward, shift_forward, ShiftOffsets};

/// Range of the uniform offset initialization, in pixels.
pub const OFFSET_INIT_RANGE: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FsmConfig {
    /// Backbone channels `C`.
    pub channels: usize,
    /// Shifting channels `K`.
    pub shift_channels: usize,
    #[serde(default)]
    pub ca_variant: CaVariant,
}

/// Plain-value parameters of one module.
#[derive(Clone, Debug, PartialEq)]
pub struct FsmParams<T> {
    /// `[K, C]`
    pub w_alpha: Vec<T>,
    /// `[C, K]`
    pub w_beta: Vec<T>,
    /// `[K, C]`
    pub w_f: Vec<T>,
    pub offsets: ShiftOffsets<T>,
    pub norm_scale: Vec<T>,
    pub norm_offset: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub ca_variant: CaVariant,
}

impl<T: Real> FsmParams<T> {
    pub fn channels(&self) -> usize {
        self.norm_scale.len()
    }

    pub fn shift_channels(&self) -> usize {
        self.offsets.len()
    }

    pub fn config(&self) -> FsmConfig {
        FsmConfig {
            channels: self.channels(),
            shift_channels: self.shift_channels(),
            ca_variant: self.ca_variant,
        }
    }

    /// Zero-weight module with identity-like norm (scale 1, offset 0,
    /// running mean 0, running variance 1).
    pub fn zeros(cfg: FsmConfig) -> Self {
        let (c, k) = (cfg.channels, cfg.shift_channels);
        Self {
            w_alpha: vec![T::zero(); k * c],
            w_beta: vec![T::zero(); c * k],
            w_f: vec![T::zero(); k * c],
            offsets: ShiftOffsets::zeros(k),
            norm_scale: vec![T::one(); c],
            norm_offset: vec![T::zero(); c],
            running_mean: vec![T::zero(); c],
            running_var: vec![T::one(); c],
            ca_variant: cfg.ca_variant,
        }
    }

    /// Insertion-time initialization: `w_alpha`, `w_f` uniform in
    /// `±1/sqrt(C)`, `w_beta` zero, offsets uniform in `±1` pixel.
    pub fn init<R: Rng>(cfg: FsmConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(cfg);
        let bound = 1.0 / (cfg.channels as f64).sqrt();
        for w in p.w_alpha.iter_mut().chain(p.w_f.iter_mut()) {
            *w = T::c(rng.gen_range(-bound..bound));
        }
        p.offsets = init_offsets(cfg.shift_channels, rng);
        p
    }

    pub fn validate(&self) -> Result<()> {
        let (c, k) = (self.channels(), self.shift_channels());
        for (name, got, want) in [
            ("w_alpha elements", self.w_alpha.len(), k * c),
            ("w_beta elements", self.w_beta.len(), c * k),
            ("w_f elements", self.w_f.len(), k * c),
            ("offset dy length", self.offsets.dy.len(), k),
            ("norm offset length", self.norm_offset.len(), c),
            ("running mean length", self.running_mean.len(), c),
            ("running variance length", self.running_var.len(), c),
        ] {
            if got != want {
                return Err(Error::dim(name, want, got));
            }
        }
        Ok(())
    }

    /// Registers the parameters under `prefix` and returns their slots.
    pub fn register(&self, store: &mut ParamStore<T>, prefix: &str) -> Result<FsmSlots> {
        self.validate()?;
        let (c, k) = (self.channels(), self.shift_channels());
        let mut put = |slot: &str, shape: Vec<usize>, v: &[T], role| {
            store.insert(ParamTensor::new(format!("{prefix}.{slot}"), shape, v.to_vec(), role))
        };
        Ok(FsmSlots {
            w_alpha: put("w_alpha", vec![k, c], &self.w_alpha, ParamRole::Weight)?,
            w_beta: put("w_beta", vec![c, k], &self.w_beta, ParamRole::Weight)?,
            w_f: put("w_f", vec![k, c], &self.w_f, ParamRole::Weight)?,
            offsets: put("offsets", vec![k, 2], &self.offsets.to_interleaved(), ParamRole::Offset)?,
            norm: BatchNormSlots {
                gamma: put("bn.gamma", vec![c], &self.norm_scale, ParamRole::Weight)?,
                beta: put("bn.beta", vec![c], &self.norm_offset, ParamRole::Weight)?,
                running_mean: put("bn.running_mean", vec![c], &self.running_mean, ParamRole::Buffer)?,
                running_var: put("bn.running_var", vec![c], &self.running_var, ParamRole::Buffer)?,
            },
        })
    }

    pub fn from_store(store: &ParamStore<T>, slots: &FsmSlots, ca_variant: CaVariant) -> Self {
        let v = |id: ParamId| store.values(id).to_vec();
        Self {
            w_alpha: v(slots.w_alpha),
            w_beta: v(slots.w_beta),
            w_f: v(slots.w_f),
            offsets: ShiftOffsets::from_interleaved(store.values(slots.offsets)),
            norm_scale: v(slots.norm.gamma),
            norm_offset: v(slots.norm.beta),
            running_mean: v(slots.norm.running_mean),
            running_var: v(slots.norm.running_var),
            ca_variant,
        }
    }

    /// Stand-alone evaluation through a private tape.
    pub fn forward(&self, input: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let mut store = ParamStore::new();
        let slots = self.register(&mut store, "fsm")?;
        let mut tape = Tape::new(&store);
        let p = tape.constant(input.clone());
        let taps = fsm_forward(&mut tape, p, &slots, self.ca_variant, mode)?;
        Ok(tape.value(taps.output).clone())
    }
}

pub fn init_offsets<T: Real, R: Rng>(k: usize, rng: &mut R) -> ShiftOffsets<T> {
    let mut draw = || T::c(rng.gen_range(-OFFSET_INIT_RANGE..=OFFSET_INIT_RANGE));
    let mut dx = Vec::with_capacity(k);
    let mut dy = Vec::with_capacity(k);
    for _ in 0..k {
        dx.push(draw());
        dy.push(draw());
    }
    ShiftOffsets { dx, dy }
}

/// Parameter slots of one module inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FsmSlots {
    pub w_alpha: ParamId,
    pub w_beta: ParamId,
    pub w_f: ParamId,
    pub offsets: ParamId,
    pub norm: BatchNormSlots,
}

impl FsmSlots {
    pub fn lookup<T: Real>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let get = |slot: &str| store.require(&format!("{prefix}.{slot}"));
        Ok(Self {
            w_alpha: get("w_alpha")?,
            w_beta: get("w_beta")?,
            w_f: get("w_f")?,
            offsets: get("offsets")?,
            norm: BatchNormSlots {
                gamma: get("bn.gamma")?,
                beta: get("bn.beta")?,
                running_mean: get("bn.running_mean")?,
                running_var: get("bn.running_var")?,
            },
        })
    }

    pub fn all(&self) -> [ParamId; 8] {
        [
            self.w_alpha,
            self.w_beta,
            self.w_f,
            self.offsets,
            self.norm.gamma,
            self.norm.beta,
            self.norm.running_mean,
            self.norm.running_var,
        ]
    }
}

/// Intermediate tape values of one module evaluation.
#[derive(Clone, Copy, Debug)]
pub struct FsmTaps {
    pub input: Var,
    /// `R`, pre-shifting maps `[B, K, H, W]`.
    pub pre_shift: Var,
    /// `S`, post-shifting maps.
    pub post_shift: Var,
    /// `F`, attention maps.
    pub attention: Var,
    /// `F . S`.
    pub gated: Var,
    /// `N`, output of the last 1x1 convolution `[B, C, H, W]`.
    pub non_local: Var,
    /// `P + N`.
    pub pre_norm: Var,
    pub output: Var,
}

pub fn fsm_forward<T: Real>(
    tape: &mut Tape<'_, T>,
    input: Var,
    slots: &FsmSlots,
    ca_variant: CaVariant,
    mode: Mode,
) -> Result<FsmTaps> {
    let c = tape.params().get(slots.w_alpha).shape[1];
    let got = tape.shape(input).channels;
    if got != c {
        return Err(Error::dim("FSM input channels", c, got));
    }
    let pre_shift = tape.conv1x1(input, slots.w_alpha, None)?;
    let post_shift = tape.shift(pre_shift, slots.offsets)?;
    let attention = ca_forward(tape, input, slots.w_f, ca_variant)?;
    let gated = tape.mul(attention, post_shift)?;
    let non_local = tape.conv1x1(gated, slots.w_beta, None)?;
    let pre_norm = tape.add(input, non_local)?;
    let normed = tape.batch_norm(pre_norm, slots.norm, mode)?;
    let output = tape.relu(normed);
    Ok(FsmTaps {
        input,
        pre_shift,
        post_shift,
        attention,
        gated,
        non_local,
        pre_norm,
        output,
    })
}
