//! Reverse-mode differentiation over [`Tensor4`] values.
//!
//! A [`Tape`] records every forward op in execution order, so the node list
//! is already topologically sorted. [`Tape::backward`] walks it once in
//! reverse. Parameters are read from a borrowed [`ParamStore`]; their
//! gradients come back in [`Gradients`] and are folded into the store by the
//! caller. Buffer writes produced by train-mode batch norm are queued on the
//! tape for the same reason.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::fsm::attention::{spatial_normalize_backward, spatial_normalize_forward};
use crate::fsm::shift::{self, ShiftOffsets};
use crate::ops::activation::{activation_backward, activation_forward, Activation};
use crate::ops::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use crate::ops::norm::{
    batch_norm_backward, batch_norm_forward, group_norm_backward, group_norm_forward, Mode, NormCtx,
};
use crate::ops::pool::{max_pool_backward, max_pool_forward, PoolGeom};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Real, Shape4, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchNormSlots {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: ParamId,
        bias: Option<ParamId>,
        geom: ConvGeom,
    },
    Shift {
        x: Var,
        offsets: ParamId,
    },
    BatchNorm {
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        ctx: NormCtx<T>,
    },
    GroupNorm {
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        groups: usize,
        ctx: NormCtx<T>,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    SpatialNorm {
        x: Var,
        sums: Vec<T>,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    SumScalars {
        items: Vec<Var>,
    },
    Project {
        x: Var,
        weights: Tensor4<T>,
    },
}

struct Node<T> {
    value: Tensor4<T>,
    op: Op<T>,
    requires_grad: bool,
    label: Option<String>,
}

pub struct Tape<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    buffer_updates: Vec<(ParamId, Vec<T>)>,
    regime: Vec<i64>,
}

/// Gradients produced by one backward sweep.
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor4<T>>>,
    params: BTreeMap<ParamId, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn node(&self, v: Var) -> Option<&Tensor4<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(&id).map(|v| v.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params.iter().map(|(&k, v)| (k, v.as_slice()))
    }
}

fn add_into<T: Real>(slot: &mut Option<Tensor4<T>>, g: Tensor4<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn add_param<T: Real>(map: &mut BTreeMap<ParamId, Vec<T>>, id: ParamId, g: Vec<T>) {
    match map.get_mut(&id) {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => {
            map.insert(id, g);
        }
    }
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            buffer_updates: Vec::new(),
            regime: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape4 {
        self.nodes[v.0].value.shape()
    }

    /// Attaches a human-readable name used by non-finite diagnostics.
    pub fn label(&mut self, v: Var, name: impl Into<String>) {
        self.nodes[v.0].label = Some(name.into());
    }

    pub fn label_of(&self, v: Var) -> Option<&str> {
        self.nodes[v.0].label.as_deref()
    }

    /// First labelled node, in execution order, holding a non-finite value.
    /// First node holding a NaN or infinity, named by the nearest label at
    /// or after it (layer outputs are labelled after their internals).
    pub fn first_non_finite(&self) -> Option<(Var, String)> {
        let i = self.nodes.iter().position(|n| !n.value.all_finite())?;
        let name = self.nodes[i..]
            .iter()
            .find_map(|n| n.label.clone())
            .unwrap_or_else(|| format!("node#{i}"));
        Some((Var(i), name))
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Vec<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    /// Fingerprint of every piecewise choice made during the forward pass
    /// (ReLU signs, shift cells, pooling winners). Two evaluations with the
    /// same fingerprint lie on the same smooth piece.
    pub fn regime(&self) -> &[i64] {
        &self.regime
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn preq(&self, id: ParamId) -> bool {
        self.params.get(id).requires_grad
    }

    /// Leaf that receives a gradient (network input, probe points).
    pub fn input(&mut self, value: Tensor4<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation (targets).
    pub fn constant(&mut self, value: Tensor4<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn conv(&mut self, x: Var, w: ParamId, bias: Option<ParamId>, geom: ConvGeom) -> Result<Var> {
        let bias_vals = bias.map(|b| self.params.values(b));
        let out = conv2d_forward(self.value(x), self.params.values(w), bias_vals, &geom)?;
        let req = self.req(x) || self.preq(w) || bias.is_some_and(|b| self.preq(b));
        Ok(self.push(out, Op::Conv { x, w, bias, geom }, req))
    }

    /// 1x1 convolution with weights shaped `[K, C]`.
    pub fn conv1x1(&mut self, x: Var, w: ParamId, bias: Option<ParamId>) -> Result<Var> {
        let p = self.params.get(w);
        if p.shape.len() != 2 {
            return Err(Error::dim("1x1 weight rank", 2, p.shape.len()));
        }
        let (k, c) = (p.shape[0], p.shape[1]);
        let cin = self.shape(x).channels;
        if c != cin {
            return Err(Error::dim("weight input channels", cin, c));
        }
        self.conv(x, w, bias, ConvGeom::pointwise(c, k))
    }

    pub fn shift(&mut self, x: Var, offsets: ParamId) -> Result<Var> {
        let off = ShiftOffsets::from_param(self.params.get(offsets));
        let out = shift::shift_forward(self.value(x), &off)?;
        self.regime.extend(shift::regime(&off));
        let req = self.req(x) || self.preq(offsets);
        Ok(self.push(out, Op::Shift { x, offsets }, req))
    }

    pub fn batch_norm(&mut self, x: Var, slots: BatchNormSlots, mode: Mode) -> Result<Var> {
        let p = self.params;
        let fwd = batch_norm_forward(
            self.value(x),
            p.values(slots.gamma),
            p.values(slots.beta),
            p.values(slots.running_mean),
            p.values(slots.running_var),
            mode,
        )?;
        if let Some((rm, rv)) = fwd.running {
            self.buffer_updates.push((slots.running_mean, rm));
            self.buffer_updates.push((slots.running_var, rv));
        }
        let req = self.req(x) || self.preq(slots.gamma) || self.preq(slots.beta);
        Ok(self.push(
            fwd.output,
            Op::BatchNorm {
                x,
                gamma: slots.gamma,
                beta: slots.beta,
                ctx: fwd.ctx,
            },
            req,
        ))
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: ParamId, beta: ParamId) -> Result<Var> {
        let fwd = group_norm_forward(self.value(x), groups, self.params.values(gamma), self.params.values(beta))?;
        let req = self.req(x) || self.preq(gamma) || self.preq(beta);
        Ok(self.push(
            fwd.output,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                ctx: fwd.ctx,
            },
            req,
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let xv = &self.nodes[x.0].value;
        if kind == Activation::Relu {
            self.regime.extend(xv.data().iter().map(|&v| (v > T::zero()) as i64));
        }
        let out = activation_forward(&self.nodes[x.0].value, kind);
        let req = self.req(x);
        self.push(out, Op::Act { x, kind }, req)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn spatial_normalize(&mut self, x: Var) -> Var {
        let (out, sums) = spatial_normalize_forward(self.value(x));
        let req = self.req(x);
        self.push(out, Op::SpatialNorm { x, sums }, req)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).check_same(self.value(b))?;
        let out = Tensor4::from_vec(
            self.shape(a),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x * y)
                .collect(),
        )?;
        let req = self.req(a) || self.req(b);
        Ok(self.push(out, Op::Mul { a, b }, req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let req = self.req(a) || self.req(b);
        Ok(self.push(out, Op::Add { a, b }, req))
    }

    pub fn max_pool(&mut self, x: Var, geom: PoolGeom) -> Var {
        let (out, argmax) = max_pool_forward(self.value(x), &geom);
        self.regime.extend(argmax.iter().map(|&i| i as i64));
        let req = self.req(x);
        self.push(out, Op::MaxPool { x, argmax }, req)
    }

    /// Mean squared error over every element; a scalar node.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        p.check_same(t)?;
        let n = T::from_usize(p.shape().numel());
        let mut acc = T::zero();
        for (&a, &b) in p.data().iter().zip(t.data()) {
            acc += (a - b) * (a - b);
        }
        let out = Tensor4::filled(Shape4::new(1, 1, 1, 1), acc / n);
        let req = self.req(pred) || self.req(target);
        Ok(self.push(out, Op::Mse { pred, target }, req))
    }

    pub fn sum_scalars(&mut self, items: &[Var]) -> Result<Var> {
        let mut acc = T::zero();
        for &v in items {
            let val = self.value(v);
            if val.shape().numel() != 1 {
                return Err(Error::dim("scalar elements", 1, val.shape().numel()));
            }
            acc += val.data()[0];
        }
        let req = items.iter().any(|&v| self.req(v));
        Ok(self.push(
            Tensor4::filled(Shape4::new(1, 1, 1, 1), acc),
            Op::SumScalars { items: items.to_vec() },
            req,
        ))
    }

    /// `sum(x * weights)` as a scalar node.
    pub fn project(&mut self, x: Var, weights: Tensor4<T>) -> Result<Var> {
        self.value(x).check_same(&weights)?;
        let mut acc = T::zero();
        for (&a, &b) in self.value(x).data().iter().zip(weights.data()) {
            acc += a * b;
        }
        let req = self.req(x);
        Ok(self.push(
            Tensor4::filled(Shape4::new(1, 1, 1, 1), acc),
            Op::Project { x, weights },
            req,
        ))
    }

    /// Backward from a scalar node seeded with 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let s = self.shape(loss);
        if s.numel() != 1 {
            return Err(Error::dim("loss elements", 1, s.numel()));
        }
        self.backward_from(&[(loss, Tensor4::filled(s, T::one()))])
    }

    /// Backward from arbitrary seed gradients.
    pub fn backward_from(&self, seeds: &[(Var, Tensor4<T>)]) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads = BTreeMap::new();
        let mut top = 0;
        for (v, g) in seeds {
            self.value(*v).check_same(g)?;
            add_into(&mut grads[v.0], g.clone());
            top = top.max(v.0 + 1);
        }
        for i in (0..top).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads, &mut pgrads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            nodes: grads,
            params: pgrads,
        })
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: &Tensor4<T>,
        grads: &mut [Option<Tensor4<T>>],
        pgrads: &mut BTreeMap<ParamId, Vec<T>>,
    ) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, bias, geom } => {
                let cg = conv2d_backward(
                    self.value(*x),
                    self.params.values(*w),
                    geom,
                    g,
                    self.req(*x),
                    self.preq(*w),
                    bias.is_some_and(|b| self.preq(b)),
                );
                if let Some(dx) = cg.input {
                    add_into(&mut grads[x.0], dx);
                }
                if let Some(dw) = cg.weight {
                    add_param(pgrads, *w, dw);
                }
                if let (Some(b), Some(db)) = (bias, cg.bias) {
                    add_param(pgrads, *b, db);
                }
            }
            Op::Shift { x, offsets } => {
                let off = ShiftOffsets::from_param(self.params.get(*offsets));
                let sg = shift::shift_backward(self.value(*x), &off, g, self.req(*x))
                    .expect("shapes validated in forward");
                if let Some(dm) = sg.maps {
                    add_into(&mut grads[x.0], dm);
                }
                if self.preq(*offsets) {
                    let both = ShiftOffsets { dx: sg.dx, dy: sg.dy };
                    add_param(pgrads, *offsets, both.to_interleaved());
                }
            }
            Op::BatchNorm { x, gamma, beta, ctx } => {
                let ng = batch_norm_backward(ctx, self.params.values(*gamma), g);
                if self.req(*x) {
                    add_into(&mut grads[x.0], ng.input);
                }
                if self.preq(*gamma) {
                    add_param(pgrads, *gamma, ng.gamma);
                }
                if self.preq(*beta) {
                    add_param(pgrads, *beta, ng.beta);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                ctx,
            } => {
                let ng = group_norm_backward(ctx, *groups, self.params.values(*gamma), g);
                if self.req(*x) {
                    add_into(&mut grads[x.0], ng.input);
                }
                if self.preq(*gamma) {
                    add_param(pgrads, *gamma, ng.gamma);
                }
                if self.preq(*beta) {
                    add_param(pgrads, *beta, ng.beta);
                }
            }
            Op::Act { x, kind } => {
                let dx = activation_backward(self.value(*x), &node.value, *kind, g);
                add_into(&mut grads[x.0], dx);
            }
            Op::SpatialNorm { x, sums } => {
                let dx = spatial_normalize_backward(&node.value, sums, g);
                add_into(&mut grads[x.0], dx);
            }
            Op::Mul { a, b } => {
                if self.req(*a) {
                    let mut da = g.clone();
                    for (d, &v) in da.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *d *= v;
                    }
                    add_into(&mut grads[a.0], da);
                }
                if self.req(*b) {
                    let mut db = g.clone();
                    for (d, &v) in db.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *d *= v;
                    }
                    add_into(&mut grads[b.0], db);
                }
            }
            Op::Add { a, b } => {
                if self.req(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if self.req(*b) {
                    add_into(&mut grads[b.0], g.clone());
                }
            }
            Op::MaxPool { x, argmax } => {
                let dx = max_pool_backward(self.shape(*x), argmax, g);
                add_into(&mut grads[x.0], dx);
            }
            Op::Mse { pred, target } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let scale = T::c(2.0) * g.data()[0] / T::from_usize(p.shape().numel());
                let diff = Tensor4::from_vec(
                    p.shape(),
                    p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * scale).collect(),
                )
                .expect("same shape");
                if self.req(*target) {
                    add_into(&mut grads[target.0], diff.scale(-T::one()));
                }
                if self.req(*pred) {
                    add_into(&mut grads[pred.0], diff);
                }
            }
            Op::SumScalars { items } => {
                for v in items {
                    if self.req(*v) {
                        add_into(&mut grads[v.0], g.clone());
                    }
                }
            }
            Op::Project { x, weights } => {
                add_into(&mut grads[x.0], weights.scale(g.data()[0]));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{ParamRole, ParamTensor};

    fn store_with(w: Vec<f64>, k: usize, c: usize) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s
            .insert(ParamTensor::new("w", vec![k, c], w, ParamRole::Weight))
            .unwrap();
        (s, id)
    }

    #[test]
    fn conv1x1_identity_weights_pass_input_through() {
        let (store, w) = store_with(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let mut tape = Tape::new(&store);
        let s = Shape4::new(1, 2, 2, 3);
        let x = Tensor4::from_vec(s, (0..12).map(|i| i as f64 * 0.7 - 3.0).collect()).unwrap();
        let xv = tape.input(x.clone());
        let y = tape.conv1x1(xv, w, None).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn conv1x1_sums_channels() {
        let (store, w) = store_with(vec![1.0, 1.0], 1, 2);
        let mut tape = Tape::new(&store);
        let x = Tensor4::from_vec(
            Shape4::new(1, 2, 2, 2),
            vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0],
        )
        .unwrap();
        let xv = tape.input(x);
        let y = tape.conv1x1(xv, w, None).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0, 22.0, 33.0, 44.0]);
    }

    #[test]
    fn conv1x1_channel_mismatch_is_error() {
        let (store, w) = store_with(vec![1.0; 6], 2, 3);
        let mut tape = Tape::new(&store);
        let xv = tape.input(Tensor4::zeros(Shape4::new(1, 2, 2, 2)));
        let err = tape.conv1x1(xv, w, None).unwrap_err();
        assert!(err.to_string().contains("weight input channels"));
    }

    #[test]
    fn repeated_backward_is_bitwise_identical() {
        let (store, w) = store_with((0..12).map(|i| (i as f64).cos()).collect(), 4, 3);
        let mut tape = Tape::new(&store);
        let s = Shape4::new(2, 3, 4, 4);
        let xv = tape.input(Tensor4::from_vec(s, (0..s.numel()).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
        let y = tape.conv1x1(xv, w, None).unwrap();
        let r = tape.relu(y);
        let t = tape.constant(Tensor4::filled(r_shape(&tape, r), 0.1));
        let loss = tape.mse(r, t).unwrap();
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        assert_eq!(g1.param(w).unwrap(), g2.param(w).unwrap());
        assert_eq!(g1.node(xv).unwrap(), g2.node(xv).unwrap());
    }

    fn r_shape(t: &Tape<'_, f64>, v: Var) -> Shape4 {
        t.shape(v)
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let (mut store, w) = store_with(vec![0.5, -0.5], 1, 2);
        store.get_mut(w).requires_grad = false;
        let mut tape = Tape::new(&store);
        let xv = tape.constant(Tensor4::filled(Shape4::new(1, 2, 2, 2), 1.0));
        let y = tape.conv1x1(xv, w, None).unwrap();
        let loss = tape.project(y, Tensor4::filled(Shape4::new(1, 1, 2, 2), 1.0)).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.param(w).is_none());
    }
}
