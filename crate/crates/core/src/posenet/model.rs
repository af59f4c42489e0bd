use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchNormSlots, Tape, Var};
use crate::error::{Error, Result};
use crate::fsm::{fsm_forward, FsmParams, FsmSlots, FsmTaps};
use crate::ops::conv::ConvGeom;
use crate::ops::norm::{Mode, NormKind};
use crate::param::{ParamRole, ParamStore, ParamTensor};
use crate::tensor::Real;

use super::graph::{resolve_norm, BottleneckConfig, LayerKind, NetworkGraph};

/// A graph with its parameters and the active/bypass state of every FSM.
/// A bypassed FSM passes its input through and its parameters are frozen.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub graph: NetworkGraph,
    pub store: ParamStore<T>,
    pub fsm_active: BTreeMap<String, bool>,
}

/// Tape values of one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// Output of every layer, in graph order.
    pub layers: Vec<Var>,
    /// Taps of every active FSM by layer id.
    pub fsm: BTreeMap<String, FsmTaps>,
    pub head: Var,
    pub esps: Vec<Var>,
}

impl Trace {
    pub fn layer(&self, graph: &NetworkGraph, id: &str) -> Option<Var> {
        graph.layer_index(id).map(|i| self.layers[i])
    }
}

fn kaiming<T: Real, R: Rng>(n: usize, fan_in: usize, rng: &mut R) -> Vec<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| T::c(rng.gen_range(-bound..bound))).collect()
}

fn insert_conv<T: Real, R: Rng>(store: &mut ParamStore<T>, prefix: &str, g: &ConvGeom, bias: bool, rng: &mut R) -> Result<()> {
    let fan_in = g.in_channels * g.kernel * g.kernel;
    let shape = vec![g.out_channels, g.in_channels, g.kernel, g.kernel];
    store.insert(ParamTensor::new(
        format!("{prefix}.w"),
        shape,
        kaiming(g.weight_len(), fan_in, rng),
        ParamRole::Weight,
    ))?;
    if bias {
        store.insert(ParamTensor::new(
            format!("{prefix}.b"),
            vec![g.out_channels],
            vec![T::zero(); g.out_channels],
            ParamRole::Weight,
        ))?;
    }
    Ok(())
}

fn insert_norm<T: Real>(store: &mut ParamStore<T>, prefix: &str, kind: NormKind, c: usize) -> Result<()> {
    let mut put = |slot: &str, v: T, role| {
        store.insert(ParamTensor::new(format!("{prefix}.{slot}"), vec![c], vec![v; c], role))
    };
    put("gamma", T::one(), ParamRole::Weight)?;
    put("beta", T::zero(), ParamRole::Weight)?;
    if kind == NormKind::Batch {
        put("running_mean", T::zero(), ParamRole::Buffer)?;
        put("running_var", T::one(), ParamRole::Buffer)?;
    }
    Ok(())
}

fn apply_norm<T: Real>(tape: &mut Tape<'_, T>, x: Var, prefix: &str, kind: NormKind, mode: Mode) -> Result<Var> {
    let store = tape.params();
    let id = |slot: &str| store.require(&format!("{prefix}.{slot}"));
    match kind {
        NormKind::Batch => {
            let slots = BatchNormSlots {
                gamma: id("gamma")?,
                beta: id("beta")?,
                running_mean: id("running_mean")?,
                running_var: id("running_var")?,
            };
            tape.batch_norm(x, slots, mode)
        }
        NormKind::Group { groups } => {
            let (g, b) = (id("gamma")?, id("beta")?);
            tape.group_norm(x, groups, g, b)
        }
    }
}

/// `relu(norm3(conv3(relu(norm2(conv2(relu(norm1(conv1(x))))))) + shortcut)`
/// with the stride on the 3x3 convolution and a projected shortcut when
/// the shape changes.
pub fn bottleneck_forward<T: Real>(
    tape: &mut Tape<'_, T>,
    x: Var,
    prefix: &str,
    cfg: &BottleneckConfig,
    mode: Mode,
) -> Result<Var> {
    let got = tape.shape(x).channels;
    if got != cfg.in_channels {
        return Err(Error::dim("bottleneck input channels", cfg.in_channels, got));
    }
    let w = |tape: &Tape<'_, T>, name: &str| tape.params().require(&format!("{prefix}.{name}.w"));
    let mut h = x;
    for (i, g) in [cfg.conv1(), cfg.conv2(), cfg.conv3()].iter().enumerate() {
        let wid = w(tape, &format!("conv{}", i + 1))?;
        h = tape.conv(h, wid, None, *g)?;
        let kind = resolve_norm(cfg.norm, g.out_channels);
        h = apply_norm(tape, h, &format!("{prefix}.norm{}", i + 1), kind, mode)?;
        if i < 2 {
            h = tape.relu(h);
        }
    }
    let shortcut = if cfg.has_projection() {
        let wid = w(tape, "proj")?;
        let s = tape.conv(x, wid, None, cfg.projection())?;
        let kind = resolve_norm(cfg.norm, cfg.out_channels);
        apply_norm(tape, s, &format!("{prefix}.proj_norm"), kind, mode)?
    } else {
        x
    };
    let sum = tape.add(h, shortcut)?;
    Ok(tape.relu(sum))
}

impl<T: Real> Model<T> {
    /// Initializes every parameter from `seed`. FSMs start bypassed.
    pub fn init(graph: NetworkGraph, seed: u64) -> Result<Self> {
        graph.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut fsm_active = BTreeMap::new();
        let shapes = graph.layer_shapes()?;
        for l in &graph.layers {
            let id = l.id.as_str();
            match &l.kind {
                LayerKind::Conv { geom, bias, norm, .. } => {
                    insert_conv(&mut store, id, geom, *bias, &mut rng)?;
                    if let Some(n) = norm {
                        insert_norm(&mut store, &format!("{id}.norm"), *n, geom.out_channels)?;
                    }
                }
                LayerKind::MaxPool { .. } => {}
                LayerKind::Fsm { config } => {
                    FsmParams::<T>::init(*config, &mut rng).register(&mut store, id)?;
                    fsm_active.insert(id.to_string(), true);
                }
                LayerKind::Bottleneck { config: b } => {
                    for (i, g) in [b.conv1(), b.conv2(), b.conv3()].iter().enumerate() {
                        insert_conv(&mut store, &format!("{id}.conv{}", i + 1), g, false, &mut rng)?;
                        let c = g.out_channels;
                        insert_norm(&mut store, &format!("{id}.norm{}", i + 1), resolve_norm(b.norm, c), c)?;
                    }
                    if b.has_projection() {
                        insert_conv(&mut store, &format!("{id}.proj"), &b.projection(), false, &mut rng)?;
                        let c = b.out_channels;
                        insert_norm(&mut store, &format!("{id}.proj_norm"), resolve_norm(b.norm, c), c)?;
                    }
                }
            }
        }
        for e in &graph.esps {
            let i = graph.layer_index(&e.from).expect("validated ESP source");
            let g = ConvGeom::pointwise(shapes[i].channels, graph.keypoints);
            insert_conv(&mut store, &e.id, &g, true, &mut rng)?;
        }
        let mut model = Self {
            graph,
            store,
            fsm_active,
        };
        for id in model.graph.fsm_ids() {
            model.set_fsm_active(&id, false)?;
        }
        Ok(model)
    }

    pub fn fsm_slots(&self, id: &str) -> Result<FsmSlots> {
        FsmSlots::lookup(&self.store, id)
    }

    pub fn fsm_params(&self, id: &str) -> Result<FsmParams<T>> {
        let i = self
            .graph
            .layer_index(id)
            .ok_or_else(|| Error::Argument(format!("unknown layer `{id}`")))?;
        let LayerKind::Fsm { config } = self.graph.layers[i].kind else {
            return Err(Error::Argument(format!("layer `{id}` is not an FSM")));
        };
        Ok(FsmParams::from_store(&self.store, &self.fsm_slots(id)?, config.ca_variant))
    }

    /// Writes `params` into the slots of FSM `id`.
    pub fn set_fsm_params(&mut self, id: &str, params: &FsmParams<T>) -> Result<()> {
        let current = self.fsm_params(id)?;
        if current.config() != params.config() {
            return Err(Error::Argument(format!("FSM `{id}` has a different configuration")));
        }
        let slots = self.fsm_slots(id)?;
        let mut put = |pid, v: Vec<T>| self.store.get_mut(pid).values = v;
        put(slots.w_alpha, params.w_alpha.clone());
        put(slots.w_beta, params.w_beta.clone());
        put(slots.w_f, params.w_f.clone());
        put(slots.offsets, params.offsets.to_interleaved());
        put(slots.norm.gamma, params.norm_scale.clone());
        put(slots.norm.beta, params.norm_offset.clone());
        put(slots.norm.running_mean, params.running_mean.clone());
        put(slots.norm.running_var, params.running_var.clone());
        Ok(())
    }

    pub fn is_fsm_active(&self, id: &str) -> bool {
        self.fsm_active.get(id).copied().unwrap_or(false)
    }

    /// Switches FSM `id` between active and bypass; bypassed parameters
    /// are frozen.
    pub fn set_fsm_active(&mut self, id: &str, active: bool) -> Result<()> {
        let slot = self
            .fsm_active
            .get_mut(id)
            .ok_or_else(|| Error::Argument(format!("unknown FSM `{id}`")))?;
        *slot = active;
        let slots = FsmSlots::lookup(&self.store, id)?;
        for pid in slots.all() {
            let p = self.store.get_mut(pid);
            p.requires_grad = active && p.role != ParamRole::Buffer;
            if !active {
                p.zero_grad();
            }
        }
        Ok(())
    }

    /// Activates every FSM with fresh parameters: `w_alpha` and `w_f`
    /// random, `w_beta` zero, offsets in the initialization range, branch
    /// norm reset. Fails if any FSM is already active.
    pub fn insert_fsms<R: Rng>(&mut self, rng: &mut R) -> Result<()> {
        if let Some(id) = self.fsm_active.iter().find(|(_, &a)| a).map(|(id, _)| id.clone()) {
            return Err(Error::State(format!("FSM `{id}` is already inserted")));
        }
        for id in self.graph.fsm_ids() {
            let cfg = self.fsm_params(&id)?.config();
            self.set_fsm_params(&id, &FsmParams::init(cfg, rng))?;
            self.set_fsm_active(&id, true)?;
        }
        Ok(())
    }

    /// Records the network on `tape`, which must read this model's store.
    pub fn forward(&self, tape: &mut Tape<'_, T>, input: Var, mode: Mode) -> Result<Trace> {
        let want = self.graph.input;
        let s = tape.shape(input);
        if s.channels != want.channels || s.height != want.height || s.width != want.width {
            return Err(Error::Argument(format!(
                "input shape {s} does not match the graph input {}x{}x{}",
                want.channels, want.height, want.width
            )));
        }
        let mut x = input;
        let mut layers = Vec::with_capacity(self.graph.layers.len());
        let mut fsm = BTreeMap::new();
        for l in &self.graph.layers {
            let id = l.id.as_str();
            x = match &l.kind {
                LayerKind::Conv { geom, bias, norm, act } => {
                    let w = tape.params().require(&format!("{id}.w"))?;
                    let b = if *bias { Some(tape.params().require(&format!("{id}.b"))?) } else { None };
                    let mut h = tape.conv(x, w, b, *geom)?;
                    if let Some(n) = norm {
                        h = apply_norm(tape, h, &format!("{id}.norm"), *n, mode)?;
                    }
                    if let Some(a) = act {
                        h = tape.activation(h, *a);
                    }
                    h
                }
                LayerKind::MaxPool { geom } => tape.max_pool(x, *geom),
                LayerKind::Fsm { config } => {
                    if self.is_fsm_active(id) {
                        let slots = FsmSlots::lookup(tape.params(), id)?;
                        let taps = fsm_forward(tape, x, &slots, config.ca_variant, mode)?;
                        for (v, part) in [
                            (taps.pre_shift, "pre_shift"),
                            (taps.post_shift, "post_shift"),
                            (taps.attention, "attention"),
                            (taps.non_local, "non_local"),
                        ] {
                            tape.label(v, format!("{id}.{part}"));
                        }
                        fsm.insert(id.to_string(), taps);
                        taps.output
                    } else {
                        x
                    }
                }
                LayerKind::Bottleneck { config } => bottleneck_forward(tape, x, id, config, mode)?,
            };
            if tape.label_of(x).is_none() {
                tape.label(x, id);
            }
            layers.push(x);
        }
        let head = x;
        let mut esps = Vec::with_capacity(self.graph.esps.len());
        for e in &self.graph.esps {
            let src = layers[self.graph.layer_index(&e.from).expect("validated ESP source")];
            let w = tape.params().require(&format!("{}.w", e.id))?;
            let b = tape.params().require(&format!("{}.b", e.id))?;
            let g = ConvGeom::pointwise(tape.shape(src).channels, self.graph.keypoints);
            let out = tape.conv(src, w, Some(b), g)?;
            tape.label(out, e.id.as_str());
            esps.push(out);
        }
        Ok(Trace { layers, fsm, head, esps })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            graph: self.graph.clone(),
            store: self.store.cast(),
            fsm_active: self.fsm_active.clone(),
        }
    }
}
