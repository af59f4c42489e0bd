use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::norm::Mode;
use crate::optim::Adam;
use crate::param::{ParamId, ParamRole};
use crate::posenet::{Model, Trace};
use crate::tensor::Tensor4;

use super::augment::augment_sample;
use super::synth::{SynthSample, SynthSpec};
use super::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub iteration: u64,
    pub epoch: u64,
    pub loss_main: f64,
    pub loss_esp: Vec<f64>,
    pub base_lr: f64,
    pub offset_lr: f64,
    /// Euclidean norm of all offset gradients in this step.
    pub offset_grad_norm: f64,
    /// FSMs were inserted right before this step.
    pub inserted_fsms: bool,
}

impl StepMetrics {
    pub fn loss_total(&self) -> f64 {
        self.loss_main + self.loss_esp.iter().sum::<f64>()
    }

    pub fn csv_header(esps: usize) -> String {
        let mut h = String::from("iteration,loss_main");
        for i in 1..=esps {
            h.push_str(&format!(",loss_esp{i}"));
        }
        h.push_str(",base_lr,offset_lr");
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!("{},{}", self.iteration, self.loss_main);
        for l in &self.loss_esp {
            r.push_str(&format!(",{l}"));
        }
        r.push_str(&format!(",{},{}", self.base_lr, self.offset_lr));
        r
    }
}

/// Main and ESP heatmap losses, each the mean squared error against the
/// same target.
pub fn heatmap_losses(tape: &mut Tape<'_, f32>, trace: &Trace, target: Var) -> Result<(Var, Var, Vec<Var>)> {
    let main = tape.mse(trace.head, target)?;
    let mut esps = Vec::with_capacity(trace.esps.len());
    for &e in &trace.esps {
        esps.push(tape.mse(e, target)?);
    }
    let mut all = vec![main];
    all.extend(&esps);
    let total = tape.sum_scalars(&all)?;
    Ok((total, main, esps))
}

fn stack(samples: &[&SynthSample]) -> Result<(Tensor4<f32>, Tensor4<f32>)> {
    let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
    let targets: Vec<_> = samples.iter().map(|s| s.target.clone()).collect();
    Ok((Tensor4::stack(&images)?, Tensor4::stack(&targets)?))
}

fn scalar(tape: &Tape<'_, f32>, v: Var) -> f64 {
    tape.value(v).data()[0] as f64
}

/// Eval-mode total loss over `data` in consecutive batches, weighted by
/// batch size.
pub fn evaluate_loss(model: &Model<f32>, data: &[SynthSample], batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Argument("evaluation set is empty".into()));
    }
    let mut acc = 0.0;
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<_> = chunk.iter().collect();
        let (x, y) = stack(&refs)?;
        let mut tape = Tape::new(&model.store);
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let trace = model.forward(&mut tape, xv, Mode::Eval)?;
        let (total, _, _) = heatmap_losses(&mut tape, &trace, yv)?;
        acc += scalar(&tape, total) * chunk.len() as f64;
    }
    Ok(acc / data.len() as f64)
}

/// Training state: model, optimizer, iteration counter and the random
/// stream used for augmentation and FSM insertion.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model<f32>,
    pub adam: Adam<f32>,
    pub config: TrainConfig,
    pub synth: SynthSpec,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig, synth: SynthSpec) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            adam: Adam::new(config.adam),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            config,
            synth,
            iteration: 0,
        })
    }

    pub fn fsms_inserted(&self) -> bool {
        self.model.fsm_active.values().any(|&a| a)
    }

    pub fn epoch_of(&self, iteration: u64, dataset_len: usize) -> u64 {
        iteration / self.config.iterations_per_epoch(dataset_len)
    }

    /// Dataset indices of the batch at `iteration`: a per-epoch permutation
    /// seeded by the run seed and the epoch number.
    pub fn batch_indices(&self, iteration: u64, dataset_len: usize) -> Vec<usize> {
        let ipe = self.config.iterations_per_epoch(dataset_len);
        let (epoch, pos) = (iteration / ipe, iteration % ipe);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch + 1);
        let mut perm: Vec<usize> = (0..dataset_len).collect();
        perm.shuffle(&mut rng);
        let bs = self.config.batch_size;
        (0..bs).map(|j| perm[(pos as usize * bs + j) % dataset_len]).collect()
    }

    fn offset_bounds(&self) -> Result<Vec<(ParamId, f32)>> {
        let shapes = self.model.graph.layer_shapes()?;
        let mut out = Vec::new();
        for (l, s) in self.model.graph.layers.iter().zip(shapes) {
            if self.model.is_fsm_active(&l.id) {
                let slots = self.model.fsm_slots(&l.id)?;
                out.push((slots.offsets, s.height.max(s.width) as f32));
            }
        }
        Ok(out)
    }

    /// One optimizer step at the current iteration.
    pub fn step(&mut self, data: &[SynthSample]) -> Result<StepMetrics> {
        if data.is_empty() {
            return Err(Error::Argument("training set is empty".into()));
        }
        let it = self.iteration;
        let mut inserted_fsms = false;
        if it >= self.config.insertion_iteration && !self.fsms_inserted() && !self.model.fsm_active.is_empty() {
            self.model.insert_fsms(&mut self.rng)?;
            inserted_fsms = true;
        }
        let idx = self.batch_indices(it, data.len());
        let augmented: Vec<SynthSample>;
        let batch: Vec<&SynthSample> = if self.config.augment {
            augmented = idx
                .iter()
                .map(|&i| augment_sample(&data[i], &self.config.augmentation, &self.synth, &mut self.rng))
                .collect::<Result<_>>()?;
            augmented.iter().collect()
        } else {
            idx.iter().map(|&i| &data[i]).collect()
        };
        let (x, y) = stack(&batch)?;

        let (grads, updates, loss_main, loss_esp) = {
            let mut tape = Tape::new(&self.model.store);
            let xv = tape.input(x);
            let yv = tape.constant(y);
            let trace = self.model.forward(&mut tape, xv, Mode::Train)?;
            let (total, main, esps) = heatmap_losses(&mut tape, &trace, yv)?;
            if !scalar(&tape, total).is_finite() {
                let layer = tape.first_non_finite().map_or_else(|| "loss".to_string(), |(_, name)| name);
                return Err(Error::NonFinite { iteration: it, layer });
            }
            let grads = tape.backward(total)?;
            let loss_esp = esps.iter().map(|&e| scalar(&tape, e)).collect();
            (grads, tape.take_buffer_updates(), scalar(&tape, main), loss_esp)
        };
        for (id, g) in grads.params() {
            if g.iter().any(|v| !v.is_finite()) {
                let layer = format!("gradient of {}", self.model.store.get(id).name);
                return Err(Error::NonFinite { iteration: it, layer });
            }
        }

        let epoch = self.epoch_of(it, data.len());
        let base_lr = self.config.base_lr_at(it);
        let offset_lr = self.config.offset_lr_at(epoch);
        let store = &mut self.model.store;
        store.zero_grad();
        store.accumulate(&grads);
        store.apply_buffer_updates(updates);
        let offset_grad_norm = store
            .iter()
            .filter(|(_, p)| p.role == ParamRole::Offset && p.requires_grad)
            .flat_map(|(_, p)| p.grad.iter())
            .map(|&g| (g as f64).powi(2))
            .sum::<f64>()
            .sqrt();

        self.adam.step(store, |role| match role {
            ParamRole::Offset => offset_lr,
            _ => base_lr,
        });
        if self.config.clamp_offsets {
            for (id, bound) in self.offset_bounds()? {
                for v in &mut self.model.store.get_mut(id).values {
                    *v = v.clamp(-bound, bound);
                }
            }
        }
        self.iteration += 1;
        Ok(StepMetrics {
            iteration: it,
            epoch,
            loss_main,
            loss_esp,
            base_lr,
            offset_lr,
            offset_grad_norm,
            inserted_fsms,
        })
    }

    /// Steps until `config.iterations`, handing every step's metrics to
    /// `observe`.
    pub fn run(&mut self, data: &[SynthSample], mut observe: impl FnMut(&StepMetrics, &Trainer) -> Result<()>) -> Result<()> {
        while self.iteration < self.config.iterations {
            let m = self.step(data)?;
            observe(&m, self)?;
        }
        Ok(())
    }
}
