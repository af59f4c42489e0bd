//! Single-file binary checkpoints of a training run.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SSNC" | version u32 | total length u64
//! graph JSON (u64 length + bytes) | meta JSON (u64 length + bytes)
//! iteration u64 | rng seed [u8; 32] | rng stream u64 | rng word position u128
//! parameter count u64, then per parameter:
//!     name | role u8 | requires_grad u8 | rank u64 | dims u64.. | values f32..
//! optimizer state count u64, then per state:
//!     name | step u64 | numel u64 | m f32.. | v f32..
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{Adam, AdamState};
use crate::param::ParamRole;
use crate::posenet::{Model, NetworkGraph};
use crate::trainer::{SynthSpec, TaskSpec, TrainConfig, Trainer};

pub const MAGIC: [u8; 4] = *b"SSNC";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: u64 = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub fsm_active: BTreeMap<String, bool>,
    /// Evaluation set recipe, recorded by the caller.
    #[serde(default)]
    pub eval: Option<TaskSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub role: ParamRole,
    pub requires_grad: bool,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamRecord {
    pub name: String,
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub graph: NetworkGraph,
    pub meta: CheckpointMeta,
    pub iteration: u64,
    pub rng: RngState,
    pub params: Vec<ParamRecord>,
    pub adam: Vec<AdamRecord>,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        let params = t
            .model
            .store
            .iter()
            .map(|(_, p)| ParamRecord {
                name: p.name.clone(),
                role: p.role,
                requires_grad: p.requires_grad,
                shape: p.shape.clone(),
                values: p.values.clone(),
            })
            .collect();
        let adam = t
            .adam
            .states
            .iter()
            .map(|(name, s)| AdamRecord {
                name: name.clone(),
                step: s.step,
                m: s.m.clone(),
                v: s.v.clone(),
            })
            .collect();
        Self {
            graph: t.model.graph.clone(),
            meta: CheckpointMeta {
                train: t.config.clone(),
                synth: t.synth,
                fsm_active: t.model.fsm_active.clone(),
                eval: None,
            },
            iteration: t.iteration,
            rng: RngState::capture(&t.rng),
            params,
            adam,
        }
    }

    /// Rebuilds the trainer. Every parameter slot of the graph must be
    /// present with its exact shape.
    pub fn into_trainer(self) -> Result<Trainer> {
        let mut model = Model::<f32>::init(self.graph, 0)?;
        if self.params.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "graph has {} parameter tensors, checkpoint has {}",
                model.store.len(),
                self.params.len()
            )));
        }
        for rec in self.params {
            let p = model
                .store
                .by_name_mut(&rec.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", rec.name)))?;
            if p.shape != rec.shape || p.role != rec.role {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}`: expected {:?} {:?}, found {:?} {:?}",
                    rec.name, p.role, p.shape, rec.role, rec.shape
                )));
            }
            p.values = rec.values;
            p.requires_grad = rec.requires_grad;
        }
        if self.meta.fsm_active.keys().ne(model.fsm_active.keys()) {
            return Err(Error::Checkpoint("FSM activity map does not match the graph".into()));
        }
        model.fsm_active = self.meta.fsm_active;
        let mut adam = Adam::new(self.meta.train.adam);
        for rec in self.adam {
            let p = model
                .store
                .by_name(&rec.name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter `{}`", rec.name)))?;
            if rec.m.len() != p.numel() {
                return Err(Error::Checkpoint(format!(
                    "optimizer state `{}`: expected {} values, found {}",
                    rec.name,
                    p.numel(),
                    rec.m.len()
                )));
            }
            adam.states.insert(
                rec.name,
                AdamState {
                    step: rec.step,
                    m: rec.m,
                    v: rec.v,
                },
            );
        }
        let mut trainer = Trainer::new(model, self.meta.train, self.meta.synth)?;
        trainer.adam = adam;
        trainer.iteration = self.iteration;
        trainer.rng = self.rng.restore();
        Ok(trainer)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Vec::new();
        w.extend_from_slice(&MAGIC);
        w.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        w.extend_from_slice(&0u64.to_le_bytes());
        put_blob(&mut w, self.graph.to_json().as_bytes());
        put_blob(&mut w, serde_json::to_string(&self.meta)?.as_bytes());
        put_u64(&mut w, self.iteration);
        w.extend_from_slice(&self.rng.seed);
        put_u64(&mut w, self.rng.stream);
        w.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        put_u64(&mut w, self.params.len() as u64);
        for p in &self.params {
            put_blob(&mut w, p.name.as_bytes());
            w.push(p.role.code());
            w.push(p.requires_grad as u8);
            put_u64(&mut w, p.shape.len() as u64);
            for &d in &p.shape {
                put_u64(&mut w, d as u64);
            }
            put_f32s(&mut w, &p.values);
        }
        put_u64(&mut w, self.adam.len() as u64);
        for s in &self.adam {
            put_blob(&mut w, s.name.as_bytes());
            put_u64(&mut w, s.step);
            put_u64(&mut w, s.m.len() as u64);
            put_f32s(&mut w, &s.m);
            put_f32s(&mut w, &s.v);
        }
        let total = w.len() as u64;
        w[8..16].copy_from_slice(&total.to_le_bytes());
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let actual = bytes.len() as u64;
        if actual < 4 {
            return Err(Error::Truncated { expected: HEADER_LEN, actual });
        }
        if bytes[..4] != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {:?}, expected \"SSNC\"", &bytes[..4])));
        }
        if actual < HEADER_LEN {
            return Err(Error::Truncated { expected: HEADER_LEN, actual });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let expected = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        if actual < expected {
            return Err(Error::Truncated { expected, actual });
        }
        if actual > expected {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the declared length {expected}",
                actual - expected
            )));
        }
        let mut r = Reader {
            bytes,
            pos: HEADER_LEN as usize,
        };
        let graph = NetworkGraph::from_json(r.str("graph")?)?;
        let meta: CheckpointMeta = serde_json::from_str(r.str("meta")?)?;
        let iteration = r.u64("iteration")?;
        let seed = r.take(32, "rng seed")?.try_into().expect("32 bytes");
        let stream = r.u64("rng stream")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes"));
        let n = r.u64("parameter count")?;
        let mut params = Vec::new();
        for _ in 0..n {
            let name = r.str("parameter name")?.to_string();
            let code = r.take(1, "role")?[0];
            let role = ParamRole::from_code(code)
                .ok_or_else(|| Error::Checkpoint(format!("parameter `{name}`: unknown role code {code}")))?;
            let requires_grad = r.take(1, "requires_grad")?[0] != 0;
            let rank = r.u64("rank")? as usize;
            let shape = (0..rank).map(|_| r.u64("dimension").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Checkpoint(format!("parameter `{name}`: shape overflows")))?;
            let values = r.f32s(numel, &name)?;
            params.push(ParamRecord {
                name,
                role,
                requires_grad,
                shape,
                values,
            });
        }
        let n = r.u64("optimizer state count")?;
        let mut adam = Vec::new();
        for _ in 0..n {
            let name = r.str("optimizer state name")?.to_string();
            let step = r.u64("optimizer step")?;
            let numel = r.u64("optimizer numel")? as usize;
            let m = r.f32s(numel, &name)?;
            let v = r.f32s(numel, &name)?;
            adam.push(AdamRecord { name, step, m, v });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} unread bytes at the end of the body",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            graph,
            meta,
            iteration,
            rng: RngState { seed, stream, word_pos },
            params,
            adam,
        })
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let file_name = path
            .file_name()
            .ok_or_else(|| Error::Argument(format!("checkpoint path {} has no file name", path.display())))?;
        let mut tmp_name = file_name.to_os_string();
        tmp_name.push(format!(".tmp{}", std::process::id()));
        let tmp = path.with_file_name(tmp_name);
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path).inspect_err(|_| {
            let _ = fs::remove_file(&tmp);
        })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_blob(w: &mut Vec<u8>, b: &[u8]) {
    put_u64(w, b.len() as u64);
    w.extend_from_slice(b);
}

fn put_f32s(w: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if n > left {
            return Err(Error::Checkpoint(format!(
                "blob length mismatch reading {what} at byte {}: need {n}, {left} left",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self, what: &str) -> Result<&'a str> {
        let n = self.u64(what)?;
        let n = usize::try_from(n).map_err(|_| Error::Checkpoint(format!("{what}: length {n} too large")))?;
        std::str::from_utf8(self.take(n, what)?).map_err(|e| Error::Checkpoint(format!("{what}: {e}")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::Checkpoint(format!("{what}: element count {n} too large")))?;
        let raw = self.take(len, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}
