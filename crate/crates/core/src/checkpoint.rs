//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "IPSLT1"  u32 version  u32 entry_count
//! entry*:   u32 name_len  name (utf-8)  u64 payload_len  payload
//! ```
//!
//! Entries, in this order:
//!
//! | name            | payload                                              |
//! |-----------------|------------------------------------------------------|
//! | `config`        | run config as TOML                                   |
//! | `rng`           | u64 seed, u64 stream of the next training epoch      |
//! | `state`         | training state as JSON (optional)                    |
//! | `param/<name>`  | u32 rank, u64 dims, f32 values                       |
//! | `adam`          | u64 step count (optional)                            |
//! | `adam/<name>`   | u64 step, f32 first moments, f32 second moments      |

use std::path::Path;

use crate::config::RunConfig;
use crate::model::Model;
use crate::optim::{Adam, Moments};
use crate::rng::STREAM_EPOCH_BASE;
use crate::tensor::Tensor;
use crate::train::{adam_config, TrainState, Trainer};

pub const MAGIC: &[u8; 6] = b"IPSLT1";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub steps: u64,
    pub moments: Vec<(String, Moments<f32>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub seed: u64,
    pub next_stream: u64,
    pub state: Option<TrainState>,
    pub params: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn from_model(config: &RunConfig, model: &Model<f32>) -> Self {
        Self {
            config: config.clone(),
            seed: config.seed,
            next_stream: STREAM_EPOCH_BASE,
            state: None,
            params: model
                .store
                .iter()
                .map(|(_, e)| (e.name.clone(), e.value.as_ref().clone()))
                .collect(),
            optimizer: None,
        }
    }

    pub fn from_trainer(t: &Trainer) -> Self {
        let mut c = Self::from_model(&t.config, &t.model);
        c.next_stream = STREAM_EPOCH_BASE + t.state.epochs_done as u64;
        c.state = Some(t.state.clone());
        c.optimizer = Some(OptimizerState {
            steps: t.adam.steps,
            moments: t
                .model
                .store
                .iter()
                .map(|(id, e)| (e.name.clone(), t.adam.state[id.index()].clone()))
                .collect(),
        });
        c
    }

    /// Builds the model described by the stored config and fills in the
    /// stored parameters, which must match it name for name and shape for
    /// shape.
    pub fn model(&self) -> Result<Model<f32>> {
        let mut model = Model::new(self.config.model.clone(), self.config.seed).map_err(CheckpointError::Mismatch)?;
        let ids: Vec<_> = model.store.ids().collect();
        if ids.len() != self.params.len() {
            return Err(CheckpointError::Mismatch(format!(
                "model has {} parameters, checkpoint has {}",
                ids.len(),
                self.params.len()
            )));
        }
        for (id, (name, value)) in ids.into_iter().zip(&self.params) {
            let want = model.store.name(id).to_string();
            if &want != name {
                return Err(CheckpointError::Mismatch(format!("expected parameter {want}, found {name}")));
            }
            let have = model.store.get_mut(id);
            if have.shape() != value.shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "{name} has shape {:?} in the model but {:?} in the checkpoint",
                    have.shape(),
                    value.shape()
                )));
            }
            *have = value.clone();
        }
        Ok(model)
    }

    /// Restores a trainer; fails if optimiser or training state is missing.
    pub fn trainer(&self) -> Result<Trainer> {
        let model = self.model()?;
        let state = self
            .state
            .clone()
            .ok_or_else(|| CheckpointError::Format("no training state".into()))?;
        let opt = self
            .optimizer
            .as_ref()
            .ok_or_else(|| CheckpointError::Format("no optimizer state".into()))?;
        let mut adam = Adam::new(adam_config(&self.config), &model.store);
        adam.steps = opt.steps;
        for ((id, e), (name, m)) in model.store.iter().zip(&opt.moments) {
            if &e.name != name || m.m.len() != e.value.numel() || m.v.len() != e.value.numel() {
                return Err(CheckpointError::Mismatch(format!("optimizer entry {name} does not match {}", e.name)));
            }
            adam.state[id.index()] = m.clone();
        }
        Ok(Trainer {
            config: self.config.clone(),
            model,
            adam,
            state,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries: Vec<(String, Vec<u8>)> = Vec::new();
        entries.push(("config".into(), self.config.to_toml().into_bytes()));
        let mut rng = Vec::with_capacity(16);
        rng.extend(self.seed.to_le_bytes());
        rng.extend(self.next_stream.to_le_bytes());
        entries.push(("rng".into(), rng));
        if let Some(s) = &self.state {
            entries.push(("state".into(), serde_json::to_vec(s).expect("state serialises")));
        }
        for (name, t) in &self.params {
            let mut p = Vec::with_capacity(4 + 8 * t.shape().len() + 4 * t.numel());
            p.extend((t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                p.extend((d as u64).to_le_bytes());
            }
            put_f32s(&mut p, t.data());
            entries.push((format!("param/{name}"), p));
        }
        if let Some(o) = &self.optimizer {
            entries.push(("adam".into(), o.steps.to_le_bytes().to_vec()));
            for (name, m) in &o.moments {
                let mut p = Vec::with_capacity(8 + 8 * m.m.len());
                p.extend(m.step.to_le_bytes());
                put_f32s(&mut p, &m.m);
                put_f32s(&mut p, &m.v);
                entries.push((format!("adam/{name}"), p));
            }
        }
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((entries.len() as u32).to_le_bytes());
        for (name, payload) in entries {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((payload.len() as u64).to_le_bytes());
            out.extend(payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut config = None;
        let mut rng = None;
        let mut state = None;
        let mut params = Vec::new();
        let mut steps = None;
        let mut moments = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::Format("entry name is not utf-8".into()))?
                .to_string();
            let len = usize::try_from(r.u64()?).map_err(|_| CheckpointError::Format("entry too large".into()))?;
            let payload = r.take(len)?;
            let mut p = Reader { bytes: payload, pos: 0 };
            match name.as_str() {
                "config" => {
                    let text = std::str::from_utf8(payload)
                        .map_err(|_| CheckpointError::Format("config is not utf-8".into()))?;
                    config = Some(RunConfig::from_toml(text).map_err(|e| CheckpointError::Format(e.to_string()))?);
                    p.pos = payload.len();
                }
                "rng" => rng = Some((p.u64()?, p.u64()?)),
                "state" => {
                    state = Some(serde_json::from_slice(payload).map_err(|e| CheckpointError::Format(e.to_string()))?);
                    p.pos = payload.len();
                }
                "adam" => steps = Some(p.u64()?),
                _ => {
                    if let Some(pname) = name.strip_prefix("param/") {
                        let rank = p.u32()? as usize;
                        let shape = (0..rank).map(|_| p.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                        let n: usize = shape.iter().product();
                        let data = p.f32s(n)?;
                        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Format(e.to_string()))?;
                        params.push((pname.to_string(), t));
                    } else if let Some(pname) = name.strip_prefix("adam/") {
                        let step = p.u64()?;
                        let n = (payload.len() - 8) / 8;
                        let m = p.f32s(n)?;
                        let v = p.f32s(n)?;
                        moments.push((pname.to_string(), Moments { m, v, step }));
                    } else {
                        return Err(CheckpointError::Format(format!("unknown entry {name}")));
                    }
                }
            }
            if p.pos != payload.len() {
                return Err(CheckpointError::Format(format!("trailing bytes in entry {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Format("trailing bytes after the last entry".into()));
        }
        let config = config.ok_or_else(|| CheckpointError::Format("missing config".into()))?;
        let (seed, next_stream) = rng.ok_or_else(|| CheckpointError::Format("missing rng".into()))?;
        let optimizer = match steps {
            Some(steps) => Some(OptimizerState { steps, moments }),
            None if moments.is_empty() => None,
            None => return Err(CheckpointError::Format("optimizer moments without step count".into())),
        };
        Ok(Self {
            config,
            seed,
            next_stream,
            state,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend(x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Format("unexpected end of data".into())),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| CheckpointError::Format("entry too large".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut c = RunConfig::default();
        c.model.width = 8;
        c.model.heads = 2;
        c.model.layers = 1;
        c.model.ffn_dim = 16;
        c
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = small();
        let t = Trainer::new(c).unwrap();
        let ck = Checkpoint::from_trainer(&t);
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..6], b"IPSLT1");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let model = back.model().unwrap();
        for (id, e) in t.model.store.iter() {
            assert_eq!(model.store.get(id), e.value.as_ref());
        }
    }

    #[test]
    fn truncation_and_garbage_are_rejected() {
        let bytes = Checkpoint::from_trainer(&Trainer::new(small()).unwrap()).to_bytes();
        for cut in [0, 5, 14, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(CheckpointError::Format(_))));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn shape_and_name_mismatches_are_rejected() {
        let t = Trainer::new(small()).unwrap();
        let mut ck = Checkpoint::from_model(&t.config, &t.model);
        ck.params[0].1 = Tensor::zeros(vec![1, 1]);
        assert!(matches!(ck.model(), Err(CheckpointError::Mismatch(m)) if m.contains("shape")));
        let mut ck = Checkpoint::from_model(&t.config, &t.model);
        ck.params[1].0 = "bogus.weight".into();
        assert!(matches!(ck.model(), Err(CheckpointError::Mismatch(m)) if m.contains("bogus")));
        let mut ck = Checkpoint::from_model(&t.config, &t.model);
        ck.params.pop();
        assert!(ck.model().is_err());
    }
}
