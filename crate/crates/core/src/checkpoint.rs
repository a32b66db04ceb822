//! Binary checkpoints of parameters, optimizer velocities and stream positions.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "RLCKPT\0\0"
//! version  u32      1
//! epoch    u64
//! step     u64
//! params   u32 count, then per parameter:
//!            name (u32 length + UTF-8), owner u8, decay u8,
//!            ndim u32, dims u64 × ndim, value f64 × len, velocity f64 × len
//! streams  u32 count, then per stream:
//!            name (u32 length + UTF-8), seed u64, word_pos u128
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::Owner;
use crate::tensor::Tensor;
use crate::training::{RngStreams, StreamPosition, Trainer};

const MAGIC: &[u8; 8] = b"RLCKPT\0\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub owner: Owner,
    pub decay: bool,
    pub value: Tensor,
    pub velocity: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: u64,
    pub step: u64,
    pub params: Vec<ParamRecord>,
    pub streams: Vec<StreamPosition>,
}

impl Checkpoint {
    pub fn capture(trainer: &Trainer) -> Self {
        let params = trainer
            .model
            .store
            .iter()
            .map(|(id, p)| ParamRecord {
                name: p.name.clone(),
                owner: p.owner,
                decay: p.decay,
                value: p.value.clone(),
                velocity: trainer.opt.velocity(id).clone(),
            })
            .collect();
        Self {
            epoch: trainer.epoch() as u64,
            step: trainer.step() as u64,
            params,
            streams: trainer.streams.positions(),
        }
    }

    /// Loads parameters, velocities, streams and progress into a trainer built from the same config.
    pub fn restore_into(&self, trainer: &mut Trainer) -> Result<()> {
        if self.params.len() != trainer.model.store.len() {
            return Err(Error::Validation(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                trainer.model.store.len()
            )));
        }
        for rec in &self.params {
            let id = trainer
                .model
                .store
                .find(&rec.name)
                .ok_or_else(|| Error::Validation(format!("model has no parameter {}", rec.name)))?;
            let param = trainer.model.store.get_mut(id);
            if param.value.shape() != rec.value.shape() || param.owner != rec.owner {
                return Err(Error::Validation(format!("parameter {} does not match the model", rec.name)));
            }
            param.value = rec.value.clone();
            trainer.opt.set_velocity(id, rec.velocity.clone())?;
        }
        trainer.streams = RngStreams::restore(&self.streams)?;
        trainer.set_progress(self.epoch as usize, self.step as usize);
        Ok(())
    }

    /// Parameters of one group, in storage order.
    pub fn owned_by(&self, owner: Owner) -> impl Iterator<Item = &ParamRecord> {
        self.params.iter().filter(move |p| p.owner == owner)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            put_str(&mut out, &p.name);
            out.push(p.owner.code());
            out.push(u8::from(p.decay));
            out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for t in [&p.value, &p.velocity] {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out.extend_from_slice(&(self.streams.len() as u32).to_le_bytes());
        for s in &self.streams {
            put_str(&mut out, &s.name);
            out.extend_from_slice(&s.seed.to_le_bytes());
            out.extend_from_slice(&s.word_pos.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format { offset: 0, message: "not a checkpoint file".into() });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format { offset: 8, message: format!("unsupported checkpoint version {version}") });
        }
        let epoch = r.u64()?;
        let step = r.u64()?;
        let n_params = r.u32()? as usize;
        let mut params = Vec::with_capacity(n_params.min(1 << 16));
        for _ in 0..n_params {
            let name = r.string()?;
            let at = r.pos;
            let owner = Owner::from_code(r.u8()?)
                .ok_or_else(|| Error::Format { offset: at, message: "unknown parameter owner".into() })?;
            let decay = r.u8()? != 0;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let value = Tensor::new(shape.clone(), r.f64s(len)?)?;
            let velocity = Tensor::new(shape, r.f64s(len)?)?;
            params.push(ParamRecord { name, owner, decay, value, velocity });
        }
        let n_streams = r.u32()? as usize;
        let mut streams = Vec::with_capacity(n_streams.min(64));
        for _ in 0..n_streams {
            let name = r.string()?;
            let seed = r.u64()?;
            let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
            streams.push(StreamPosition { name, seed, word_pos });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format { offset: r.pos, message: "trailing bytes after checkpoint".into() });
        }
        Ok(Self { epoch, step, params, streams })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            offset: self.bytes.len(),
            message: format!("truncated: need {n} bytes at offset {}", self.pos),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format { offset: self.pos, message: "size overflow".into() })?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Format { offset: at, message: "invalid UTF-8 name".into() })
    }
}
