//! Single-file checkpoints.
//!
//! Layout (little-endian): magic `AVFCKPT\0`, version byte, `u32` length and
//! UTF-8 text of the run configuration, `u64` step, `u64` seed, `u32`
//! parameter count, then per parameter a `u16`-prefixed name, `u8` rank,
//! `u32` dims and `f32` payload. The optimizer section follows: `u64` step
//! count and per parameter a presence byte followed by the first and second
//! moment payloads.

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pretrain::{AvMae, TrainState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"AVFCKPT\0";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Configuration text exactly as stored.
    pub config_text: String,
    /// Next training step.
    pub step: u64,
    /// Every data and mask stream is derived from `(seed, step)`.
    pub seed: u64,
    pub params: Vec<(String, Tensor<f32>)>,
    pub adam_t: u64,
    pub moments: Vec<Option<(Tensor<f32>, Tensor<f32>)>>,
}

impl Checkpoint {
    pub fn capture<T: Scalar>(config_text: &str, seed: u64, model: &AvMae<T>, state: &TrainState<T>) -> Self {
        Self {
            config_text: config_text.to_string(),
            step: state.step as u64,
            seed,
            params: model.params.iter().map(|p| (p.name.clone(), p.var.value().cast())).collect(),
            adam_t: state.opt.t,
            moments: state
                .opt
                .moments
                .iter()
                .map(|m| m.as_ref().map(|(a, b)| (a.cast(), b.cast())))
                .collect(),
        }
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.config_text, &[])
    }

    /// Loads parameters and optimizer state after checking that every name
    /// and shape matches; nothing is modified on mismatch.
    pub fn restore<T: Scalar>(&self, model: &AvMae<T>, state: &mut TrainState<T>) -> Result<()> {
        if self.moments.len() != self.params.len() {
            return Err(Error::Checkpoint("optimizer table does not match parameter table".into()));
        }
        for ((_, p), m) in self.params.iter().zip(&self.moments) {
            if let Some((a, b)) = m {
                if a.shape() != p.shape() || b.shape() != p.shape() {
                    return Err(Error::Checkpoint("optimizer moment shape mismatch".into()));
                }
            }
        }
        self.restore_params(model)?;
        state.step = self.step as usize;
        state.opt.t = self.adam_t;
        state.opt.moments = self
            .moments
            .iter()
            .map(|m| m.as_ref().map(|(a, b)| (a.cast(), b.cast())))
            .collect();
        Ok(())
    }

    pub fn restore_params<T: Scalar>(&self, model: &AvMae<T>) -> Result<()> {
        let values: Vec<(String, Tensor<T>)> = self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect();
        model
            .params
            .load(&values)
            .map_err(|e| Error::Checkpoint(format!("architecture mismatch: {e}")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_payload(&mut out, t);
        }
        out.extend_from_slice(&self.adam_t.to_le_bytes());
        for m in &self.moments {
            match m {
                None => out.push(0),
                Some((a, b)) => {
                    out.push(1);
                    put_payload(&mut out, a);
                    put_payload(&mut out, b);
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let config_text = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
        let step = r.u64()?;
        let seed = r.u64()?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let t = r.payload(&shape)?;
            params.push((name, t));
        }
        let adam_t = r.u64()?;
        let mut moments = Vec::with_capacity(n);
        for (_, p) in &params {
            moments.push(match r.u8()? {
                0 => None,
                1 => Some((r.payload(p.shape())?, r.payload(p.shape())?)),
                b => return Err(Error::Checkpoint(format!("bad optimizer flag {b}"))),
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config_text,
            step,
            seed,
            params,
            adam_t,
            moments,
        })
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

fn put_payload(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn payload(&mut self, shape: &[usize]) -> Result<Tensor<f32>> {
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("oversized tensor".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(shape, data)
    }
}
