//! Binary checkpoints: magic, version, a JSON header, then raw
//! little-endian `f64` arrays for parameters and Adam moments.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelParams, ModelShape, OptimState};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"NMTLABCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub shape: ModelShape,
    pub src_vocab_hash: String,
    pub tgt_vocab_hash: String,
    pub iteration: u64,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams,
    pub optim: OptimState,
}

impl Checkpoint {
    pub fn new(
        params: ModelParams,
        optim: OptimState,
        src_vocab_hash: String,
        tgt_vocab_hash: String,
        iteration: u64,
    ) -> Self {
        let meta = CheckpointMeta {
            shape: *params.shape(),
            src_vocab_hash,
            tgt_vocab_hash,
            iteration,
            step: optim.step,
            lr: optim.lr,
            beta1: optim.beta1,
            beta2: optim.beta2,
            eps: optim.eps,
        };
        Self {
            meta,
            params,
            optim,
        }
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let header = serde_json::to_vec(&ck.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let n = ck.params.len();
    let mut out = Vec::with_capacity(32 + header.len() + 24 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for arr in [ck.params.values(), &ck.optim.m, &ck.optim.v] {
        for x in arr {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let header_len = r.u64()? as usize;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(header_len)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let n = r.u64()? as usize;
    let values = r.f64s(n)?;
    let m = r.f64s(n)?;
    let v = r.f64s(n)?;
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let params = ModelParams::from_values(meta.shape, values)?;
    let optim = OptimState {
        m,
        v,
        step: meta.step,
        lr: meta.lr,
        beta1: meta.beta1,
        beta2: meta.beta2,
        eps: meta.eps,
    };
    Ok(Checkpoint {
        meta,
        params,
        optim,
    })
}
