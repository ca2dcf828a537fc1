//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes   "PSEGCKPT"
//! version  u32 LE
//! count    u64 LE
//! record*  name_len u64 LE | name bytes (UTF-8) | rank u64 LE |
//!          dims rank x u64 LE | data numel x f32 LE
//! ```

use std::io::{Read, Write};

use crate::error::{NumericsError, Result};
use crate::{ParamStore, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PSEGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

// Guards against absurd allocations from corrupt headers.
const MAX_NAME_LEN: u64 = 1 << 16;
const MAX_RANK: u64 = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

fn bad(msg: impl Into<String>) -> NumericsError {
    NumericsError::Checkpoint(msg.into())
}

pub fn write_checkpoint<T: Scalar, W: Write>(mut w: W, store: &ParamStore<T>) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.tensor.shape();
        w.write_all(&(shape.len() as u64).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(p.tensor.numel() * 4);
        for &v in p.tensor.data() {
            buf.extend_from_slice(&v.to_le_f32_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<CheckpointRecord>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut vb = [0u8; 4];
    r.read_exact(&mut vb)?;
    let version = u32::from_le_bytes(vb);
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = read_u64(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let name_len = read_u64(&mut r)?;
        if name_len > MAX_NAME_LEN {
            return Err(bad(format!("name length {name_len}")));
        }
        let mut name = vec![0u8; name_len as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?;
        let rank = read_u64(&mut r)?;
        if rank > MAX_RANK {
            return Err(bad(format!("rank {rank} for {name}")));
        }
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| bad(format!("shape overflow for {name}")))?;
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(CheckpointRecord { name, shape, data });
    }
    Ok(out)
}

impl<T: Scalar> ParamStore<T> {
    /// Copies checkpoint values into parameters of the same name and shape.
    /// Every parameter in the store must be present in `records`.
    pub fn load_records(&mut self, records: &[CheckpointRecord]) -> Result<()> {
        for rec in records {
            let id = self.id(&rec.name)?;
            let data = rec
                .data
                .iter()
                .map(|&v| T::from_f64_lossy(v as f64))
                .collect();
            let t = Tensor::new(&rec.shape, data)?;
            if self.tensor(id).shape() != t.shape() {
                return Err(bad(format!(
                    "{}: checkpoint shape {:?} vs model {:?}",
                    rec.name,
                    rec.shape,
                    self.tensor(id).shape()
                )));
            }
            self.get_mut(id).tensor = t;
        }
        if let Some((_, missing)) = self
            .iter()
            .find(|(_, p)| !records.iter().any(|r| r.name == p.name))
        {
            return Err(bad(format!("missing parameter {}", missing.name)));
        }
        Ok(())
    }
}
