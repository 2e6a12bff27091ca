//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "BGNNPAR1"
//! count      u32      number of entries
//! entry*     u32 name length, UTF-8 name,
//!            u32 rank, rank × u64 extents,
//!            product(extents) × f32 values
//! ```
//!
//! Entries keep store order, so writing the same store twice yields the same bytes.

use std::io::{Read, Write};

use crate::error::{Result, TensorError};
use crate::param::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BGNNPAR1";

pub fn write_checkpoint<W: Write>(store: &ParamStore<f32>, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, p) in store.iter() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
        for &d in &p.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(p.data.len() * 4);
        for v in &p.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            TensorError::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore<f32>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let count = c.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| TensorError::Checkpoint("parameter name is not UTF-8".into()))?
            .to_owned();
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let n = n.ok_or_else(|| TensorError::Checkpoint(format!("`{name}`: extents overflow")))?;
        let raw = c.take(n.checked_mul(4).ok_or_else(|| TensorError::Checkpoint("size overflow".into()))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        store.add(name, &shape, data)?;
    }
    if c.pos != bytes.len() {
        return Err(TensorError::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(store)
}
