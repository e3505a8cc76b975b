//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "MTSCKPT\0"
//! version u32      1
//! count   u32      number of parameter records
//! record  * count:
//!   name_len u32, name (UTF-8), dtype u8 (0 = f32, 1 = f64),
//!   rank u32, extents u64 * rank, values (little-endian, row-major)
//! ```

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use super::{AutodiffError, DType, InitSpec, ParamStore, Real, Result};

pub const MAGIC: &[u8; 8] = b"MTSCKPT\0";
pub const VERSION: u32 = 1;

pub fn encode<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.scalar_count() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
        for &e in p.value.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in p.value.iter() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(AutodiffError::Checkpoint(format!(
                "truncated at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Decodes a checkpoint whose records all carry `T`'s dtype tag.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(AutodiffError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(AutodiffError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| AutodiffError::Checkpoint(format!("parameter name: {e}")))?
            .to_string();
        let tag = r.take(1)?[0];
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| AutodiffError::Checkpoint(format!("unknown dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(AutodiffError::Checkpoint(format!(
                "{name}: stored as {dtype:?}, requested {:?}",
                T::DTYPE
            )));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * T::BYTES)?;
        let data: Vec<T> = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        let value = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| AutodiffError::Checkpoint(format!("{name}: {e}")))?;
        if store.id_of(&name).is_some() {
            return Err(AutodiffError::Checkpoint(format!("duplicate parameter {name}")));
        }
        store.insert(&name, value, InitSpec::Zeros);
    }
    if r.pos != bytes.len() {
        return Err(AutodiffError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(store)
}

pub fn save<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(store))?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<ParamStore<T>> {
    decode(&fs::read(path)?)
}

/// Copies values from `src` into `dst` by name; every parameter of `dst`
/// must be present in `src` with the same shape.
pub fn restore_into<T: Real>(dst: &mut ParamStore<T>, src: &ParamStore<T>) -> Result<()> {
    if dst.len() != src.len() {
        return Err(AutodiffError::Checkpoint(format!(
            "parameter count {} vs checkpoint {}",
            dst.len(),
            src.len()
        )));
    }
    let updates: Vec<_> = dst
        .iter()
        .map(|(id, p)| {
            let sid = src
                .id_of(&p.name)
                .ok_or_else(|| AutodiffError::Checkpoint(format!("missing {}", p.name)))?;
            let v = &src.get(sid).value;
            if v.shape() != p.value.shape() {
                return Err(AutodiffError::Checkpoint(format!(
                    "{}: shape {:?} vs checkpoint {:?}",
                    p.name,
                    p.value.shape(),
                    v.shape()
                )));
            }
            Ok((id, v.as_ref().clone()))
        })
        .collect::<Result<_>>()?;
    for (id, v) in updates {
        dst.set_value(id, v);
    }
    Ok(())
}
