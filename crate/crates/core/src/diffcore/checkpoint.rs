//! Parameter checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "HLCKPT\0\0"
//! version  u32      = 1
//! step     u64      optimizer step counter
//! count    u32      number of entries, in name order
//! entry*:
//!   name_len u32, name (UTF-8)
//!   rank u32, dims u64 * rank
//!   values f64 * numel, adam_m f64 * numel, adam_v f64 * numel
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::{ParamStore, Slot};
use super::tensor::{numel, Tensor};
use super::DiffError;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"HLCKPT\0\0";
pub const VERSION: u32 = 1;

fn io_err(e: std::io::Error) -> DiffError {
    DiffError::Checkpoint(e.to_string())
}

fn write_f64s<T: Scalar, W: Write>(w: &mut W, xs: &[T]) -> Result<(), DiffError> {
    for x in xs {
        w.write_all(&x.as_f64().to_le_bytes()).map_err(io_err)?;
    }
    Ok(())
}

pub fn write_checkpoint<T: Scalar, W: Write>(store: &ParamStore<T>, mut w: W) -> Result<(), DiffError> {
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&store.step.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(store.slots.len() as u32).to_le_bytes()).map_err(io_err)?;
    for (name, slot) in &store.slots {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(name.as_bytes()).map_err(io_err)?;
        let shape = slot.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes()).map_err(io_err)?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
        }
        write_f64s(&mut w, slot.value.data())?;
        write_f64s(&mut w, &slot.m)?;
        write_f64s(&mut w, &slot.v)?;
    }
    w.flush().map_err(io_err)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, DiffError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, DiffError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s<T: Scalar, R: Read>(r: &mut R, n: usize) -> Result<Vec<T>, DiffError> {
    (0..n)
        .map(|_| {
            let v = f64::from_bits(read_u64(r)?);
            T::from_f64(v).ok_or_else(|| DiffError::Checkpoint("value not representable".into()))
        })
        .collect()
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<ParamStore<T>, DiffError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(DiffError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(DiffError::Checkpoint(format!("unsupported version {}", version)));
    }
    let step = read_u64(&mut r)?;
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    store.step = step;
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(io_err)?;
        let name = String::from_utf8(name).map_err(|e| DiffError::Checkpoint(e.to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n = numel(&shape);
        let value = Tensor::new(shape, read_f64s(&mut r, n)?)?;
        let m = read_f64s(&mut r, n)?;
        let v = read_f64s(&mut r, n)?;
        if store.slots.insert(name.clone(), Slot { value, m, v }).is_some() {
            return Err(DiffError::DuplicateParam(name));
        }
    }
    Ok(store)
}

pub fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<(), DiffError> {
    write_checkpoint(store, BufWriter::new(File::create(path).map_err(io_err)?))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ParamStore<T>, DiffError> {
    read_checkpoint(BufReader::new(File::open(path).map_err(io_err)?))
}
