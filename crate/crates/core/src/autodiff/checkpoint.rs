//! Binary checkpoint of a [`ParamStore`].
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "GATSPCK1"
//! count      u32      number of entries
//! entry*     repeated `count` times:
//!   kind     u8       0 = trainable, 1 = buffer
//!   name_len u32
//!   name     name_len bytes, UTF-8
//!   ndim     u32
//!   dims     ndim x u64
//!   values   prod(dims) x f64
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::params::{ParamKind, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"GATSPCK1";

pub fn write_checkpoint<W: Write>(store: &ParamStore, mut out: W) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, p) in store.iter() {
        let kind = match p.kind() {
            ParamKind::Trainable => 0u8,
            ParamKind::Buffer => 1u8,
        };
        out.write_all(&[kind])?;
        out.write_all(&(p.name().len() as u32).to_le_bytes())?;
        out.write_all(p.name().as_bytes())?;
        out.write_all(&(p.shape().len() as u32).to_le_bytes())?;
        for &d in p.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.value() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<ParamStore> {
    let bad = |e: std::io::Error| Error::Checkpoint(format!("truncated checkpoint: {e}"));
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(bad)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let count = read_u32(&mut input).map_err(bad)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let mut kind = [0u8; 1];
        input.read_exact(&mut kind).map_err(bad)?;
        let kind = match kind[0] {
            0 => ParamKind::Trainable,
            1 => ParamKind::Buffer,
            k => return Err(Error::Checkpoint(format!("unknown entry kind {k}"))),
        };
        let name_len = read_u32(&mut input).map_err(bad)? as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name).map_err(bad)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
        let ndim = read_u32(&mut input).map_err(bad)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            input.read_exact(&mut b).map_err(bad)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        input.read_exact(&mut raw).map_err(bad)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.add(name, Tensor::new(shape, data)?, kind)?;
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(store, &mut buf).expect("writing to a Vec cannot fail");
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(bytes.as_slice())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
