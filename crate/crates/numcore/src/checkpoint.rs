//! Binary checkpoint format.
//!
//! Layout (all integers little-endian `u32`):
//! `b"NCKP"`, version, parameter count, then per parameter: name length,
//! UTF-8 name, rank, each extent, and the values as little-endian `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{NumError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NCKP";
pub const VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_checkpoint(store: &ParamStore, mut w: impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(&mut w, VERSION)?;
    put_u32(&mut w, store.len() as u32)?;
    for (_, p) in store.iter() {
        put_u32(&mut w, p.name.len() as u32)?;
        w.write_all(p.name.as_bytes())?;
        put_u32(&mut w, p.value.shape().len() as u32)?;
        for &d in p.value.shape() {
            put_u32(&mut w, d as u32)?;
        }
        for &x in p.value.data() {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NumError::Checkpoint("bad magic bytes".into()));
    }
    let version = get_u32(&mut r)?;
    if version != VERSION {
        return Err(NumError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = get_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = get_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| NumError::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = get_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| get_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(store, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint into an existing store; names and shapes must match exactly.
pub fn load_into(store: &mut ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let entries = read_checkpoint(BufReader::new(File::open(path)?))?;
    if entries.len() != store.len() {
        return Err(NumError::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, t) in entries {
        let id = store
            .by_name(&name)
            .ok_or_else(|| NumError::Checkpoint(format!("unknown parameter {name}")))?;
        let p = store.get_mut(id);
        if p.value.shape() != t.shape() {
            return Err(NumError::Checkpoint(format!(
                "shape mismatch for {name}: {:?} vs {:?}",
                p.value.shape(),
                t.shape()
            )));
        }
        p.value = t;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("enc.w", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5 - 1.0));
        s.add("enc.b", Tensor::from_fn(&[3], |i| i as f64));
        s
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let src = store();
        save(&src, &path).unwrap();
        let mut dst = store();
        for id in dst.ids().collect::<Vec<_>>() {
            dst.get_mut(id).value.data_mut().fill(0.0);
        }
        load_into(&mut dst, &path).unwrap();
        for ((_, a), (_, b)) in src.iter().zip(dst.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn rejects_unknown_version() {
        let mut bytes = Vec::new();
        write_checkpoint(&store(), &mut bytes).unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        let err = read_checkpoint(&bytes[..]).unwrap_err();
        assert!(err.to_string().contains("version 7"));
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(read_checkpoint(&b"XXXX\x01\0\0\0"[..]).is_err());
    }
}
