//! Versioned binary checkpoints for a parameter store. Little-endian
//! throughout; entries are written in name order so identical stores produce
//! identical bytes.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{ParamEntry, ParamStore};
use crate::tape::{Elem, Owner};
use crate::tensor::Tensor;

const MAGIC: &[u8; 6] = b"LTCKPT";
const VERSION: u16 = 1;

fn owner_code(owner: Owner) -> u8 {
    match owner {
        Owner::Backbone => 0,
        Owner::Side => 1,
        Owner::Ladder => 2,
        Owner::Inserted => 3,
        Owner::Head => 4,
        Owner::Other => 5,
    }
}

fn owner_from(code: u8) -> Result<Owner> {
    Ok(match code {
        0 => Owner::Backbone,
        1 => Owner::Side,
        2 => Owner::Ladder,
        3 => Owner::Inserted,
        4 => Owner::Head,
        5 => Owner::Other,
        _ => return Err(Error::Checkpoint(format!("unknown owner code {code}"))),
    })
}

pub fn save<E: Elem>(store: &ParamStore<E>, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, entry) in store.iter() {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[entry.trainable as u8, owner_code(entry.owner)])?;
        let shape = entry.tensor.shape();
        w.write_all(&(shape.len() as u8).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in entry.tensor.data() {
            w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn load<E: Elem>(path: &Path) -> Result<ParamStore<E>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 6];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}; not a checkpoint file",
            &magic
        )));
    }
    let mut ver = [0u8; 2];
    read_exact(&mut r, &mut ver)?;
    let version = u16::from_le_bytes(ver);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "version {version} not supported (expected {VERSION})"
        )));
    }
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".to_string()))?;
        let mut flags = [0u8; 2];
        read_exact(&mut r, &mut flags)?;
        let trainable = match flags[0] {
            0 => false,
            1 => true,
            v => return Err(Error::Checkpoint(format!("bad trainable flag {v}"))),
        };
        let owner = owner_from(flags[1])?;
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 4];
        for _ in 0..numel {
            read_exact(&mut r, &mut b)?;
            data.push(E::from_f64(f32::from_le_bytes(b) as f64));
        }
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        store.insert(&name, tensor, trainable, owner)?;
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(Error::from)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last entry".to_string()));
    }
    Ok(store)
}

/// Round-trip sanity check used by tests: save then load and compare.
pub fn verify_roundtrip<E: Elem>(store: &ParamStore<E>, path: &Path) -> Result<bool> {
    save(store, path)?;
    let loaded: ParamStore<E> = load(path)?;
    if loaded.len() != store.len() {
        return Ok(false);
    }
    for (name, entry) in store.iter() {
        let other: &ParamEntry<E> = loaded.get(name)?;
        if other.trainable != entry.trainable
            || other.owner != entry.owner
            || other.tensor.shape() != entry.tensor.shape()
        {
            return Ok(false);
        }
        for (&a, &b) in entry.tensor.data().iter().zip(other.tensor.data().iter()) {
            if (a.to_f64() as f32) != (b.to_f64() as f32) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}
