//! Versioned binary parameter checkpoints.
//!
//! Layout: magic "SRFCHKPT", u32 version, u32 metadata length + UTF-8
//! metadata (the self-describing network architecture block), u32 parameter
//! count, then per parameter: u32 name length, name bytes, u64 value count,
//! little-endian f64 values. Round-trips bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::param::ParamSet;
use crate::error::{Error, Result};
use crate::num::Real;

const MAGIC: &[u8; 8] = b"SRFCHKPT";
const VERSION: u32 = 1;

pub fn write_checkpoint<T: Real>(path: &Path, params: &ParamSet<T>, meta: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let mb = meta.as_bytes();
    w.write_all(&(mb.len() as u32).to_le_bytes())?;
    w.write_all(mb)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (_, p) in params.iter() {
        let nb = p.name.as_bytes();
        w.write_all(&(nb.len() as u32).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&(p.values.len() as u64).to_le_bytes())?;
        for &v in &p.values {
            w.write_all(&v.to_f64_lossy().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub struct Checkpoint {
    pub meta: String,
    pub params: Vec<(String, Vec<f64>)>,
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = read_u32(&mut r)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)?;
    let meta = String::from_utf8(meta_bytes)
        .map_err(|_| Error::Format("checkpoint metadata is not UTF-8".into()))?;
    let count = read_u32(&mut r)? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let n = read_u64(&mut r)? as usize;
        let mut vals = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            vals.push(f64::from_le_bytes(buf));
        }
        params.push((name, vals));
    }
    Ok(Checkpoint { meta, params })
}

/// Copies checkpoint values into an already-registered parameter set,
/// matching by name; lengths must agree.
pub fn load_into<T: Real>(ck: &Checkpoint, params: &mut ParamSet<T>) -> Result<()> {
    for (name, vals) in &ck.params {
        let id = params
            .find(name)
            .ok_or_else(|| Error::Format(format!("checkpoint parameter {name} not registered")))?;
        let dst = params.values_mut(id);
        if dst.len() != vals.len() {
            return Err(Error::Format(format!(
                "parameter {name}: checkpoint has {} values, expected {}",
                vals.len(),
                dst.len()
            )));
        }
        for (d, &v) in dst.iter_mut().zip(vals) {
            *d = T::of(v);
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut ps = ParamSet::<f64>::new();
        ps.register("a", vec![1.0, -2.5, 1e-300, std::f64::consts::PI]);
        ps.register("b.long_name", vec![0.1f64.sin(); 7]);
        let dir = std::env::temp_dir().join("surfrec_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.bin");
        write_checkpoint(&path, &ps, "arch v1\nwidths = 4").unwrap();
        let ck = read_checkpoint(&path).unwrap();
        assert_eq!(ck.meta, "arch v1\nwidths = 4");
        assert_eq!(ck.params.len(), 2);
        for ((name, vals), (_, p)) in ck.params.iter().zip(ps.iter()) {
            assert_eq!(name, &p.name);
            assert_eq!(vals.len(), p.values.len());
            for (a, b) in vals.iter().zip(&p.values) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        let mut ps2 = ParamSet::<f64>::new();
        ps2.register("a", vec![0.0; 4]);
        ps2.register("b.long_name", vec![0.0; 7]);
        load_into(&ck, &mut ps2).unwrap();
        assert_eq!(ps2.values(ps2.find("a").unwrap()), ps.values(ps.find("a").unwrap()));
    }
}
