//! Flat named-tensor archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "IDCVARCH"
//! version  u32      1
//! count    u32
//! count x entry:
//!   name_len u32, name (utf-8)
//!   ndim u32, dims u64 x ndim
//!   data f64 x prod(dims)
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{AdamW, Tensor};

use super::Dit;

const MAGIC: &[u8; 8] = b"IDCVARCH";
const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_archive(path: impl AsRef<Path>, entries: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| bad("truncated archive"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| bad("truncated archive"))?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated archive"))?;
    if &magic != MAGIC {
        return Err(bad("not a parameter archive"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported archive version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let n = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; n];
        r.read_exact(&mut name).map_err(|_| bad("truncated archive"))?;
        let name = String::from_utf8(name).map_err(|_| bad("entry name is not utf-8"))?;
        let ndim = read_u32(&mut r)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| read_u64(&mut r).map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

fn param_entries(model: &Dit) -> Vec<(String, Tensor)> {
    model
        .params
        .iter()
        .map(|p| {
            let mut t = p.tensor.clone();
            t.clear_grad();
            (p.name.clone(), t)
        })
        .collect()
}

pub fn save_model(model: &Dit, path: impl AsRef<Path>) -> Result<()> {
    write_archive(path, &param_entries(model))
}

/// Parameters plus optimizer moments (`adam.m/<name>`, `adam.v/<name>`)
/// and the step count (`adam.step`).
pub fn save_training(model: &Dit, opt: &AdamW, path: impl AsRef<Path>) -> Result<()> {
    let mut entries = param_entries(model);
    let (m, v) = opt.moments();
    for (i, p) in model.params.iter().enumerate() {
        let shape = p.tensor.shape().to_vec();
        entries.push((format!("adam.m/{}", p.name), Tensor::new(shape.clone(), m[i].clone())?));
        entries.push((format!("adam.v/{}", p.name), Tensor::new(shape, v[i].clone())?));
    }
    entries.push(("adam.step".into(), Tensor::scalar(opt.step as f64)));
    write_archive(path, &entries)
}

fn lookup<'a>(entries: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| bad(format!("archive has no entry `{name}`")))
}

/// Overwrites every model parameter from the archive. Names and shapes must
/// match exactly.
pub fn load_model(model: &mut Dit, path: impl AsRef<Path>) -> Result<()> {
    let entries = read_archive(path)?;
    restore_params(model, &entries)
}

fn restore_params(model: &mut Dit, entries: &[(String, Tensor)]) -> Result<()> {
    for p in model.params.iter_mut() {
        let t = lookup(entries, &p.name)?;
        if t.shape() != p.tensor.shape() {
            return Err(bad(format!(
                "`{}` has shape {:?} in the archive but {:?} in the model",
                p.name,
                t.shape(),
                p.tensor.shape()
            )));
        }
        p.tensor.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

pub fn load_training(model: &mut Dit, opt: &mut AdamW, path: impl AsRef<Path>) -> Result<()> {
    let entries = read_archive(path)?;
    restore_params(model, &entries)?;
    let mut m = Vec::new();
    let mut v = Vec::new();
    for p in model.params.iter() {
        m.push(lookup(&entries, &format!("adam.m/{}", p.name))?.data().to_vec());
        v.push(lookup(&entries, &format!("adam.v/{}", p.name))?.data().to_vec());
    }
    opt.set_moments(m, v);
    opt.step = lookup(&entries, "adam.step")?.item() as u64;
    Ok(())
}
