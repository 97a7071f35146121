//! `CGCK` checkpoint files.
//!
//! Layout (little-endian): magic, u16 version, 32-byte SHA-256 of the
//! config TOML, u32 length plus the TOML text, u32 entry count, then per
//! entry a u16 name length, the name, u8 rank, u32 extents, and f32 values.
//! Batch-norm running statistics are stored as `<buffer>.mean` and
//! `<buffer>.var` entries after the parameters.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::data::formats::Reader;
use crate::error::{Error, Result};
use crate::model::ComboGait;
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CGCK";
pub const CHECKPOINT_VERSION: u16 = 1;

fn put_entry(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f32]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn checkpoint_bytes(config: &Config, model: &ComboGait<f32>) -> Vec<u8> {
    let text = config.to_toml();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&config.digest());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let n = model.store.len() + 2 * model.store.buffers().len();
    out.extend_from_slice(&(n as u32).to_le_bytes());
    for p in model.store.iter() {
        put_entry(&mut out, &p.name, p.value.shape(), p.value.data());
    }
    for b in model.store.buffers() {
        put_entry(&mut out, &format!("{}.mean", b.name), &[b.stats.mean.len()], &b.stats.mean);
        put_entry(&mut out, &format!("{}.var", b.name), &[b.stats.var.len()], &b.stats.var);
    }
    out
}

pub fn save_checkpoint(path: &Path, config: &Config, model: &ComboGait<f32>) -> Result<()> {
    Ok(std::fs::write(path, checkpoint_bytes(config, model))?)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(Config, ComboGait<f32>)> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let at = r.pos as u64;
    let v = r.u16()?;
    if v != CHECKPOINT_VERSION {
        return Err(Error::format(at, format!("unsupported checkpoint version {v}")));
    }
    let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let len = r.u32()? as usize;
    let text_at = r.pos as u64;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format(text_at, "config text is not UTF-8"))?;
    let config = Config::from_toml(text)?;
    if config.digest() != digest {
        return Err(Error::format(6, "config digest does not match the embedded config"));
    }
    let mut model = ComboGait::<f32>::new(&config.model, &mut ChaCha8Rng::seed_from_u64(0))?;
    let count = r.u32()? as usize;
    let expected = model.store.len() + 2 * model.store.buffers().len();
    if count != expected {
        return Err(Error::format(r.pos as u64 - 4, format!("{count} entries, model has {expected}")));
    }
    for _ in 0..count {
        let start = r.pos as u64;
        let nlen = r.u16()? as usize;
        let name = String::from_utf8_lossy(r.take(nlen)?).into_owned();
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let values: Vec<f32> = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(p) = model.store.by_name_mut(&name) {
            if p.value.shape() != shape.as_slice() {
                return Err(Error::format(start, format!("{name}: shape {shape:?}, model expects {:?}", p.value.shape())));
            }
            p.value = Tensor::new(&shape, values)?;
            continue;
        }
        let buf = name
            .strip_suffix(".mean")
            .map(|b| (b, true))
            .or_else(|| name.strip_suffix(".var").map(|b| (b, false)));
        let slot = buf.and_then(|(b, is_mean)| {
            model
                .store
                .buffers_mut()
                .iter_mut()
                .find(|x| x.name == b)
                .map(|x| if is_mean { &mut x.stats.mean } else { &mut x.stats.var })
        });
        match slot {
            Some(s) if s.len() == values.len() => *s = values,
            _ => return Err(Error::format(start, format!("unexpected entry {name} {shape:?}"))),
        }
    }
    r.finish()?;
    Ok((config, model))
}

pub fn load_checkpoint(path: &Path) -> Result<(Config, ComboGait<f32>)> {
    parse_checkpoint(&std::fs::read(path)?)
}
