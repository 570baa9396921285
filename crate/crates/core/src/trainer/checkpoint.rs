//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//! magic `CGAN`, `u16` version, `u32`-prefixed UTF-8 config echo, `u32`
//! record count, records, and an FNV-1a 64 checksum of everything before it.
//! A record is a `u32`-prefixed name, `u32` rank, `rank` `u32` extents and
//! the `f32` values. Weights and buffers are named `g.`, `da.` or `dt.` plus
//! the parameter name; Adam moments append `#m` / `#v`.

use std::hash::Hasher;
use std::io::Write;
use std::path::Path;

use fnv::FnvHasher;

use super::config::{parse_kv, TrainConfig};
use super::ModelBundle;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::nn::{AdamGroup, ParamStore};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CGAN";
pub const CHECKPOINT_VERSION: u16 = 1;

const ITERATION_KEY: &str = "iteration";
const STEP_KEYS: [&str; 3] = ["adam_steps_g", "adam_steps_da", "adam_steps_dt"];

fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank())?;
    for &d in t.dims() {
        put_u32(out, d)?;
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn stores(b: &ModelBundle) -> [(&'static str, &ParamStore, &AdamGroup); 3] {
    [
        ("g", &b.generator.params, &b.adam_g),
        ("da", &b.d_age.params, &b.adam_da),
        ("dt", &b.d_trans.params, &b.adam_dt),
    ]
}

/// Serialises `bundle` to bytes.
pub fn encode_checkpoint(bundle: &ModelBundle) -> Result<Vec<u8>> {
    let mut echo = bundle.config.to_text();
    echo.push_str(&format!("{ITERATION_KEY}={}\n", bundle.iteration));
    for ((_, _, adam), key) in stores(bundle).iter().zip(STEP_KEYS) {
        echo.push_str(&format!("{key}={}\n", adam.steps()));
    }

    let mut records: Vec<(String, &Tensor)> = Vec::new();
    for (prefix, store, adam) in stores(bundle) {
        for (p, st) in store.iter().zip(&adam.states) {
            records.push((format!("{prefix}.{}", p.name), &p.tensor));
            if let Some(st) = st {
                records.push((format!("{prefix}.{}#m", p.name), &st.m));
                records.push((format!("{prefix}.{}#v", p.name), &st.v));
            }
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, echo.len())?;
    out.extend_from_slice(echo.as_bytes());
    put_u32(&mut out, records.len())?;
    for (name, t) in &records {
        put_record(&mut out, name, t)?;
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

/// Writes `bundle` to `path` atomically (temporary file, then rename).
pub fn save_checkpoint(bundle: &ModelBundle, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(bundle)?;
    let tmp = path.with_extension("cgan.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn str(&mut self) -> Result<&'a str> {
        let n = self.u32()?;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Format("non-UTF-8 text in checkpoint".into()))
    }
}

struct Decoded {
    config: TrainConfig,
    iteration: u64,
    steps: [u64; 3],
    records: Vec<(String, Tensor)>,
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    if bytes.len() < 4 + 2 + 8 {
        return Err(Error::Format(format!("checkpoint of {} bytes is truncated", bytes.len())));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad magic: not a checkpoint file".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));
    if checksum(body) != stored {
        return Err(Error::Format("checksum mismatch: checkpoint is truncated or corrupt".into()));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }

    let mut kv = parse_kv(r.str()?)?;
    let mut take_u64 = |key: &str| -> Result<u64> {
        kv.remove(key)
            .ok_or_else(|| Error::Format(format!("config echo lacks `{key}`")))?
            .parse()
            .map_err(|_| Error::Format(format!("config echo has a malformed `{key}`")))
    };
    let iteration = take_u64(ITERATION_KEY)?;
    let steps = [take_u64(STEP_KEYS[0])?, take_u64(STEP_KEYS[1])?, take_u64(STEP_KEYS[2])?];
    let config = TrainConfig::from_pairs(kv.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;

    let count = r.u32()?;
    let mut records = Vec::new();
    for _ in 0..count {
        let name = r.str()?.to_string();
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Format(format!("extents of `{name}` overflow")))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("record too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        records.push((name, Tensor::new(&dims, data)?));
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes after records", body.len() - r.pos)));
    }
    Ok(Decoded {
        config,
        iteration,
        steps,
        records,
    })
}

fn install(bundle: &mut ModelBundle, d: Decoded) -> Result<()> {
    let mut records: std::collections::HashMap<String, Tensor> = d.records.into_iter().collect();
    let mut fill = |name: String, dst: &mut Tensor| -> Result<()> {
        let src = records
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))?;
        if src.dims() != dst.dims() {
            return Err(Error::ShapeMismatch {
                name,
                expected: dst.dims().to_vec(),
                found: src.dims().to_vec(),
            });
        }
        *dst = src;
        Ok(())
    };
    let parts = [
        ("g", &mut bundle.generator.params, &mut bundle.adam_g),
        ("da", &mut bundle.d_age.params, &mut bundle.adam_da),
        ("dt", &mut bundle.d_trans.params, &mut bundle.adam_dt),
    ];
    for ((prefix, store, adam), steps) in parts.into_iter().zip(d.steps) {
        for (p, st) in store.iter_mut().zip(adam.states.iter_mut()) {
            fill(format!("{prefix}.{}", p.name), &mut p.tensor)?;
            if let Some(st) = st {
                fill(format!("{prefix}.{}#m", p.name), &mut st.m)?;
                fill(format!("{prefix}.{}#v", p.name), &mut st.v)?;
                st.step = steps;
            }
        }
    }
    if let Some(name) = records.keys().next() {
        return Err(Error::Format(format!("checkpoint has unexpected tensor `{name}`")));
    }
    bundle.iteration = d.iteration;
    Ok(())
}

/// Restores the bundle stored at `path`, architecture taken from its echo.
pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    let d = decode(&std::fs::read(path)?)?;
    let mut bundle = ModelBundle::new(&d.config)?;
    install(&mut bundle, d)?;
    Ok(bundle)
}

/// Restores the checkpoint at `path` into networks built from `config`.
/// A tensor whose shape disagrees with `config` is a shape mismatch naming
/// that tensor.
pub fn load_checkpoint_as(path: &Path, config: &TrainConfig) -> Result<ModelBundle> {
    let d = decode(&std::fs::read(path)?)?;
    let mut bundle = ModelBundle::new(config)?;
    install(&mut bundle, d)?;
    Ok(bundle)
}
