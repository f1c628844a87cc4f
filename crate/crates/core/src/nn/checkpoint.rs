//! Binary checkpoint: `MABN` magic, format version, the architecture as
//! JSON, flags, every parameter buffer as little-endian `f64`, per-layer BN
//! mode, the optional BYOL target, and a trailing CRC32 of everything before it.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::bn::{BnMode, BnState, Branch};
use super::model::{ByolTargetState, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MABN";
pub const FORMAT_VERSION: u32 = 1;

const FLAG_SSL: u8 = 1;
const FLAG_TARGET: u8 = 2;
const FLAG_FREEZE: u8 = 4;

pub fn encode(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    let cfg = serde_json::to_vec(model.config()).expect("config serializes");
    put_u32(&mut out, cfg.len() as u32);
    out.extend_from_slice(&cfg);
    let mut flags = 0;
    if model.has_ssl_head() {
        flags |= FLAG_SSL;
    }
    if model.target().is_some() {
        flags |= FLAG_TARGET;
    }
    if model.freeze_theta() {
        flags |= FLAG_FREEZE;
    }
    out.push(flags);
    put_params(&mut out, model.theta(), model.bn_layers());
    if let Some(t) = model.target() {
        put_params(&mut out, &t.theta, &t.bn);
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 12 {
        return Err(Error::TruncatedFile(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::CorruptFile("bad magic".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::CorruptFile("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::CorruptFile(format!("unsupported format version {version}")));
    }
    let cfg_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)
        .map_err(|e| Error::CorruptFile(format!("architecture header: {e}")))?;
    let flags = r.u8()?;
    let (theta, bn) = r.params()?;
    let target = if flags & FLAG_TARGET != 0 {
        let (theta, bn) = r.params()?;
        Some(ByolTargetState { theta, bn })
    } else {
        None
    };
    if r.pos != body.len() {
        return Err(Error::CorruptFile(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Model::from_parts(config, theta, bn, flags & FLAG_SSL != 0, target, flags & FLAG_FREEZE != 0)
}

/// Writes atomically via a sibling temporary file.
pub fn save(model: &Model, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&encode(model))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    decode(&fs::read(path)?)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    vs.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
}

fn put_params(out: &mut Vec<u8>, theta: &[Tensor], bn: &[BnState]) {
    put_u32(out, theta.len() as u32);
    for t in theta {
        put_u32(out, t.shape().len() as u32);
        t.shape().iter().for_each(|&d| out.extend_from_slice(&(d as u64).to_le_bytes()));
        put_f64s(out, t.data());
    }
    put_u32(out, bn.len() as u32);
    for b in bn {
        out.push(b.mode().code());
        out.push(match b.branch {
            Branch::Backbone => 0,
            Branch::Auxiliary => 1,
        });
        put_f64s(out, &[b.retention, b.eps]);
        put_u32(out, b.channels() as u32);
        for buf in [&b.gamma, &b.beta, &b.running_mean, &b.running_var] {
            put_f64s(out, buf);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::TruncatedFile(format!("needed {n} bytes at offset {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::CorruptFile("length overflow".into()))?)?;
        let vs: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if vs.iter().any(|v| !v.is_finite()) {
            return Err(Error::CorruptFile("non-finite parameter".into()));
        }
        Ok(vs)
    }

    fn params(&mut self) -> Result<(Vec<Tensor>, Vec<BnState>)> {
        let n = self.u32()? as usize;
        let mut theta = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let rank = self.u32()? as usize;
            let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::CorruptFile("shape overflow".into()))?;
            theta.push(Tensor::new(&shape, self.f64s(numel)?, false)?);
        }
        let n = self.u32()? as usize;
        let mut bn = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let mode = BnMode::from_code(self.u8()?).ok_or_else(|| Error::CorruptFile("bad BN mode".into()))?;
            let branch = match self.u8()? {
                0 => Branch::Backbone,
                1 => Branch::Auxiliary,
                b => return Err(Error::CorruptFile(format!("bad branch tag {b}"))),
            };
            let hp = self.f64s(2)?;
            if !(0.0..=1.0).contains(&hp[0]) || hp[1] <= 0.0 {
                return Err(Error::CorruptFile("bad BN hyperparameters".into()));
            }
            let c = self.u32()? as usize;
            let mut s = BnState::new(c, hp[0], hp[1], branch);
            s.gamma = self.f64s(c)?;
            s.beta = self.f64s(c)?;
            s.running_mean = self.f64s(c)?;
            s.running_var = self.f64s(c)?;
            s.set_mode(mode);
            bn.push(s);
        }
        Ok((theta, bn))
    }
}
