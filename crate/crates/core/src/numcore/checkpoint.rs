//! Binary checkpoint format.
//!
//! ```text
//! "CCGS"                       magic
//! u32 version                  1 = 32-bit float payload, 2 = 64-bit float payload
//! u32 count                    parameter records
//! record*                      u32 name_len, name (UTF-8), u32 ndim, u32 dims[ndim],
//!                              row-major little-endian floats
//! u64 step                     optimizer step counter
//! u32 count                    optimizer records, same layout:
//!                              "m.<name>" then "v.<name>" for each parameter
//! ```
//!
//! All integers are little-endian. Version 1 is the compact interchange
//! layout; version 2 keeps full precision so a resumed run continues on the
//! exact trajectory of an uninterrupted one.

use std::io::{Read, Write};
use std::path::Path;

use super::params::ParameterSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CCGS";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn version(self) -> u32 {
        match self {
            Precision::F32 => 1,
            Precision::F64 => 2,
        }
    }

    fn from_version(v: u32) -> Result<Self> {
        match v {
            1 => Ok(Precision::F32),
            2 => Ok(Precision::F64),
            other => Err(Error::Format(format!("unsupported checkpoint version {other}"))),
        }
    }
}

fn write_record(out: &mut Vec<u8>, name: &str, t: &Tensor, precision: Precision) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&2u32.to_le_bytes());
    out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    for v in t.data() {
        match precision {
            Precision::F32 => out.extend_from_slice(&(*v as f32).to_le_bytes()),
            Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
}

pub fn encode(params: &ParameterSet, precision: Precision) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&precision.version().to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        write_record(&mut out, &p.name, &p.value, precision);
    }
    out.extend_from_slice(&params.step().to_le_bytes());
    out.extend_from_slice(&(2 * params.len() as u32).to_le_bytes());
    for p in params.iter() {
        write_record(&mut out, &format!("m.{}", p.name), &p.m, precision);
        write_record(&mut out, &format!("v.{}", p.name), &p.v, precision);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated checkpoint at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn record(&mut self, precision: Precision) -> Result<(String, Tensor)> {
        let len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|e| Error::Format(format!("parameter name is not UTF-8: {e}")))?
            .to_string();
        let ndim = self.u32()?;
        if ndim != 2 {
            return Err(Error::Format(format!("`{name}` has rank {ndim}, expected 2")));
        }
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format(format!("`{name}` shape overflows")))?;
        let mut data = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            let v = match precision {
                Precision::F32 => f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64,
                Precision::F64 => f64::from_le_bytes(self.take(8)?.try_into().unwrap()),
            };
            data.push(v);
        }
        Ok((name, Tensor::new(rows, cols, data)?))
    }
}

/// Decodes a checkpoint into a fresh parameter set, returning the payload
/// precision alongside.
pub fn decode(bytes: &[u8]) -> Result<(ParameterSet, Precision)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let precision = Precision::from_version(r.u32()?)?;
    let count = r.u32()? as usize;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let (name, t) = r.record(precision)?;
        params.insert(&name, t)?;
    }
    params.set_step(r.u64()?);
    let state_count = r.u32()? as usize;
    if state_count != 2 * count {
        return Err(Error::Format(format!(
            "expected {} optimizer records, found {state_count}",
            2 * count
        )));
    }
    let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
    for (p, name) in params.iter_mut().zip(&names) {
        for (slot, prefix) in [(&mut p.m, "m."), (&mut p.v, "v.")] {
            let (rec_name, t) = r.record(precision)?;
            if rec_name != format!("{prefix}{name}") {
                return Err(Error::Format(format!(
                    "optimizer record `{rec_name}` out of order, expected `{prefix}{name}`"
                )));
            }
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!("optimizer record `{rec_name}` has wrong shape")));
            }
            *slot = t;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((params, precision))
}

pub fn save(path: &Path, params: &ParameterSet, precision: Precision) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(params, precision))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParameterSet, Precision)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
