//! ParamSet container.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! magic  b"MSPS"      4 bytes
//! version u32         currently 1
//! spec_len u32        length of an optional UTF-8 JSON ModelSpec (0 = absent)
//! spec   [u8]
//! count  u32          number of records
//! record*:
//!   name_len u32, name [u8]
//!   role u8
//!   ndim u32, dims u64 * ndim
//!   values f64 * prod(dims)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ParamSet, Role, Tensor};
use super::spec::ModelSpec;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MSPS";
const VERSION: u32 = 1;

/// A spec with its parameters, as stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub spec: Option<ModelSpec>,
    pub params: ParamSet,
}

pub fn encode(spec: Option<&ModelSpec>, params: &ParamSet) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let spec_json = match spec {
        Some(s) => serde_json::to_vec(s)?,
        None => Vec::new(),
    };
    out.extend_from_slice(&(spec_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&spec_json);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, e) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(e.role.code());
        out.extend_from_slice(&(e.tensor.shape.len() as u32).to_le_bytes());
        for &d in &e.tensor.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &e.tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                message: format!("truncated: needed {n} more bytes"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos,
            message: message.into(),
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let spec_len = r.u32()? as usize;
    let spec = if spec_len == 0 {
        None
    } else {
        let raw = r.take(spec_len)?;
        Some(serde_json::from_slice(raw).map_err(|e| r.err(format!("spec json: {e}")))?)
    };
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| r.err("name is not UTF-8"))?
            .to_string();
        let role_code = r.take(1)?[0];
        let role = Role::from_code(role_code).ok_or_else(|| r.err(format!("unknown role {role_code}")))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            data.push(r.f64()?);
        }
        params.insert(name, role, Tensor { shape, data });
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes"));
    }
    Ok(Checkpoint { spec, params })
}

pub fn save(path: &Path, spec: Option<&ModelSpec>, params: &ParamSet) -> Result<()> {
    std::fs::write(path, encode(spec, params)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

/// JSON mirror of the binary container, for debugging.
pub fn to_json(spec: Option<&ModelSpec>, params: &ParamSet) -> Result<String> {
    #[derive(Serialize)]
    struct Mirror<'a> {
        spec: Option<&'a ModelSpec>,
        params: &'a ParamSet,
    }
    Ok(serde_json::to_string_pretty(&Mirror { spec, params })?)
}

pub fn from_json(s: &str) -> Result<Checkpoint> {
    Ok(serde_json::from_str(s)?)
}
