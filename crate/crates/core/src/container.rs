//! Binary tensor container.
//!
//! ```text
//! "PATB" | version u8 = 1 | count u32
//! per tensor: name_len u32 | name (UTF-8) | ndim u32 | dims u32 * ndim | f32 * prod(dims)
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{PatError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PATB";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 9;

pub type Named = Vec<(String, Tensor<f32>)>;

pub fn encode(tensors: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut names = HashSet::new();
    for (name, _) in tensors {
        if !name.is_ascii() || name.is_empty() {
            return Err(PatError::config(format!("tensor name {name:?} must be non-empty ASCII")));
        }
        if !names.insert(name.as_str()) {
            return Err(PatError::config(format!("duplicate tensor name {name:?}")));
        }
    }
    let count = u32::try_from(tensors.len()).map_err(|_| PatError::config("too many tensors"))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
        for &d in t.dims() {
            let d = u32::try_from(d).map_err(|_| PatError::config("dim exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(PatError::Format {
                offset: self.pos,
                msg: format!("truncated while reading {what}"),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(buf: &[u8]) -> Result<Named> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(PatError::Format {
            offset: 0,
            msg: "bad magic".into(),
        });
    }
    let version = r.take(1, "version")?[0];
    if version != VERSION {
        return Err(PatError::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let at = r.pos;
        let name_len = r.u32("name length")? as usize;
        let name_bytes = r.take(name_len, "name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| PatError::Format {
                offset: at + 4,
                msg: "name is not UTF-8".into(),
            })?
            .to_string();
        let dims_at = r.pos;
        let ndim = r.u32("ndim")? as usize;
        if ndim == 0 {
            return Err(PatError::Format {
                offset: dims_at,
                msg: format!("tensor {name:?} has zero dims"),
            });
        }
        let mut dims = Vec::with_capacity(ndim.min(16));
        let mut numel: usize = 1;
        for _ in 0..ndim {
            let d_at = r.pos;
            let d = r.u32("dim")? as usize;
            numel = numel
                .checked_mul(d)
                .filter(|&n| d > 0 && n.saturating_mul(4) <= buf.len())
                .ok_or_else(|| PatError::Format {
                    offset: d_at,
                    msg: format!("tensor {name:?} has an impossible dim {d}"),
                })?;
            dims.push(d);
        }
        let raw = r.take(numel * 4, "tensor data")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::new(dims, data)?));
    }
    if r.pos != buf.len() {
        return Err(PatError::Format {
            offset: r.pos,
            msg: "trailing bytes".into(),
        });
    }
    Ok(out)
}

pub fn save_container(path: impl AsRef<Path>, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let bytes = encode(tensors)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_container(path: impl AsRef<Path>) -> Result<Named> {
    decode(&fs::read(path)?)
}

pub fn find<'a>(named: &'a [(String, Tensor<f32>)], name: &str) -> Result<&'a Tensor<f32>> {
    named
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| PatError::config(format!("container has no tensor {name:?}")))
}
