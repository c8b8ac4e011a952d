//! Binary checkpoint format (little-endian):
//!
//! ```text
//! "HADG" | version u32 = 1 | entry count u32
//! per entry: name length u16 | UTF-8 name | partition u8 | rank u8
//!            | dims u32 × rank | f32 × product(dims)
//! ```

use std::path::Path;

use super::{ParamEntry, ParamSet, Partition};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"HADG";
const VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ParamSet) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + params.parameter_count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for e in params.entries() {
        let name = e.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::invalid(format!("parameter name too long: {}", e.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(e.partition.tag());
        out.push(e.value.rank() as u8);
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, entry: &str, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                entry: entry.to_string(),
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, entry: &str, what: &str) -> Result<u8> {
        Ok(self.take(1, entry, what)?[0])
    }

    fn u16(&mut self, entry: &str, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, entry, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, entry: &str, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, entry, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamSet> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let header = "header";
    if r.take(4, header, "magic")? != MAGIC {
        return Err(Error::Format {
            entry: header.into(),
            reason: "bad magic bytes".into(),
        });
    }
    let version = r.u32(header, "version")?;
    if version != VERSION {
        return Err(Error::Format {
            entry: header.into(),
            reason: format!("unsupported version {version}"),
        });
    }
    let count = r.u32(header, "entry count")? as usize;
    let mut entries = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let label = format!("entry {i}");
        let name_len = r.u16(&label, "name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, &label, "name")?)
            .map_err(|_| Error::Format {
                entry: label.clone(),
                reason: "name is not UTF-8".into(),
            })?
            .to_string();
        let tag = r.u8(&name, "partition tag")?;
        let partition = Partition::from_tag(tag).ok_or_else(|| Error::Format {
            entry: name.clone(),
            reason: format!("unknown partition tag {tag}"),
        })?;
        let rank = r.u8(&name, "rank")? as usize;
        if rank == 0 {
            return Err(Error::Format {
                entry: name,
                reason: "rank 0".into(),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&name, "dims")? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| if d == 0 { None } else { acc.checked_mul(d) })
            .ok_or_else(|| Error::Format {
                entry: name.clone(),
                reason: format!("invalid shape {shape:?}"),
            })?;
        let raw = r.take(len.saturating_mul(4), &name, "data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let value = Tensor::new(shape, data).map_err(|e| Error::Format {
            entry: name.clone(),
            reason: e.to_string(),
        })?;
        entries.push(ParamEntry {
            name,
            partition,
            value,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            entry: "trailer".into(),
            reason: format!("{} unexpected trailing bytes", bytes.len() - r.pos),
        });
    }
    ParamSet::new(entries).map_err(|e| Error::Format {
        entry: "entries".into(),
        reason: e.to_string(),
    })
}

pub fn save_checkpoint(params: &ParamSet, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(params)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
