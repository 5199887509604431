//! "PCT1" binary tensor container: named tensors, bit-exact round trips.
//! Little-endian throughout (IDX, by contrast, is big-endian per its spec).
//!
//! Layout: magic "PCT1"; version u16 LE; entry count u32 LE; then per entry:
//! name length u16 LE, UTF-8 name, rank u32 LE, extents u32 LE each, element
//! type tag u8 (0 = f32, 1 = f64), raw LE element data.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PCT1";
const VERSION: u16 = 1;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ElementType {
    F32,
    F64,
}

/// One named tensor plus its storage precision.
pub struct Entry {
    pub name: String,
    pub tensor: Tensor,
    pub element_type: ElementType,
}

impl Entry {
    pub fn f64(name: impl Into<String>, tensor: Tensor) -> Self {
        Entry {
            name: name.into(),
            tensor,
            element_type: ElementType::F64,
        }
    }

    pub fn f32(name: impl Into<String>, tensor: Tensor) -> Self {
        Entry {
            name: name.into(),
            tensor,
            element_type: ElementType::F32,
        }
    }
}

pub fn write_container(path: &Path, entries: &[Entry]) -> Result<()> {
    let mut names = BTreeSet::new();
    for e in entries {
        if !names.insert(e.name.as_str()) {
            return Err(Error::Format(format!(
                "container: duplicate entry name {:?}",
                e.name
            )));
        }
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Format("container: name too long".into()));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(e.tensor.rank() as u32).to_le_bytes());
        for &ext in e.tensor.shape() {
            buf.extend_from_slice(&(ext as u32).to_le_bytes());
        }
        match e.element_type {
            ElementType::F32 => {
                buf.push(0);
                for &v in e.tensor.data() {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            ElementType::F64 => {
                buf.push(1);
                for &v in e.tensor.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Vec<Entry>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_container(&bytes)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < *pos + n {
        return Err(Error::Format(format!(
            "container: truncated reading {what} at offset {}",
            *pos
        )));
    }
    let s = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

pub fn parse_container(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut pos = 0;
    if take(bytes, &mut pos, 4, "magic")? != MAGIC {
        return Err(Error::Format("container: bad magic".into()));
    }
    let version = u16::from_le_bytes(take(bytes, &mut pos, 2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!(
            "container: unsupported version {version}"
        )));
    }
    let count = u32::from_le_bytes(take(bytes, &mut pos, 4, "count")?.try_into().unwrap());
    let mut entries = Vec::with_capacity(count as usize);
    let mut names = BTreeSet::new();
    for _ in 0..count {
        let name_len =
            u16::from_le_bytes(take(bytes, &mut pos, 2, "name length")?.try_into().unwrap());
        let name = std::str::from_utf8(take(bytes, &mut pos, name_len as usize, "name")?)
            .map_err(|_| Error::Format("container: name is not UTF-8".into()))?
            .to_string();
        if !names.insert(name.clone()) {
            return Err(Error::Format(format!(
                "container: duplicate entry name {name:?}"
            )));
        }
        let rank = u32::from_le_bytes(take(bytes, &mut pos, 4, "rank")?.try_into().unwrap());
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(
                u32::from_le_bytes(take(bytes, &mut pos, 4, "extent")?.try_into().unwrap())
                    as usize,
            );
        }
        let tag = take(bytes, &mut pos, 1, "type tag")?[0];
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match tag {
            0 => take(bytes, &mut pos, 4 * n, "f32 data")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            1 => take(bytes, &mut pos, 8 * n, "f64 data")?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            other => {
                return Err(Error::Format(format!(
                    "container: unknown element type tag {other}"
                )))
            }
        };
        entries.push(Entry {
            name,
            tensor: Tensor::new(shape, data)?,
            element_type: if tag == 0 {
                ElementType::F32
            } else {
                ElementType::F64
            },
        });
    }
    Ok(entries)
}

/// Fetch one entry by name.
pub fn find<'a>(entries: &'a [Entry], name: &str) -> Result<&'a Tensor> {
    entries
        .iter()
        .find(|e| e.name == name)
        .map(|e| &e.tensor)
        .ok_or_else(|| Error::Format(format!("container: missing entry {name:?}")))
}
