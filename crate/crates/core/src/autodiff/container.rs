//! Flat binary container of named `f32` arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"GLCPARAM"            8-byte magic
//! header_len: u64        byte length of the JSON header
//! header: JSON           {"version":1,"metadata":{..},"arrays":[{"name","shape","offset","len"}]}
//! data: f32 LE           arrays back to back; `offset` is in bytes from the start of this section
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GLCPARAM";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub version: u32,
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub arrays: Vec<ArrayEntry>,
}

pub fn write_container<W: Write>(
    mut out: W,
    metadata: BTreeMap<String, serde_json::Value>,
    arrays: &[NamedArray],
) -> Result<()> {
    let mut offset = 0u64;
    let mut entries = Vec::with_capacity(arrays.len());
    for a in arrays {
        if a.shape.iter().product::<usize>() != a.data.len() {
            return Err(Error::shape("container array", &a.shape, &[a.data.len()]));
        }
        entries.push(ArrayEntry {
            name: a.name.clone(),
            shape: a.shape.clone(),
            offset,
            len: a.data.len() as u64,
        });
        offset += 4 * a.data.len() as u64;
    }
    let header = serde_json::to_vec(&ContainerHeader {
        version: VERSION,
        metadata,
        arrays: entries,
    })?;
    let io = |e| Error::io("<container>", e);
    out.write_all(MAGIC).map_err(io)?;
    out.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    out.write_all(&header).map_err(io)?;
    let mut buf = Vec::with_capacity(offset as usize);
    for a in arrays {
        for v in &a.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(io)?;
    Ok(())
}

pub fn read_container<R: Read>(mut input: R) -> Result<(ContainerHeader, Vec<NamedArray>)> {
    let bad = |m: String| Error::Checkpoint(m);
    let io = |e| Error::io("<container>", e);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad("not a parameter container (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len).map_err(io)?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 30 {
        return Err(bad(format!("implausible header length {len}")));
    }
    let mut header = vec![0u8; len as usize];
    input.read_exact(&mut header).map_err(io)?;
    let header: ContainerHeader = serde_json::from_slice(&header)?;
    if header.version != VERSION {
        return Err(bad(format!("unsupported container version {}", header.version)));
    }
    let mut data = Vec::new();
    input.read_to_end(&mut data).map_err(io)?;
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for e in &header.arrays {
        let start = e.offset as usize;
        let end = start + 4 * e.len as usize;
        if end > data.len() || e.shape.iter().product::<usize>() as u64 != e.len {
            return Err(bad(format!("array `{}` is truncated or mis-shaped", e.name)));
        }
        let values = data[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        arrays.push(NamedArray {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data: values,
        });
    }
    Ok((header, arrays))
}
