//! Single-file weight container.
//!
//! Layout: `[u64 LE header length][JSON header][raw data]`. The header lists
//! every tensor with its shape and byte offset into the data section; values
//! are stored as little-endian `f32` regardless of the in-memory element
//! type. Buffers (e.g. batch-norm running statistics) are stored alongside
//! learnable parameters under their own names.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

pub const FORMAT_VERSION: u32 = 1;

/// One named array in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct StateEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl StateEntry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        StateEntry {
            name: name.into(),
            shape,
            data,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderTensor {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    tensors: Vec<HeaderTensor>,
}

pub fn save(path: &Path, entries: &[StateEntry]) -> Result<()> {
    let mut names = std::collections::HashSet::new();
    let mut tensors = Vec::with_capacity(entries.len());
    let mut offset = 0u64;
    for e in entries {
        if !names.insert(e.name.as_str()) {
            return Err(Error::Checkpoint(format!("duplicate tensor name {}", e.name)));
        }
        let n: usize = e.shape.iter().product();
        if n != e.data.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} shape {:?} does not match {} values",
                e.name,
                e.shape,
                e.data.len()
            )));
        }
        tensors.push(HeaderTensor {
            name: e.name.clone(),
            shape: e.shape.clone(),
            dtype: "f32".into(),
            offset,
        });
        offset += (n * 4) as u64;
    }
    let header = serde_json::to_vec(&Header {
        version: FORMAT_VERSION,
        tensors,
    })?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for e in entries {
        for v in &e.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<StateEntry>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut len_buf = [0u8; 8];
    r.read_exact(&mut len_buf)
        .map_err(|e| Error::Checkpoint(format!("short header length: {e}")))?;
    let hlen = u64::from_le_bytes(len_buf) as usize;
    if hlen == 0 || hlen > 64 << 20 {
        return Err(Error::Checkpoint(format!("implausible header length {hlen}")));
    }
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    let header: Header = serde_json::from_slice(&hbuf)
        .map_err(|e| Error::Checkpoint(format!("bad header json: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;

    let mut out = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        if t.dtype != "f32" {
            return Err(Error::Checkpoint(format!(
                "tensor {}: unsupported dtype {}",
                t.name, t.dtype
            )));
        }
        let n: usize = t.shape.iter().product();
        let start = t.offset as usize;
        let end = start + n * 4;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} extends past end of data ({} > {})",
                t.name,
                end,
                blob.len()
            )));
        }
        let mut data = Vec::with_capacity(n);
        for chunk in blob[start..end].chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        out.push(StateEntry::new(t.name.clone(), t.shape.clone(), data));
    }
    Ok(out)
}
