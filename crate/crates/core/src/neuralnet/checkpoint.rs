//! Flat binary container of named tensors with a JSON header.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "SPRCKPT1"
//! header     u64 length, then UTF-8 JSON
//! count      u64 number of tensors
//! tensor     u32 name length, UTF-8 name,
//!            u32 rank, rank × u64 extents,
//!            product(extents) × f64
//! ```
//!
//! Tensors are written in name order, so equal contents give equal bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::NetError;
use crate::ndgrad::Matrix;

const MAGIC: &[u8; 8] = b"SPRCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: serde_json::Value,
    pub tensors: BTreeMap<String, Matrix>,
}

impl Checkpoint {
    pub fn new(header: serde_json::Value) -> Self {
        Self {
            header,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Matrix) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn tensor(&self, name: &str) -> Result<&Matrix, NetError> {
        self.tensors
            .get(name)
            .ok_or_else(|| NetError::Checkpoint(format!("missing tensor {name}")))
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Matrix)> {
        self.tensors
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k[prefix.len()..].to_string(), v.clone()))
            .collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), NetError> {
        w.write_all(MAGIC)?;
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&2u32.to_le_bytes())?;
            for d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, NetError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NetError::Checkpoint("bad magic bytes".into()));
        }
        let header_len = read_u64(r)? as usize;
        let header: serde_json::Value = serde_json::from_slice(&read_bytes(r, header_len)?)?;
        let count = read_u64(r)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let name = String::from_utf8(read_bytes(r, name_len)?)
                .map_err(|_| NetError::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = read_u32(r)? as usize;
            let mut extents = Vec::with_capacity(rank);
            for _ in 0..rank {
                extents.push(read_u64(r)? as usize);
            }
            let shape = match extents[..] {
                [n] => [1, n],
                [a, b] => [a, b],
                _ => return Err(NetError::Checkpoint(format!("{name}: unsupported rank {rank}"))),
            };
            let len = shape[0]
                .checked_mul(shape[1])
                .ok_or_else(|| NetError::Checkpoint(format!("{name}: extents overflow")))?;
            let raw = read_bytes(r, len * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.insert(name, Matrix::new(shape, data)?);
        }
        Ok(Self { header, tensors })
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            self.write_to(&mut f)?;
            f.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>, NetError> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(NetError::Checkpoint("unexpected end of file".into()));
    }
    Ok(buf)
}

fn read_u64(r: &mut impl Read) -> Result<u64, NetError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| NetError::Checkpoint("unexpected end of file".into()))?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32, NetError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| NetError::Checkpoint("unexpected end of file".into()))?;
    Ok(u32::from_le_bytes(b))
}
