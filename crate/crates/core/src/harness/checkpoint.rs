//! Binary checkpoint container.
//!
//! Layout: `b"INCREVEC"`, u32 version, u32 header length, JSON header,
//! u32 blob count, then per blob a u32 name length, the name, a u64 value
//! count and the values as f64 little-endian; finally a CRC32 of all
//! preceding bytes. All integers are little-endian.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::history::StoreConfig;
use crate::nn::Parameterized;

const MAGIC: &[u8; 8] = b"INCREVEC";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// A warmed-up, frozen text encoder.
    Encoder,
    /// A trained run: encoder, optional upper transformer, head, store.
    Model,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub config: RunConfig,
    pub vocab: Vec<String>,
    pub classes: Vec<String>,
    #[serde(default)]
    pub store: Option<StoreConfig>,
    /// Maps store rows to corpus users.
    #[serde(default)]
    pub store_users: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub blobs: Vec<(String, Vec<f64>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for (name, values) in &self.blobs {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < MAGIC.len() + 8 {
            return Err(Error::Checkpoint("file too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Checkpoint(format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}")));
        }
        let mut r = Reader { bytes: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?)?;
        let count = r.u32()? as usize;
        let mut blobs = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::Checkpoint("blob name is not UTF-8".into()))?;
            let n = r.u64()? as usize;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("blob too large".into()))?)?;
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            blobs.push((name, values));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { header, blobs })
    }

    pub fn save(&self, path: &Path) -> Result<u32> {
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes)?;
        Ok(trailing_crc(&bytes))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }

    /// CRC32 of the serialized form.
    pub fn checksum(&self) -> u32 {
        trailing_crc(&self.to_bytes())
    }

    pub fn blob(&self, name: &str) -> Option<&[f64]> {
        self.blobs.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    /// All blobs whose name starts with `prefix`.
    pub fn blobs_with_prefix(&self, prefix: &str) -> Vec<(String, Vec<f64>)> {
        self.blobs.iter().filter(|(n, _)| n.starts_with(prefix)).cloned().collect()
    }
}

fn trailing_crc(bytes: &[u8]) -> u32 {
    u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"))
}

/// Parameter values as named blobs, in visiting order.
pub fn param_blobs(model: &dyn Parameterized, prefix: &str) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    model.visit(prefix, &mut |name, p| out.push((name.to_string(), p.value.data().to_vec())));
    out
}

/// Overwrites every parameter of `model` from `blobs`; each parameter must
/// be present with a matching element count.
pub fn load_params(model: &mut dyn Parameterized, prefix: &str, blobs: &[(String, Vec<f64>)]) -> Result<()> {
    let index: HashMap<&str, &Vec<f64>> = blobs.iter().map(|(n, v)| (n.as_str(), v)).collect();
    let mut err = None;
    model.visit_mut(prefix, &mut |name, p| {
        if err.is_some() {
            return;
        }
        match index.get(name) {
            Some(v) if v.len() == p.value.data().len() => p.value.data_mut().copy_from_slice(v),
            Some(v) => {
                err = Some(Error::Checkpoint(format!("{name}: {} values, expected {}", v.len(), p.value.data().len())))
            }
            None => err = Some(Error::Checkpoint(format!("missing parameter {name}"))),
        }
    });
    err.map_or(Ok(()), Err)
}
