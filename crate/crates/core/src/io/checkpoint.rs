use std::path::Path;

use serde::{Deserialize, Serialize};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SPLATCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One named array of values.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BlockInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    iteration: usize,
    config: serde_json::Value,
    meta: serde_json::Value,
    blocks: Vec<BlockInfo>,
}

/// Single-file container: magic, `u32` header length, JSON header, then every
/// block's values as little-endian `f64` in header order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: usize,
    /// Echo of the training configuration.
    pub config: serde_json::Value,
    /// Small scalar state (optimizer step count and the like).
    pub meta: serde_json::Value,
    pub blocks: Vec<Block>,
}

impl Checkpoint {
    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn to_bytes(&self) -> crate::Result<Vec<u8>> {
        for b in &self.blocks {
            if b.shape.iter().product::<usize>() != b.data.len() {
                return Err(crate::Error::Data(format!("checkpoint block {} has inconsistent shape", b.name)));
            }
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            iteration: self.iteration,
            config: self.config.clone(),
            meta: self.meta.clone(),
            blocks: self.blocks.iter().map(|b| BlockInfo { name: b.name.clone(), shape: b.shape.clone() }).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| crate::Error::Data(format!("checkpoint header: {e}")))?;
        let len = u32::try_from(json.len()).map_err(|_| crate::Error::Data("checkpoint header too large".into()))?;
        let total: usize = self.blocks.iter().map(|b| b.data.len()).sum();
        let mut out = Vec::with_capacity(12 + json.len() + 8 * total);
        out.extend(CHECKPOINT_MAGIC);
        out.extend(len.to_le_bytes());
        out.extend(json);
        for b in &self.blocks {
            for v in &b.data {
                out.extend(v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> crate::Result<Self> {
        let bad = |m: &str| crate::Error::Data(format!("checkpoint: {m}"));
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing magic tag"));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let json = bytes.get(12..12 + len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| crate::Error::Data(format!("checkpoint: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(crate::Error::Data(format!("checkpoint version {} is not supported", header.version)));
        }
        let mut at = 12 + len;
        let mut blocks = Vec::with_capacity(header.blocks.len());
        for info in header.blocks {
            let n: usize = info.shape.iter().product();
            let raw = bytes.get(at..at + 8 * n).ok_or_else(|| bad("truncated data"))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            blocks.push(Block { name: info.name, shape: info.shape, data });
            at += 8 * n;
        }
        if at != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint { iteration: header.iteration, config: header.config, meta: header.meta, blocks })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> crate::Result<()> {
        super::write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> crate::Result<Self> {
        Self::from_bytes(&super::read_file(path.as_ref())?)
    }
}
