//! Flat binary model file.
//!
//! ```text
//! magic      4 bytes  "CMTL"
//! version    u32 LE
//! header_len u32 LE, then that many bytes of UTF-8 JSON {format_version, config, tasks}
//! blocks     u32 LE count, then per block:
//!              name_len u32 LE, name UTF-8, rows u32 LE, cols u32 LE, rows*cols f64 LE
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ModelParams, Task};

pub const MODEL_MAGIC: &[u8; 4] = b"CMTL";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    tasks: Vec<Task>,
}

impl ModelParams {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: MODEL_FORMAT_VERSION,
            config: self.config.clone(),
            tasks: self.config.tasks.clone(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let blocks = self.all_blocks();
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
        for (name, m) in blocks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MODEL_MAGIC {
            return Err(ModelError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != MODEL_FORMAT_VERSION {
            return Err(ModelError::Format(format!("unsupported format version {version}")));
        }
        let header_len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| ModelError::Format(format!("header: {e}")))?;
        if header.format_version != version || header.tasks != header.config.tasks {
            return Err(ModelError::Format("header disagrees with itself".into()));
        }
        let mut params = ModelParams::init(&header.config, 0)?;
        let expected: Vec<(String, (usize, usize))> = params
            .all_blocks()
            .into_iter()
            .map(|(n, m)| (n, m.shape()))
            .collect();
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(ModelError::Format(format!(
                "expected {} parameter blocks, found {count}",
                expected.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| ModelError::Format("block name is not UTF-8".into()))?
                .to_string();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let shape = expected
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, s)| *s)
                .ok_or_else(|| ModelError::Format(format!("unexpected block `{name}`")))?;
            if shape != (rows, cols) {
                return Err(ModelError::Format(format!(
                    "block `{name}` is {rows}x{cols}, config implies {}x{}",
                    shape.0, shape.1
                )));
            }
            if !seen.insert(name.clone()) {
                return Err(ModelError::Format(format!("block `{name}` repeated")));
            }
            let raw = r.take(rows * cols * 8)?;
            let target = params.block_mut(&name).expect("name checked against layout");
            for (dst, chunk) in target.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
                *dst = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            }
        }
        if r.pos != bytes.len() {
            return Err(ModelError::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ModelError::Format("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NormPlacement;

    #[test]
    fn round_trip_is_bitwise() {
        for norm in [
            NormPlacement::EncoderOutput,
            NormPlacement::EncoderInput,
            NormPlacement::None,
        ] {
            let cfg = ModelConfig {
                norm,
                ..ModelConfig::default()
            };
            let mut p = ModelParams::init(&cfg, 17).unwrap();
            if let Some(bn) = p.norm_mut() {
                bn.running_mean.data_mut()[0] = 0.1 + 0.2;
                bn.running_var.data_mut()[1] = std::f64::consts::PI;
            }
            let bytes = p.to_bytes();
            assert_eq!(&bytes[..4], MODEL_MAGIC);
            let q = ModelParams::from_bytes(&bytes).unwrap();
            assert_eq!(p, q);
            assert_eq!(bytes, q.to_bytes());
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let p = ModelParams::init(&ModelConfig::default(), 1).unwrap();
        let bytes = p.to_bytes();
        assert!(ModelParams::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ModelParams::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(ModelParams::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(ModelParams::from_bytes(&long).is_err());
    }
}
