//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! b"CHEBYODO"  u32 version
//! u32 len, config text (`key = value` lines)
//! u32 count, then per tensor: u32 len, name, u32 ndim, u64 dims[ndim]
//! u64 value count, f64 values
//! ```

use std::fs;
use std::path::Path;

use super::{ModelConfig, ResKacNet};
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CHEBYODO";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    /// `(name, shape)` in canonical parameter order.
    pub manifest: Vec<(String, Vec<usize>)>,
    /// All parameter values concatenated in manifest order.
    pub payload: Vec<f64>,
}

impl Checkpoint {
    pub fn from_model(model: &ResKacNet) -> Self {
        let mut manifest = Vec::new();
        let mut payload = Vec::new();
        for (name, shape, data) in model.param_values() {
            manifest.push((name, shape));
            payload.extend(data);
        }
        Self {
            format_version: FORMAT_VERSION,
            config: model.config.clone(),
            manifest,
            payload,
        }
    }

    /// Rebuilds the model and loads every parameter.
    pub fn to_model(&self) -> Result<ResKacNet> {
        let mut model = ResKacNet::new(self.config.clone())?;
        let expected: Vec<(String, Vec<usize>)> = model
            .param_values()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        if expected != self.manifest {
            return Err(Error::format("checkpoint manifest does not match its config"));
        }
        let mut offset = 0;
        model.visit_mut("", &mut |_, t| {
            let n = t.numel();
            t.data_mut().copy_from_slice(&self.payload[offset..offset + n]);
            offset += n;
        });
        Ok(model)
    }

    fn config_text(&self) -> String {
        self.config
            .to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        put_str(&mut out, &self.config_text());
        out.extend_from_slice(&(self.manifest.len() as u32).to_le_bytes());
        for (name, shape) in &self.manifest {
            put_str(&mut out, name);
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(format!(
                "checkpoint version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let text = r.string()?;
        let pairs = text
            .lines()
            .map(|line| {
                line.split_once(" = ")
                    .ok_or_else(|| Error::format(format!("bad config line {line:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let config = ModelConfig::from_pairs(pairs)
            .map_err(|e| Error::format(format!("checkpoint config: {e}")))?;
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count.min(4096));
        let mut total = 0usize;
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            total = total
                .checked_add(shape.iter().product())
                .ok_or_else(|| Error::format("manifest size overflows"))?;
            manifest.push((name, shape));
        }
        let len = r.u64()? as usize;
        if len != total {
            return Err(Error::format(format!(
                "payload holds {len} values but the manifest needs {total}"
            )));
        }
        let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::format("payload too large"))?)?;
        let payload = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if r.pos != bytes.len() {
            return Err(Error::format("trailing bytes after payload"));
        }
        Ok(Self {
            format_version: version,
            config,
            manifest,
            payload,
        })
    }

    /// Parameter tensor by name.
    pub fn tensor(&self, name: &str) -> Option<Tensor> {
        let mut offset = 0;
        for (n, shape) in &self.manifest {
            let size: usize = shape.iter().product();
            if n == name {
                return Tensor::new(shape, self.payload[offset..offset + size].to_vec()).ok();
            }
            offset += size;
        }
        None
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint truncated"))?;
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

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("name is not UTF-8"))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
