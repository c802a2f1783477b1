//! Binary checkpoint format.
//!
//! Layout: `"LSTN1"`, `u32` version, `u32` JSON length, the JSON
//! [`CheckpointConfig`], `u32` tensor count, then tensor records
//! `{u16 name_len, name, u8 ndim, ndim × u32 dims, f32 data}`, all
//! little-endian.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::Preprocessing;
use crate::error::{bail, Result};
use crate::nn::{Parameters, Tensor};

use super::config::ModelConfig;

pub const MAGIC: &[u8; 5] = b"LSTN1";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    /// Bare backbone.
    Backbone,
    /// Backbone plus classification head.
    Classifier,
    /// Student backbone plus pretraining decoder.
    Pretrain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    pub preprocessing: Preprocessing,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
}

impl CheckpointConfig {
    pub fn new(kind: CheckpointKind, model: ModelConfig, preprocessing: Preprocessing) -> Self {
        Self { kind, model, preprocessing, num_classes: None, labels: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: CheckpointConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    /// Snapshot of every parameter of `modules`, in visit order.
    pub fn capture(config: CheckpointConfig, modules: &[&dyn Parameters<f32>]) -> Self {
        let mut tensors = Vec::new();
        for m in modules {
            m.visit(&mut |p| tensors.push((p.name.clone(), p.value.clone())));
        }
        Self { config, tensors }
    }

    /// Copies stored values into `modules`. Every parameter must be present
    /// with the same shape and every stored tensor must be used.
    pub fn restore(&self, modules: &mut [&mut dyn Parameters<f32>]) -> Result<()> {
        let mut by_name: HashMap<&str, &Tensor<f32>> = HashMap::new();
        for (name, t) in &self.tensors {
            if by_name.insert(name, t).is_some() {
                bail!(Corrupt, "tensor {name:?} stored twice");
            }
        }
        let mut err = None;
        let mut used = 0;
        for m in modules.iter_mut() {
            m.visit_mut(&mut |p| {
                if err.is_some() {
                    return;
                }
                match by_name.get(p.name.as_str()) {
                    None => err = Some(format!("tensor {:?} missing from checkpoint", p.name)),
                    Some(t) if t.dims() != p.value.dims() => {
                        err = Some(format!("{}: stored {:?}, model {:?}", p.name, t.dims(), p.value.dims()))
                    }
                    Some(t) => {
                        p.value = (*t).clone();
                        used += 1;
                    }
                }
            });
        }
        if let Some(e) = err {
            bail!(Config, "{e}");
        }
        if used != self.tensors.len() {
            bail!(Config, "checkpoint holds {} tensors, model uses {used}", self.tensors.len());
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.config)?;
        let mut out = Vec::with_capacity(17 + json.len() + 4 * self.tensors.iter().map(|(_, t)| t.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize || t.dims().len() > u8::MAX as usize {
                bail!(Config, "tensor {name:?} cannot be encoded");
            }
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(t.dims().len() as u8);
            for &d in t.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            bail!(Format, "not a checkpoint (bad magic)");
        }
        r.pos = MAGIC.len();
        let version = r.u32()?;
        if version != VERSION {
            bail!(Format, "unsupported checkpoint version {version}");
        }
        let json_len = r.u32()? as usize;
        let config: CheckpointConfig = serde_json::from_slice(r.take(json_len)?)
            .map_err(|e| crate::Error::Corrupt(format!("checkpoint header: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| crate::Error::Corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32()? as usize);
            }
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = match n {
                Some(n) if n.checked_mul(4).is_some_and(|b| b <= bytes.len() - r.pos) => n,
                _ => bail!(Corrupt, "tensor {name:?} runs past end of file"),
            };
            let raw = r.take(n * 4)?;
            let data: Vec<f32> =
                raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            if data.iter().any(|v| !v.is_finite()) {
                bail!(Corrupt, "tensor {name:?} holds non-finite values");
            }
            tensors.push((name, Tensor::from_vec(&dims, data)?));
        }
        if r.pos != bytes.len() {
            bail!(Corrupt, "{} trailing bytes after the last tensor", bytes.len() - r.pos);
        }
        Ok(Self { config, tensors })
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            bail!(Corrupt, "checkpoint truncated at byte {}", self.pos);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
