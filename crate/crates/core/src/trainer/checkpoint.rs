use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::TrainError;
use crate::nn::Tensor;

const MAGIC: &[u8; 8] = b"MIXTTS01";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to resume training or to synthesize.
///
/// Layout (little-endian): magic `MIXTTS01`, `u32` version, `u64` step,
/// `u32` tensor count, then per tensor in name order `u32` name length,
/// name bytes, `u32` rank, `u64` dims, `f64` data; then `u32`-length-prefixed
/// config text and `u32`-length-prefixed trainer state JSON.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub step: u64,
    pub tensors: BTreeMap<String, Tensor>,
    pub config_text: String,
    pub state_json: String,
}

fn bad(msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(msg.into())
}

fn len_u32(n: usize, what: &str) -> Result<[u8; 4], TrainError> {
    u32::try_from(n).map(u32::to_le_bytes).map_err(|_| bad(format!("{what} too large")))
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), TrainError> {
        w.write_all(MAGIC)?;
        w.write_all(&self.format_version.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&len_u32(self.tensors.len(), "tensor count")?)?;
        for (name, t) in &self.tensors {
            w.write_all(&len_u32(name.len(), "name")?)?;
            w.write_all(name.as_bytes())?;
            w.write_all(&len_u32(t.shape().len(), "rank")?)?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        for text in [&self.config_text, &self.state_json] {
            w.write_all(&len_u32(text.len(), "text section")?)?;
            w.write_all(text.as_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, TrainError> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, TrainError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let format_version = read_u32(r)?;
        if format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {format_version}")));
        }
        let step = read_u64(r)?;
        let count = read_u32(r)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = read_string(r)?;
            let rank = read_u32(r)? as usize;
            if rank > 8 {
                return Err(bad(format!("tensor {name} has rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= 1 << 32)
                .ok_or_else(|| bad(format!("tensor {name} is too large")))?;
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(bad(format!("duplicate tensor {name}")));
            }
        }
        let config_text = read_string(r)?;
        let state_json = read_string(r)?;
        Ok(Self {
            format_version,
            step,
            tensors,
            config_text,
            state_json,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, TrainError> {
        self.tensors.get(name).ok_or_else(|| bad(format!("missing tensor {name}")))
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn group(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, TrainError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, TrainError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut impl Read) -> Result<String, TrainError> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| bad("section is not utf-8"))
}
