//! Versioned binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    8 bytes  "RPV2CKPT"
//! major    u16
//! minor    u16
//! meta     u32 length + UTF-8 JSON
//! count    u32
//! tensors  count x (u32 name length, name, u32 ndim, ndim x u64 dims, f64 values)
//! ```
//!
//! Readers accept any minor version of their major version and ignore
//! metadata fields and tensor names they do not know.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::model::{HeadConfig, Model};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RPV2CKPT";
pub const MAJOR: u16 = 1;
pub const MINOR: u16 = 0;
const MOMENTUM_PREFIX: &str = "momentum/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub head: HeadConfig,
    pub num_classes: usize,
    pub seed: u64,
    /// Completed optimizer steps.
    pub iteration: usize,
}

/// Model parameters plus optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub seed: u64,
    pub iteration: usize,
    /// Momentum buffers aligned with `model.params`.
    pub momentum: Vec<Tensor>,
}

impl TrainState {
    pub fn fresh(model: Model, seed: u64) -> Self {
        let momentum = model.params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            model,
            seed,
            iteration: 0,
            momentum,
        }
    }
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

pub fn encode(state: &TrainState) -> Vec<u8> {
    let meta = CheckpointMeta {
        head: state.model.cfg.clone(),
        num_classes: state.model.num_classes,
        seed: state.seed,
        iteration: state.iteration,
    };
    let meta = serde_json::to_vec(&meta).expect("metadata serializes");
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(MAJOR.to_le_bytes());
    out.extend(MINOR.to_le_bytes());
    out.extend((meta.len() as u32).to_le_bytes());
    out.extend(&meta);
    out.extend((2 * state.model.params.len() as u32).to_le_bytes());
    for (name, t) in state.model.params.iter() {
        put_tensor(&mut out, name, t);
    }
    for ((name, _), m) in state.model.params.iter().zip(&state.momentum) {
        put_tensor(&mut out, &format!("{MOMENTUM_PREFIX}{name}"), m);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated file")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn decode_inner(bytes: &[u8]) -> std::result::Result<TrainState, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let (major, _minor) = (r.u16()?, r.u16()?);
    if major != MAJOR {
        return Err(format!("unsupported major version {major} (expected {MAJOR})"));
    }
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| format!("bad metadata: {e}"))?;
    let mut model = Model::new(meta.head, meta.num_classes, meta.seed).map_err(|e| e.to_string())?;
    let mut momentum: Vec<Option<Tensor>> = vec![None; model.params.len()];
    let mut seen = vec![false; model.params.len()];
    let count = r.u32()?;
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| "non-UTF-8 tensor name")?.to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or("tensor too large")?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::from_vec(&shape, data).map_err(|e| e.to_string())?;
        let (slot, key) = match name.strip_prefix(MOMENTUM_PREFIX) {
            Some(p) => (true, p),
            None => (false, name.as_str()),
        };
        let Some(id) = model.params.id(key) else {
            log::debug!("ignoring unknown checkpoint tensor `{name}`");
            continue;
        };
        if model.params.get(id).shape() != t.shape() {
            return Err(format!("tensor `{name}` has shape {:?}, model expects {:?}", t.shape(), model.params.get(id).shape()));
        }
        if slot {
            momentum[id] = Some(t);
        } else {
            *model.params.get_mut(id) = t;
            seen[id] = true;
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(format!("parameter `{}` missing", model.params.name(missing)));
    }
    let momentum = momentum
        .into_iter()
        .zip(model.params.iter())
        .map(|(m, (_, p))| m.unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok(TrainState {
        model,
        seed: meta.seed,
        iteration: meta.iteration,
        momentum,
    })
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<TrainState> {
    decode_inner(bytes).map_err(|message| Error::Checkpoint {
        path: origin.to_path_buf(),
        message,
    })
}

/// Writes atomically through a temporary sibling file.
pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode(state)).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    decode(&bytes, path)
}
