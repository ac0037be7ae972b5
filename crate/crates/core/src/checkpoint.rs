//! Named-tensor checkpoint files.
//!
//! Layout (little-endian): magic `MSCK`, u32 version, u64 tensor count, then
//! per tensor a u16 name length, UTF-8 name, u8 dtype (0 = f32), u8 rank,
//! rank × u64 dims and the raw payload; a CRC32 of everything before it
//! closes the file.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const MOMENTUM_PREFIX: &str = "momentum/";
const BUFFER_PREFIX: &str = "buffer/";
const EPOCH_KEY: &str = "meta.epoch";

pub type NamedTensors = Vec<(String, Tensor<f32>)>;

pub fn encode(tensors: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::Usage(format!("tensor name too long: {name}")))?;
        let rank = u8::try_from(t.shape().len()).map_err(|_| Error::Usage(format!("tensor {name} has too many dims")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format("checkpoint", "truncated"));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<NamedTensors> {
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            what: "checkpoint",
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < 20 {
        return Err(Error::format("checkpoint", "truncated"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(Error::Checksum {
            what: "checkpoint".into(),
        });
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let count = r.u64()?;
    let mut out = Vec::new();
    for i in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format("checkpoint", format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::format("checkpoint", format!("tensor {name} has unknown dtype {dtype}")));
        }
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format("checkpoint", format!("tensor {name} is too large")))?;
        let payload = r.take(numel.checked_mul(4).ok_or_else(|| Error::format("checkpoint", "size overflow"))?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format("checkpoint", format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != body.len() {
        return Err(Error::format("checkpoint", "trailing bytes"));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let bytes = encode(tensors)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<NamedTensors> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Parameters, momentum buffers, norm statistics and the number of
/// completed epochs.
pub fn model_state(model: &Model<f32>, epochs_done: usize) -> Result<NamedTensors> {
    let mut out = Vec::new();
    for p in model.store.params() {
        out.push((p.name.clone(), p.value.clone()));
    }
    for p in model.store.params() {
        let m = Tensor::new(p.value.shape().to_vec(), p.momentum_buf.clone())?;
        out.push((format!("{MOMENTUM_PREFIX}{}", p.name), m));
    }
    for b in model.store.buffers() {
        out.push((format!("{BUFFER_PREFIX}{}", b.name), b.value.clone()));
    }
    out.push((EPOCH_KEY.into(), Tensor::scalar(epochs_done as f32)));
    Ok(out)
}

/// Load a state produced by [`model_state`] into a model of the same
/// layout; returns the number of completed epochs.
pub fn restore(model: &mut Model<f32>, tensors: NamedTensors) -> Result<usize> {
    let mut epochs = None;
    let expected = 2 * model.store.params().len() + model.store.buffers().len() + 1;
    if tensors.len() != expected {
        return Err(Error::Config(format!(
            "checkpoint has {} tensors, model layout expects {expected}",
            tensors.len()
        )));
    }
    for (name, t) in tensors {
        let mismatch = |want: &[usize]| {
            Error::Config(format!("checkpoint tensor {name} has shape {:?}, model expects {want:?}", t.shape()))
        };
        if name == EPOCH_KEY {
            epochs = Some(t.item() as usize);
        } else if let Some(rest) = name.strip_prefix(MOMENTUM_PREFIX) {
            let id = model
                .store
                .find_param(rest)
                .ok_or_else(|| Error::Config(format!("checkpoint has unknown tensor {name}")))?;
            let p = model.store.param_mut(id);
            if p.value.shape() != t.shape() {
                return Err(mismatch(p.value.shape()));
            }
            p.momentum_buf = t.into_data();
        } else if let Some(rest) = name.strip_prefix(BUFFER_PREFIX) {
            let id = model
                .store
                .find_buffer(rest)
                .ok_or_else(|| Error::Config(format!("checkpoint has unknown tensor {name}")))?;
            let b = model.store.buffer_mut(id);
            if b.value.shape() != t.shape() {
                return Err(mismatch(b.value.shape()));
            }
            b.value = t;
        } else {
            let id = model
                .store
                .find_param(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint has unknown tensor {name}")))?;
            let p = model.store.param_mut(id);
            if p.value.shape() != t.shape() {
                return Err(mismatch(p.value.shape()));
            }
            p.value = t;
        }
    }
    epochs.ok_or_else(|| Error::Config(format!("checkpoint lacks {EPOCH_KEY}")))
}
