//! Model checkpoints.
//!
//! ```text
//! magic "MILC" | version u32 | config_len u32 | config JSON
//! | n_tensors u32 | per tensor: name_len u16, name, rows u32, cols u32, rows·cols f32
//! ```
//! All integers and floats little-endian. Parameters are stored at f32
//! precision; loading widens them back to f64.

use std::path::Path;

use super::model::{MilModel, MilParams, ModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MILC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn to_bytes(model: &MilModel) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(&model.config)?;
    let tensors = model.params.tensors();
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, rows, cols, values) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(rows as u32).to_le_bytes());
        out.extend_from_slice(&(cols as u32).to_le_bytes());
        for v in values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::InvalidCheckpoint(format!(
                "truncated: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<MilModel> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::InvalidCheckpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::InvalidCheckpoint(format!("unsupported version {version}")));
    }
    let config_len = cur.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(cur.take(config_len)?)?;
    config.validate()?;
    let mut params = MilParams::zeros(&config);
    let expected: Vec<(String, usize, usize)> = params
        .tensors()
        .into_iter()
        .map(|(n, r, c, _)| (n, r, c))
        .collect();
    let n_tensors = cur.u32()? as usize;
    if n_tensors != expected.len() {
        return Err(Error::InvalidCheckpoint(format!(
            "{n_tensors} tensors, config implies {}",
            expected.len()
        )));
    }
    for ((name, rows, cols), slot) in expected.into_iter().zip(params.tensors_mut()) {
        let name_len = cur.u16()? as usize;
        let found = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::InvalidCheckpoint("tensor name is not UTF-8".into()))?;
        let (r, c) = (cur.u32()? as usize, cur.u32()? as usize);
        if found != name || r != rows || c != cols {
            return Err(Error::InvalidCheckpoint(format!(
                "tensor {found:?} {r}x{c}, expected {name:?} {rows}x{cols}"
            )));
        }
        let raw = cur.take(r * c * 4)?;
        for (dst, chunk) in slot.iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::InvalidCheckpoint("trailing bytes".into()));
    }
    MilModel::from_params(config, params)
}

pub fn save(model: &MilModel, path: impl AsRef<Path>) -> Result<()> {
    crate::bagio::write_atomic(path.as_ref(), &to_bytes(model)?)
}

pub fn load(path: impl AsRef<Path>) -> Result<MilModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::milnet::model::MilMode;

    #[test]
    fn round_trip_at_f32_precision() {
        let mut cfg = ModelConfig::new(MilMode::Clam, 7, 3);
        cfg.hidden_dim = 9;
        cfg.attn_dim = 4;
        let model = MilModel::new(cfg).unwrap();
        let bytes = to_bytes(&model).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.config, model.config);
        for (a, b) in model.params.tensors().iter().zip(back.params.tensors()) {
            assert_eq!(a.0, b.0);
            for (x, y) in a.3.iter().zip(b.3) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        // a reloaded model re-serializes to the same bytes
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let model = MilModel::new(ModelConfig::new(MilMode::Abmil, 3, 2)).unwrap();
        let bytes = to_bytes(&model).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut longer = bytes;
        longer.push(0);
        assert!(from_bytes(&longer).is_err());
    }
}
