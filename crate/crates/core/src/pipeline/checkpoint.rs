//! Model checkpoints.
//!
//! ```text
//! magic "MACK" | version u16 = 1
//! config_len u32 | config as TOML (UTF-8)
//! quality_dim u32 | semantic_dim u32
//! param_count u32
//! per parameter: name_len u16 | name | rows u32 | cols u32 | rows*cols f64 LE
//! crc32 u32 over every preceding byte
//! ```
//!
//! Parameters are written in creation order, which is fixed by the config,
//! so identical training runs give identical bytes.

use std::path::Path;

use super::config::TrainConfig;
use super::data::FeatureDims;
use super::model::FusionNet;
use crate::cache::write_atomic;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MACK";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn encode_checkpoint(net: &FusionNet) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = net.config().to_toml();
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg.as_bytes());
    let dims = net.dims();
    buf.extend_from_slice(&(dims.quality as u32).to_le_bytes());
    buf.extend_from_slice(&(dims.semantic as u32).to_le_bytes());
    buf.extend_from_slice(&(net.store().len() as u32).to_le_bytes());
    for (_, p) in net.store().iter() {
        buf.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(p.cols as u32).to_le_bytes());
        for v in &p.value {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<FusionNet> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: "MACK".into(),
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < 10 {
        return Err(Error::Format {
            offset: bytes.len(),
            message: "file too short for a checkpoint".into(),
        });
    }
    let body_len = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_len..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body_len]);
    if stored != computed {
        return Err(Error::Checksum {
            offset: body_len,
            stored,
            computed,
        });
    }
    let mut cur = Cursor {
        bytes: &bytes[..body_len],
        pos: 4,
    };
    let version = cur.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            offset: 4,
            supported: vec![CHECKPOINT_VERSION],
        });
    }
    let cfg_len = cur.u32("config length")? as usize;
    let cfg_at = cur.pos;
    let cfg_text =
        std::str::from_utf8(cur.take(cfg_len, "config")?).map_err(|_| Error::Format {
            offset: cfg_at,
            message: "config is not UTF-8".into(),
        })?;
    let config = TrainConfig::from_toml(cfg_text)?;
    let dims = FeatureDims {
        quality: cur.u32("quality_dim")? as usize,
        semantic: cur.u32("semantic_dim")? as usize,
    };
    let mut net = FusionNet::new(&config, dims)?;
    let count = cur.u32("parameter count")? as usize;
    if count != net.store().len() {
        return Err(Error::Format {
            offset: cur.pos - 4,
            message: format!(
                "{count} parameters stored, config defines {}",
                net.store().len()
            ),
        });
    }
    for _ in 0..count {
        let at = cur.pos;
        let name_len = cur.u16("parameter name length")? as usize;
        let name = String::from_utf8_lossy(cur.take(name_len, "parameter name")?).into_owned();
        let rows = cur.u32("rows")? as usize;
        let cols = cur.u32("cols")? as usize;
        let id = net.store().find(&name).ok_or_else(|| Error::Format {
            offset: at,
            message: format!("unknown parameter {name:?}"),
        })?;
        let p = net.store().get(id);
        if (p.rows, p.cols) != (rows, cols) {
            return Err(Error::Format {
                offset: at,
                message: format!(
                    "parameter {name:?} is {rows}x{cols}, config implies {}x{}",
                    p.rows, p.cols
                ),
            });
        }
        let raw = cur.take(rows * cols * 8, "parameter values")?;
        net.store_mut().get_mut(id).value = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
    }
    if cur.pos != body_len {
        return Err(Error::Format {
            offset: cur.pos,
            message: format!("{} trailing bytes before checksum", body_len - cur.pos),
        });
    }
    Ok(net)
}

/// Write atomically; returns the checksum.
pub fn save_checkpoint(path: impl AsRef<Path>, net: &FusionNet) -> Result<u32> {
    let bytes = encode_checkpoint(net);
    write_atomic(path.as_ref(), &bytes)?;
    Ok(u32::from_le_bytes(
        bytes[bytes.len() - 4..].try_into().unwrap(),
    ))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<FusionNet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> FusionNet {
        let mut cfg = TrainConfig::with_seed(5);
        cfg.d = 6;
        FusionNet::new(
            &cfg,
            FeatureDims {
                quality: 4,
                semantic: 3,
            },
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let a = net();
        let bytes = encode_checkpoint(&a);
        let b = decode_checkpoint(&bytes).unwrap();
        assert_eq!(a.store(), b.store());
        assert_eq!(a.config(), b.config());
        assert_eq!(encode_checkpoint(&b), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode_checkpoint(&net());
        for i in (0..bytes.len()).step_by(7) {
            let mut bad = bytes.clone();
            bad[i] ^= 0x10;
            assert!(decode_checkpoint(&bad).is_err(), "flip at {i}");
        }
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 1]),
            Err(Error::Checksum { .. })
        ));
    }
}
