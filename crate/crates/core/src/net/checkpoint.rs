//! Binary checkpoint of named parameter arrays and running statistics.
//!
//! Layout, little endian: magic `DSCK`, version u32, config JSON length
//! u32 and bytes, array count u32, then per array: name length u16, UTF-8
//! name, kind u8 (0 parameter, 1 running statistic), value count u64 and
//! f32 values.

use std::io::{Read, Write};
use std::path::Path;

use super::model::{MicroNet, NetConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode(net: &mut MicroNet<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&net.config)?;
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    let mut arrays: Vec<(String, u8, Vec<f32>)> = net.named_params().into_iter().map(|(n, p)| (n, 0, p.value.clone())).collect();
    arrays.extend(net.named_buffers().into_iter().map(|(n, b)| (n, 1, b.clone())));
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, kind, vals) in arrays {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(kind);
        out.extend_from_slice(&(vals.len() as u64).to_le_bytes());
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.b.len()).ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.b[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<MicroNet<f32>> {
    let mut c = Cursor { b: bytes, at: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("checkpoint version {version}")));
    }
    let n = c.u32()? as usize;
    let config: NetConfig = serde_json::from_slice(c.take(n)?)?;
    let mut net = MicroNet::<f32>::new(config)?;
    let count = c.u32()? as usize;
    let mut arrays = std::collections::BTreeMap::new();
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?).map_err(|_| Error::Format("checkpoint array name".into()))?.to_string();
        let kind = c.take(1)?[0];
        let len = c.u64()? as usize;
        let raw = c.take(len.checked_mul(4).ok_or_else(|| Error::Format("checkpoint array size".into()))?)?;
        let vals: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        if arrays.insert((kind, name.clone()), vals).is_some() {
            return Err(Error::Format(format!("duplicate checkpoint array {name}")));
        }
    }
    if c.at != bytes.len() {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }
    let mut fill = |kind: u8, name: &str, dst: &mut Vec<f32>| -> Result<()> {
        let v = arrays.remove(&(kind, name.to_string())).ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
        if v.len() != dst.len() {
            return Err(Error::Format(format!("checkpoint array {name} has {} values, expected {}", v.len(), dst.len())));
        }
        *dst = v;
        Ok(())
    };
    for (name, p) in net.named_params() {
        fill(0, &name, &mut p.value)?;
    }
    for (name, b) in net.named_buffers() {
        fill(1, &name, b)?;
    }
    if let Some(((_, name), _)) = arrays.into_iter().next() {
        return Err(Error::Format(format!("unexpected checkpoint array {name}")));
    }
    Ok(net)
}

pub fn save(net: &mut MicroNet<f32>, path: &Path) -> Result<()> {
    let bytes = encode(net)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::file(path, e))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<MicroNet<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::file(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::model::BlockSpec;
    use crate::net::Tensor4;

    fn small() -> NetConfig {
        NetConfig {
            blocks: vec![BlockSpec { channels: 4, stride: 2 }, BlockSpec { channels: 4, stride: 2 }],
            parts: 3,
            crop_size: 8,
            init_seed: 5,
            ..NetConfig::default()
        }
    }

    #[test]
    fn round_trip_reproduces_outputs() {
        let mut net = MicroNet::<f32>::new(small()).unwrap();
        let x = Tensor4::from_vec(2, 8, 8, 3, (0..384).map(|i| (i % 17) as f32 / 17.0).collect()).unwrap();
        net.forward(&x, &[1.0, 0.0], true).unwrap();
        let bytes = encode(&mut net).unwrap();
        let mut back = decode(&bytes).unwrap();
        assert_eq!(encode(&mut back).unwrap(), bytes);
        let a = net.forward(&x, &[1.0, 0.0], false).unwrap();
        let b = back.forward(&x, &[1.0, 0.0], false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let mut net = MicroNet::<f32>::new(small()).unwrap();
        let bytes = encode(&mut net).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
