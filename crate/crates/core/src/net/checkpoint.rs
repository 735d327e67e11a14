//! `WTS1` weight checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "WTS1" | u64 config hash | u32 len | config text
//!        | u32 block count | blocks...
//! block:   u32 name len | name | u32 ndims | u32 dims... | f32 values...
//! ```
//!
//! The config text is [`NetConfig::canonical`]; on load its hash must match
//! the stored hash and the blocks must match a fresh network's names and
//! shapes.

use std::path::Path;

use crate::net::graph::ParamStore;
use crate::net::model::{Net, NetConfig};
use crate::net::NetError;
use crate::real::Real;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WTS1";

pub fn encode_checkpoint<T: Real>(net: &Net<T>) -> Vec<u8> {
    let text = net.config().canonical();
    let params = net.params();
    let mut out = Vec::with_capacity(64 + text.len() + 4 * params.numel());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&net.config().hash().to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.params() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &p.data {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| NetError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, NetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64, NetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn text(&mut self) -> Result<&'a str, NetError> {
        let n = self.u32()?;
        std::str::from_utf8(self.take(n)?)
            .map_err(|_| NetError::Checkpoint("non-UTF-8 text".into()))
    }
}

/// Parses a checkpoint into an `f32` network.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Net<f32>, NetError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(NetError::Checkpoint("bad magic, expected WTS1".into()));
    }
    let hash = r.u64()?;
    let config: NetConfig = r.text()?.parse()?;
    if config.hash() != hash {
        return Err(NetError::Checkpoint(format!(
            "config hash {hash:016x} does not match embedded config ({:016x})",
            config.hash()
        )));
    }
    let blocks = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..blocks {
        let name = r.text()?.to_string();
        let ndims = r.u32()?;
        if ndims > 8 {
            return Err(NetError::Checkpoint(format!("{name}: {ndims} dims")));
        }
        let shape = (0..ndims).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| NetError::Checkpoint(format!("{name}: size overflow")))?;
        let raw = r.take(
            n.checked_mul(4)
                .ok_or_else(|| NetError::Checkpoint("size overflow".into()))?,
        )?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if store.get(&name).is_some() {
            return Err(NetError::Checkpoint(format!("duplicate block {name}")));
        }
        store.insert(&name, "", shape, data);
    }
    if r.pos != bytes.len() {
        return Err(NetError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Net::from_params(config, store)
}

pub fn write_checkpoint<T: Real>(path: impl AsRef<Path>, net: &Net<T>) -> Result<(), NetError> {
    std::fs::write(path, encode_checkpoint(net))?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Net<f32>, NetError> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_a() -> NetConfig {
        NetConfig {
            in_depth: 8,
            window_hw: 16,
            widths: vec![2, 4, 4],
            seed: 3,
            ..NetConfig::variant_a(2)
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = Net::<f32>::new(small_a()).unwrap();
        let bytes = encode_checkpoint(&net);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.config(), net.config());
        for (a, b) in net.params().params().iter().zip(back.params().params()) {
            assert_eq!(a.name, b.name);
            let ab: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn variant_b_round_trip() {
        let cfg = NetConfig {
            in_depth: 8,
            window_hw: 16,
            widths: vec![2, 4, 4, 4, 4],
            ..NetConfig::variant_b(1)
        };
        let net = Net::<f32>::new(cfg).unwrap();
        let bytes = encode_checkpoint(&net);
        assert_eq!(
            encode_checkpoint(&decode_checkpoint(&bytes).unwrap()),
            bytes
        );
    }

    #[test]
    fn corruption_is_rejected() {
        let bytes = encode_checkpoint(&Net::<f32>::new(small_a()).unwrap());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] ^= 1;
        assert!(decode_checkpoint(&bad).is_err());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(decode_checkpoint(&bad).is_err());
    }
}
