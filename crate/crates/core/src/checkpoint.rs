//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `AVCK`, `u16` version, `u32` length plus UTF-8
//! JSON echo of the [`SeparatorConfig`], `u32` tensor count, then per tensor a
//! `u16` name length, the name, a `u8` rank, `u32` dims and `f32` values.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::model::AvSepNet;
use crate::nn::Parameterized;
use crate::separator::SeparatorConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AVCK";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn encode_checkpoint(net: &AvSepNet<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let echo = serde_json::to_vec(net.config()).expect("config serialises");
    out.extend_from_slice(&(echo.len() as u32).to_le_bytes());
    out.extend_from_slice(&echo);
    let params = net.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(p.value.ndim() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Decodes a checkpoint; the network is rebuilt from the embedded config and
/// every tensor must match it by name and shape.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<AvSepNet<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version(format!(
            "checkpoint version {version}, supported {CHECKPOINT_VERSION}"
        )));
    }
    let len = r.u32()? as usize;
    let config: SeparatorConfig = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Format(format!("checkpoint config echo: {e}")))?;
    let mut net = AvSepNet::<f32>::new(&config)?;
    let count = r.u32()? as usize;
    let mut params = net.params_mut();
    if count != params.len() {
        return Err(Error::Version(format!(
            "checkpoint holds {count} tensors, config implies {}",
            params.len()
        )));
    }
    for (expected, p) in params.iter_mut() {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if name != expected || dims != p.value.shape() {
            return Err(Error::Version(format!(
                "tensor {name} {dims:?} does not match {expected} {:?} implied by the config",
                p.value.shape()
            )));
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let values: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("tensor {name} holds non-finite values")));
        }
        p.value = ArrayD::from_shape_vec(IxDyn(&dims), values).expect("length checked");
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(net)
}

pub fn save_checkpoint(net: &AvSepNet<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(net)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<AvSepNet<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint that must have been written for `expected`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &SeparatorConfig) -> Result<AvSepNet<f32>> {
    let net = load_checkpoint(path)?;
    if net.config() != expected {
        return Err(Error::Version("checkpoint config echo does not match the requested config".into()));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SeparatorConfig {
        SeparatorConfig { dim: 8, heads: 2, ffn_width: 8, blocks: 1, layers: 1, visual_dim: 4, chunk_size: 4, ..Default::default() }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut net = AvSepNet::<f32>::new(&small()).unwrap();
        for (_, p) in net.params_mut() {
            p.value.mapv_inplace(|v| v * 1.5 + 0.25);
        }
        let back = decode_checkpoint(&encode_checkpoint(&net)).unwrap();
        let a: Vec<_> = net.params().into_iter().map(|(n, p)| (n, p.value.clone())).collect();
        let b: Vec<_> = back.params().into_iter().map(|(n, p)| (n, p.value.clone())).collect();
        assert_eq!(a, b);
        assert_eq!(back.config(), net.config());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let net = AvSepNet::<f32>::new(&small()).unwrap();
        let bytes = encode_checkpoint(&net);
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        let mut newer = bytes.clone();
        newer[4] = 9;
        assert!(matches!(decode_checkpoint(&newer), Err(Error::Version(_))));
    }

    #[test]
    fn config_mismatch_is_a_version_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&AvSepNet::<f32>::new(&small()).unwrap(), &path).unwrap();
        let other = SeparatorConfig { blocks: 2, ..small() };
        assert!(matches!(load_checkpoint_for(&path, &other), Err(Error::Version(_))));
        load_checkpoint_for(&path, &small()).unwrap();
    }
}
