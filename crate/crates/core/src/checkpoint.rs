//! Single-file model archive: a JSON manifest plus named f64 arrays.
//!
//! Layout (little endian): magic `GPMSEGCK`, u32 format version, u32 manifest
//! length, manifest bytes, u32 array count, then per array: u32 name length,
//! name, u8 kind (0 trainable, 1 buffer), u32 rank, u64 dims, f64 values.

use std::collections::HashMap;
use std::path::Path;

use gpmseg_tensor::{Module, Param, ParamKind, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{io_err, GpmError, Result};

pub const MAGIC: &[u8; 8] = b"GPMSEGCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: serde_json::Value,
    pub params: Vec<Param>,
}

fn ck(msg: impl Into<String>) -> GpmError {
    GpmError::Checkpoint(msg.into())
}

pub fn encode(manifest: &serde_json::Value, model: &dyn Module) -> Vec<u8> {
    let mut manifest = manifest.clone();
    if let Some(obj) = manifest.as_object_mut() {
        obj.insert("format_version".into(), FORMAT_VERSION.into());
    }
    let text = serde_json::to_vec(&manifest).expect("json values serialize");
    let mut params = Vec::new();
    model.visit_params(&mut |p| params.push(p.clone()));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in &params {
        let name = p.name().as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.push(match p.kind() {
            ParamKind::Trainable => 0,
            ParamKind::Buffer => 1,
        });
        let shape = p.value().shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value().data() {
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
        let end = end.ok_or_else(|| ck("truncated archive"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(ck("not a checkpoint archive"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(GpmError::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let mlen = r.u32()? as usize;
    let manifest: serde_json::Value =
        serde_json::from_slice(r.take(mlen)?).map_err(|e| ck(format!("bad manifest: {e}")))?;
    let count = r.u32()?;
    let mut params = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| ck("parameter name is not UTF-8"))?
            .to_string();
        let kind = r.take(1)?[0];
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n.checked_mul(8).ok_or_else(|| ck("array too large"))?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let value = Tensor::new(&shape, data).map_err(|e| ck(e.to_string()))?;
        params.push(match kind {
            0 => Param::new(name, value),
            1 => Param::buffer(name, value),
            k => return Err(ck(format!("unknown parameter kind {k}"))),
        });
    }
    if r.pos != bytes.len() {
        return Err(ck("trailing bytes after archive"));
    }
    Ok(Checkpoint { manifest, params })
}

/// Writes through a temporary file and renames it into place.
pub fn save(path: &Path, manifest: &serde_json::Value, model: &dyn Module) -> Result<()> {
    let bytes = encode(manifest, model);
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, &bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode(&bytes)
}

/// Copies stored arrays into `model`; every model parameter must be present
/// with a matching shape.
pub fn restore(model: &mut dyn Module, ckpt: &Checkpoint) -> Result<()> {
    let by_name: HashMap<&str, &Param> = ckpt.params.iter().map(|p| (p.name(), p)).collect();
    let mut err = None;
    model.visit_params_mut(&mut |p| {
        if err.is_some() {
            return;
        }
        match by_name.get(p.name()) {
            None => err = Some(ck(format!("missing parameter `{}`", p.name()))),
            Some(src) if src.value().shape() != p.value().shape() => {
                err = Some(ck(format!(
                    "shape mismatch for `{}`: {:?} vs {:?}",
                    p.name(),
                    src.value().shape(),
                    p.value().shape()
                )))
            }
            Some(src) => *p.value_mut() = src.value().clone(),
        }
    });
    err.map_or(Ok(()), Err)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(io_err(path))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::BatchNorm2d;

    #[test]
    fn round_trip_preserves_values_and_kinds() {
        let mut bn = BatchNorm2d::new("bn", 3);
        bn.visit_params_mut(&mut |p| {
            *p.value_mut() = Tensor::from_fn(&[3], |i| i as f64 * 0.1 + 0.3);
        });
        let bytes = encode(&serde_json::json!({"base_channels": 8}), &bn);
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.manifest["format_version"], FORMAT_VERSION);
        let mut fresh = BatchNorm2d::new("bn", 3);
        restore(&mut fresh, &ck).unwrap();
        assert_eq!(encode(&serde_json::json!({"base_channels": 8}), &fresh), bytes);
        assert_eq!(ck.params.iter().filter(|p| !p.is_trainable()).count(), 2);
    }

    #[test]
    fn version_and_corruption_are_reported() {
        let bn = BatchNorm2d::new("bn", 2);
        let mut bytes = encode(&serde_json::json!({}), &bn);
        bytes[8] = 9;
        assert!(matches!(decode(&bytes), Err(GpmError::CheckpointVersion { found: 9, .. })));
        let bytes = encode(&serde_json::json!({}), &bn);
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut other = BatchNorm2d::new("other", 2);
        assert!(restore(&mut other, &decode(&bytes).unwrap()).is_err());
    }
}
