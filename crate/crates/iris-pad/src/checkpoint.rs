//! Single-file versioned checkpoint container.
//!
//! Layout: an 8-byte magic, a u32 format version, a u64 header length, a JSON
//! header, then raw little-endian f32 tensor payloads. The header carries
//! arbitrary JSON metadata (training config snapshot, epoch, optimizer step)
//! plus the tensor index. Writes go through a temp file and rename so a
//! checkpoint is never observable half-written.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"IRPADCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorIndexEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload region.
    offset: u64,
    /// Element count.
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    meta: serde_json::Value,
    tensors: Vec<TensorIndexEntry>,
}

pub struct Container {
    pub format_version: u32,
    pub meta: serde_json::Value,
    pub tensors: HashMap<String, Tensor>,
    /// Index order as written, for order-sensitive consumers.
    pub order: Vec<String>,
}

pub fn write_container(
    path: &Path,
    meta: &serde_json::Value,
    tensors: &[(String, Tensor)],
) -> Result<()> {
    let mut index = Vec::with_capacity(tensors.len());
    let mut payload: Vec<u8> = Vec::new();
    for (name, t) in tensors {
        let flat = t.flatten_all()?.to_vec1::<f32>()?;
        let offset = payload.len() as u64;
        for v in &flat {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        index.push(TensorIndexEntry {
            name: name.clone(),
            shape: t.dims().to_vec(),
            offset,
            len: flat.len() as u64,
        });
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        meta: meta.clone(),
        tensors: index,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialization failed: {e}")))?;

    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(MAGIC).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&FORMAT_VERSION.to_le_bytes())
            .map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&(header_json.len() as u64).to_le_bytes())
            .map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&header_json).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&payload).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Container> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[0..8] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint container (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported container format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header_end = 20 + header_len;
    if bytes.len() < header_end {
        return Err(Error::Checkpoint("truncated container header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[20..header_end])
        .map_err(|e| Error::Checkpoint(format!("corrupt container header: {e}")))?;
    let payload = &bytes[header_end..];

    let device = Device::Cpu;
    let mut tensors = HashMap::with_capacity(header.tensors.len());
    let mut order = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let start = entry.offset as usize;
        let end = start + entry.len as usize * 4;
        if payload.len() < end {
            return Err(Error::Checkpoint(format!(
                "truncated payload for tensor `{}`",
                entry.name
            )));
        }
        let mut data = Vec::with_capacity(entry.len as usize);
        for chunk in payload[start..end].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        let expected: usize = entry.shape.iter().product();
        if expected != data.len() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` shape {:?} disagrees with payload length {}",
                entry.name,
                entry.shape,
                data.len()
            )));
        }
        let t = Tensor::from_vec(data, entry.shape.clone(), &device)?;
        tensors.insert(entry.name.clone(), t);
        order.push(entry.name.clone());
    }
    Ok(Container {
        format_version: header.format_version,
        meta: header.meta,
        tensors,
        order,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let dev = Device::Cpu;
        let a = Tensor::from_vec(vec![1.5f32, -2.25, 3.0e-7, 0.0], (2, 2), &dev).unwrap();
        let b = Tensor::from_vec((0..24).map(|i| i as f32 * 0.1).collect(), (2, 3, 4), &dev)
            .unwrap();
        let meta = serde_json::json!({"epoch": 3, "note": "x"});
        write_container(
            &path,
            &meta,
            &[("a".to_string(), a.clone()), ("b".to_string(), b.clone())],
        )
        .unwrap();
        let c = read_container(&path).unwrap();
        assert_eq!(c.meta["epoch"], 3);
        assert_eq!(c.order, vec!["a", "b"]);
        let ra = c.tensors["a"].flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let oa = a.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(ra, oa);
        assert_eq!(c.tensors["b"].dims(), &[2, 3, 4]);
    }

    #[test]
    fn rejects_garbage_and_wrong_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        let err = read_container(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");

        // Valid magic, bumped version.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&99u32.to_le_bytes());
        bytes.extend_from_slice(&0u64.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = read_container(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
        let _ = DType::F32;
    }

    #[test]
    fn no_tmp_file_left_behind() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let t = Tensor::zeros((4,), DType::F32, &Device::Cpu).unwrap();
        write_container(&path, &serde_json::json!({}), &[("t".into(), t)]).unwrap();
        let names: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(names, vec!["m.ckpt"]);
    }
}
