//! The XDE1 tensor archive format.
//!
//! Layout, bit-exact:
//!
//! ```text
//! bytes 0..4    magic "XDE1"
//! bytes 4..8    u32 little-endian metadata length L
//! bytes 8..8+L  UTF-8 JSON metadata (architecture, tensor names/shapes/
//!               order, seed, training stage)
//! then          raw little-endian f32 arrays, in declared order
//! ```
//!
//! The same container stores network checkpoints and dumped prediction
//! tensors; `kind` in the metadata tells them apart.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"XDE1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Archive metadata. `arch` carries the network config for checkpoints and
/// arbitrary context (cell, image ids) for prediction dumps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchiveMeta {
    pub kind: String,
    pub stage: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<serde_json::Value>,
    pub tensors: Vec<TensorMeta>,
}

pub fn write_archive(path: &Path, meta: &ArchiveMeta, tensors: &[(&str, &Tensor)]) -> Result<()> {
    if meta.tensors.len() != tensors.len() {
        return Err(Error::precondition(format!(
            "metadata declares {} tensors, {} supplied",
            meta.tensors.len(),
            tensors.len()
        )));
    }
    for (tm, (name, t)) in meta.tensors.iter().zip(tensors) {
        if tm.name != *name || tm.shape != t.shape() {
            return Err(Error::precondition(format!(
                "tensor `{}` does not match its declaration",
                name
            )));
        }
    }
    let meta_bytes =
        serde_json::to_vec(meta).map_err(|e| Error::config(format!("metadata encode: {e}")))?;
    let mut out = Vec::with_capacity(8 + meta_bytes.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    for (_, t) in tensors {
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<(ArchiveMeta, Vec<(String, Tensor)>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let fail = |offset: u64, detail: String| Error::Format {
        path: path.to_path_buf(),
        offset,
        detail,
    };
    if bytes.len() < 8 {
        return Err(fail(0, format!("file truncated at {} bytes", bytes.len())));
    }
    if bytes[0..4] != MAGIC {
        return Err(fail(
            0,
            format!("bad magic {:02x?}, expected \"XDE1\"", &bytes[0..4]),
        ));
    }
    let meta_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if 8 + meta_len > bytes.len() {
        return Err(fail(
            4,
            format!(
                "metadata length {} exceeds file size {}",
                meta_len,
                bytes.len()
            ),
        ));
    }
    let meta: ArchiveMeta = serde_json::from_slice(&bytes[8..8 + meta_len])
        .map_err(|e| fail(8, format!("metadata parse: {e}")))?;
    let mut offset = 8 + meta_len;
    let mut tensors = Vec::with_capacity(meta.tensors.len());
    for tm in &meta.tensors {
        let numel: usize = tm.shape.iter().product();
        let end = offset + 4 * numel;
        if end > bytes.len() {
            return Err(fail(
                offset as u64,
                format!("tensor `{}` truncated: need {} bytes", tm.name, 4 * numel),
            ));
        }
        let data: Vec<f32> = bytes[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((tm.name.clone(), Tensor::new(tm.shape.clone(), data)?));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(fail(
            offset as u64,
            format!("{} trailing bytes after declared tensors", bytes.len() - offset),
        ));
    }
    Ok((meta, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample_meta(tensors: Vec<TensorMeta>) -> ArchiveMeta {
        ArchiveMeta {
            kind: "test".into(),
            stage: "nll".into(),
            seed: 7,
            arch: None,
            tensors,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.xde1");
        let t1 = Tensor::new(vec![2, 2], vec![1.0, -0.5, 3.25, f32::MIN_POSITIVE]).unwrap();
        let t2 = Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        let meta = sample_meta(vec![
            TensorMeta {
                name: "w".into(),
                shape: vec![2, 2],
            },
            TensorMeta {
                name: "b".into(),
                shape: vec![3],
            },
        ]);
        write_archive(&path, &meta, &[("w", &t1), ("b", &t2)]).unwrap();
        let (meta2, tensors) = read_archive(&path).unwrap();
        assert_eq!(meta2.tensors, meta.tensors);
        assert_eq!(tensors[0].1.data(), t1.data());
        assert_eq!(tensors[1].1.data(), t2.data());

        // Bitwise stability of the file itself.
        let bytes1 = std::fs::read(&path).unwrap();
        write_archive(&path, &meta, &[("w", &t1), ("b", &t2)]).unwrap();
        assert_eq!(bytes1, std::fs::read(&path).unwrap());
    }

    #[test]
    fn corrupted_magic_is_reported_with_offset() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.xde1");
        std::fs::write(&path, b"NOPE\x00\x00\x00\x00").unwrap();
        let err = read_archive(&path).unwrap_err();
        match err {
            Error::Format { offset, detail, .. } => {
                assert_eq!(offset, 0);
                assert!(detail.contains("XDE1"), "{detail}");
            }
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn truncated_tensor_data_is_reported() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trunc.xde1");
        let t = Tensor::new(vec![4], vec![1.0; 4]).unwrap();
        let meta = sample_meta(vec![TensorMeta {
            name: "w".into(),
            shape: vec![4],
        }]);
        write_archive(&path, &meta, &[("w", &t)]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = read_archive(&path).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        assert!(err.to_string().contains('w'));
    }
}
