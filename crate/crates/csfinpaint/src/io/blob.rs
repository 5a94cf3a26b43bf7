//! Named f64 array blobs: the storage layer for checkpoints and feature
//! extractor weights. Values are little-endian f64, concatenated in manifest
//! order, with a SHA-256 over the whole blob.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

pub fn write_blob(
    path: &Path,
    arrays: &[(String, ArrayD<f64>)],
) -> Result<(Vec<BlobEntry>, String)> {
    let mut entries = Vec::with_capacity(arrays.len());
    let mut bytes: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (name, a) in arrays {
        let len = a.len();
        entries.push(BlobEntry {
            name: name.clone(),
            shape: a.shape().to_vec(),
            offset,
            len,
        });
        for v in a.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        offset += len;
    }
    let sha = hex::encode(Sha256::digest(&bytes));
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok((entries, sha))
}

pub fn read_blob(
    path: &Path,
    entries: &[BlobEntry],
    expected_sha: &str,
) -> Result<Vec<(String, ArrayD<f64>)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let sha = hex::encode(Sha256::digest(&bytes));
    if sha != expected_sha {
        return Err(Error::Checkpoint(format!(
            "parameter blob checksum mismatch: manifest {expected_sha}, file {sha}"
        )));
    }
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let start = e.offset * 8;
        let end = start + e.len * 8;
        let chunk = bytes.get(start..end).ok_or_else(|| {
            Error::Checkpoint(format!("blob entry {} out of range", e.name))
        })?;
        let values: Vec<f64> = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), values)
            .map_err(|err| Error::Checkpoint(format!("blob entry {}: {err}", e.name)))?;
        out.push((e.name.clone(), arr));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_roundtrip_is_exact_and_checksummed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("params.bin");
        let arrays = vec![
            ("a.w".to_string(), ArrayD::from_elem(IxDyn(&[2, 3]), 0.1)),
            (
                "b.w".to_string(),
                ArrayD::from_shape_fn(IxDyn(&[4]), |i| (i[0] as f64).sqrt()),
            ),
        ];
        let (entries, sha) = write_blob(&p, &arrays).unwrap();
        let back = read_blob(&p, &entries, &sha).unwrap();
        for ((n0, a0), (n1, a1)) in arrays.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(a0, a1);
        }
        assert!(read_blob(&p, &entries, "deadbeef").is_err());
    }
}
