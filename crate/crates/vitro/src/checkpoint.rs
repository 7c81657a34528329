//! Versioned named-tensor container: magic `VITRO1`, format version u32,
//! then records until EOF. Each record is name length (u32), UTF-8 name,
//! dtype code (u32, 1 = f64), rank (u32), dims (u32 each), then the
//! little-endian row-major f64 payload. Reload is bit-exact.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"VITRO1";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f64>,
}

impl TensorRecord {
    pub fn numel(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }
}

/// In-memory record list; insertion order is preserved on disk so
/// serialization is deterministic.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct CheckpointContainer {
    records: Vec<TensorRecord>,
}

impl CheckpointContainer {
    pub fn new() -> CheckpointContainer {
        CheckpointContainer::default()
    }

    pub fn push(&mut self, name: &str, dims: Vec<u32>, data: Vec<f64>) -> Result<()> {
        if self.records.iter().any(|r| r.name == name) {
            return Err(Error::Checkpoint(format!("duplicate record name '{name}'")));
        }
        let numel: usize = dims.iter().map(|&d| d as usize).product();
        if data.len() != numel {
            return Err(Error::Checkpoint(format!(
                "record '{name}': payload length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        self.records.push(TensorRecord {
            name: name.to_string(),
            dims,
            data,
        });
        Ok(())
    }

    pub fn push_tensor(&mut self, name: &str, tensor: &Tensor) -> Result<()> {
        let dims = tensor.shape().iter().map(|&d| d as u32).collect();
        self.push(name, dims, tensor.to_vec())
    }

    pub fn push_scalar(&mut self, name: &str, value: f64) -> Result<()> {
        self.push(name, vec![], vec![value])
    }

    /// u64 values (seeds) are stored as two exact f64 halves.
    pub fn push_u64(&mut self, name: &str, value: u64) -> Result<()> {
        self.push_scalar(&format!("{name}.hi"), (value >> 32) as f64)?;
        self.push_scalar(&format!("{name}.lo"), (value & 0xffff_ffff) as f64)
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&TensorRecord> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing record '{name}'")))
    }

    pub fn get_tensor(&self, name: &str) -> Result<Tensor> {
        let rec = self.require(name)?;
        let shape = rec.dims.iter().map(|&d| d as usize).collect();
        Tensor::from_vec(shape, rec.data.clone())
    }

    pub fn get_scalar(&self, name: &str) -> Result<f64> {
        let rec = self.require(name)?;
        if rec.numel() != 1 {
            return Err(Error::Checkpoint(format!(
                "record '{name}' is not a scalar (dims {:?})",
                rec.dims
            )));
        }
        Ok(rec.data[0])
    }

    pub fn get_u64(&self, name: &str) -> Result<u64> {
        let hi = self.get_scalar(&format!("{name}.hi"))? as u64;
        let lo = self.get_scalar(&format!("{name}.lo"))? as u64;
        Ok((hi << 32) | lo)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.name.as_str())
    }

    pub fn records(&self) -> &[TensorRecord] {
        &self.records
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for rec in &self.records {
            let name = rec.name.as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            out.extend_from_slice(&DTYPE_F64.to_le_bytes());
            out.extend_from_slice(&(rec.dims.len() as u32).to_le_bytes());
            for &d in &rec.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in &rec.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<CheckpointContainer> {
        let mut cursor = Cursor { bytes, pos: 0 };
        let magic = cursor.take(6)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {:?}, expected {:?}",
                &magic[..magic.len().min(6)],
                MAGIC
            )));
        }
        let version = cursor.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let mut container = CheckpointContainer::new();
        while !cursor.done() {
            let name_len = cursor.u32()? as usize;
            let name = String::from_utf8(cursor.take(name_len)?.to_vec())
                .map_err(|e| Error::Checkpoint(format!("record name is not UTF-8: {e}")))?;
            let dtype = cursor.u32()?;
            if dtype != DTYPE_F64 {
                return Err(Error::Checkpoint(format!(
                    "record '{name}': unsupported dtype code {dtype}"
                )));
            }
            let rank = cursor.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(cursor.u32()?);
            }
            let numel: usize = dims.iter().map(|&d| d as usize).product();
            let payload = cursor.take(numel * 8)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            container.push(&name, dims, data)?;
        }
        Ok(container)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<CheckpointContainer> {
        let bytes = fs::read(path)?;
        CheckpointContainer::from_bytes(&bytes)
    }

    pub fn sha256(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated payload: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut c = CheckpointContainer::new();
        c.push("a/mat", vec![2, 2], vec![1.0, -2.5, 1e-300, f64::MAX]).unwrap();
        c.push("b/vec", vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        c.push_scalar("c/scalar", -7.25).unwrap();
        let bytes = c.to_bytes();
        let back = CheckpointContainer::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn zero_rank_scalar_roundtrips() {
        let mut c = CheckpointContainer::new();
        c.push("s", vec![], vec![42.0]).unwrap();
        let back = CheckpointContainer::from_bytes(&c.to_bytes()).unwrap();
        let rec = back.get("s").unwrap();
        assert!(rec.dims.is_empty());
        assert_eq!(rec.data, vec![42.0]);
    }

    #[test]
    fn corrupted_magic_rejected() {
        let mut c = CheckpointContainer::new();
        c.push_scalar("x", 1.0).unwrap();
        let mut bytes = c.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            CheckpointContainer::from_bytes(&bytes),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut c = CheckpointContainer::new();
        c.push_scalar("x", 1.0).unwrap();
        let mut bytes = c.to_bytes();
        bytes[6] = 99;
        let err = CheckpointContainer::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn truncation_rejected() {
        let mut c = CheckpointContainer::new();
        c.push("x", vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = c.to_bytes();
        let err = CheckpointContainer::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut c = CheckpointContainer::new();
        c.push_scalar("x", 1.0).unwrap();
        assert!(matches!(c.push_scalar("x", 2.0), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn u64_seed_roundtrips_exactly() {
        let mut c = CheckpointContainer::new();
        let seed = u64::MAX - 12345;
        c.push_u64("seed", seed).unwrap();
        assert_eq!(c.get_u64("seed").unwrap(), seed);
    }
}
