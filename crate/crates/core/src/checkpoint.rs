//! Binary checkpoint container.
//!
//! Layout, all integers little-endian: magic `DUDG`, `u32` version, `u64`
//! entry count, then per entry `u64` name length, name bytes (UTF-8),
//! `u64` rank, `rank × u64` dims, and the `f64` data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::autodiff::Tensor;

pub const MAGIC: &[u8; 4] = b"DUDG";
pub const VERSION: u32 = 1;

const MAX_NAME: u64 = 4096;
const MAX_RANK: u64 = 8;
const MAX_ELEMENTS: u64 = 1 << 31;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io ({path}): {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint lacks entry `{0}`")]
    Missing(String),
}

fn format_err(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Format(msg.into())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.push((name.into(), value));
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for (name, t) in &self.entries {
            out.write_all(&(name.len() as u64).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(t.rank() as u64).to_le_bytes())?;
            for &d in t.shape() {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        read_exact(&mut input, &mut magic)?;
        if &magic != MAGIC {
            return Err(format_err("bad magic bytes"));
        }
        let mut v = [0u8; 4];
        read_exact(&mut input, &mut v)?;
        let version = u32::from_le_bytes(v);
        if version != VERSION {
            return Err(format_err(format!("unsupported version {version}")));
        }
        let count = read_u64(&mut input)?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = read_u64(&mut input)?;
            if len > MAX_NAME {
                return Err(format_err(format!("entry name length {len}")));
            }
            let mut name = vec![0u8; len as usize];
            read_exact(&mut input, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| format_err("entry name is not UTF-8"))?;
            let rank = read_u64(&mut input)?;
            if rank > MAX_RANK {
                return Err(format_err(format!("`{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            let mut total: u64 = 1;
            for _ in 0..rank {
                let d = read_u64(&mut input)?;
                total = total.checked_mul(d).filter(|&t| t <= MAX_ELEMENTS).ok_or_else(|| format_err(format!("`{name}` is too large")))?;
                shape.push(d as usize);
            }
            let mut raw = vec![0u8; total as usize * 8];
            read_exact(&mut input, &mut raw)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(shape, data).map_err(|e| format_err(e.to_string()))?;
            entries.push((name, t));
        }
        let mut rest = [0u8; 1];
        if input.read(&mut rest).map_err(|e| io_err("<stream>", e))? != 0 {
            return Err(format_err("trailing bytes after last entry"));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        self.write_to(BufWriter::new(file)).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let file = File::open(path).map_err(|e| io_err(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}

fn io_err(path: impl AsRef<Path>, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io { path: path.as_ref().display().to_string(), source }
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<(), CheckpointError> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => format_err("truncated file"),
        _ => io_err("<stream>", e),
    })
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    read_exact(input, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let mut ck = Checkpoint::default();
        ck.push("a", Tensor::matrix(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap());
        ck.push("empty", Tensor::vector(vec![]));
        ck.push("s", Tensor::scalar(0.1));
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"DUDG");
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.entries().len(), 3);
        for ((na, ta), (nb, tb)) in ck.entries().iter().zip(back.entries()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb));
        }
    }

    #[test]
    fn corrupt_input_rejected() {
        let mut ck = Checkpoint::default();
        ck.push("w", Tensor::vector(vec![1.0, 2.0]));
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert!(Checkpoint::read_from(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read_from(bad.as_slice()).is_err());
        let mut extra = buf;
        extra.push(0);
        assert!(Checkpoint::read_from(extra.as_slice()).is_err());
        assert!(matches!(ck.get("nope"), Err(CheckpointError::Missing(_))));
    }
}
