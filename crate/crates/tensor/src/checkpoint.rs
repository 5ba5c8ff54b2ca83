//! Binary checkpoint format.
//!
//! ```text
//! magic     8 bytes  "SKMODCKP"
//! version   u32 LE
//! meta_len  u32 LE, followed by meta_len bytes of UTF-8 metadata
//! count     u32 LE
//! per parameter:
//!   name_len u32 LE, name bytes (UTF-8)
//!   ndim     u32 LE, ndim × u64 LE dims
//!   payload  product(dims) × f64 LE
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SKMODCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Free-form metadata, typically JSON describing the model config.
    pub metadata: String,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut impl Read, len: usize) -> Result<String> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| bad(format!("invalid UTF-8: {e}")))
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.metadata.len() as u32).to_le_bytes())?;
        w.write_all(self.metadata.as_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for d in t.shape() {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            let mut payload = Vec::with_capacity(t.numel() * 8);
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&payload)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let meta_len = read_u32(r)? as usize;
        let metadata = read_string(r, meta_len)?;
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let name = read_string(r, name_len)?;
            let ndim = read_u32(r)? as usize;
            let shape = (0..ndim)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let ck = Checkpoint {
            metadata: "{\"d_model\":4}".into(),
            tensors: vec![
                (
                    "a.w".into(),
                    Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.0, 1e-300]).unwrap(),
                ),
                ("a.b".into(), Tensor::scalar(f64::MIN_POSITIVE)),
            ],
        };
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(Checkpoint::from_bytes(b"NOTACKPT\x01\0\0\0").is_err());
        let ck = Checkpoint {
            metadata: String::new(),
            tensors: vec![("w".into(), Tensor::zeros(&[3]))],
        };
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
