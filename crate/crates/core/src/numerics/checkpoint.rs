//! Binary parameter checkpoint.
//!
//! ```text
//! "QNET" | version: u32 | block count: u32
//! repeated until EOF:
//!   name length: u32 | name: UTF-8 | dtype: u8 | rank: u32 | extents: u64 × rank | values
//! ```
//! All integers and values are little-endian. dtype 0 is f32, 1 is f64.

use std::io::{Read, Write};

use super::{Parameter, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"QNET";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub block_count: u32,
    pub records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn write_checkpoint<'p, W: Write>(
    mut w: W,
    block_count: u32,
    params: impl IntoIterator<Item = &'p Parameter>,
) -> Result<()> {
    let io = |e| Error::Checkpoint(format!("write failed: {e}"));
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&block_count.to_le_bytes()).map_err(io)?;
    for p in params {
        let name = p.name().as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name).map_err(io)?;
        w.write_all(&[DTYPE_F64]).map_err(io)?;
        w.write_all(&(p.shape().len() as u32).to_le_bytes()).map_err(io)?;
        for &e in p.shape() {
            w.write_all(&(e as u64).to_le_bytes()).map_err(io)?;
        }
        w.write_all(&p.value().to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Checkpoint(format!("read failed: {e}")))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Checkpoint("missing QNET magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let block_count = cur.u32()?;
    let mut records = Vec::new();
    while cur.pos < bytes.len() {
        let len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let dtype = cur.take(1)?[0];
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let count: usize = shape.iter().product();
        let data = match dtype {
            DTYPE_F64 => cur
                .take(count * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DTYPE_F32 => cur
                .take(count * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            other => return Err(Error::Checkpoint(format!("unknown dtype tag {other} for `{name}`"))),
        };
        records.push((name, Tensor::new(shape, data)?));
    }
    Ok(Checkpoint {
        block_count,
        records,
    })
}

struct Cursor<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Cursor<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let p = Parameter::new("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, 3, [&p]).unwrap();
        assert_eq!(&buf[..4], b"QNET");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &3u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1u32.to_le_bytes());
        assert_eq!(buf[16], b'w');
        assert_eq!(buf[17], DTYPE_F64);
        assert_eq!(&buf[18..22], &1u32.to_le_bytes());
        assert_eq!(&buf[22..30], &2u64.to_le_bytes());
        assert_eq!(buf.len(), 30 + 16);
    }

    #[test]
    fn round_trip() {
        let a = Parameter::new("block0.w", Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, -4.0, 5e-9, 6.0]).unwrap());
        let b = Parameter::new("block0.mix", Tensor::scalar(0.0));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, 1, [&a, &b]).unwrap();
        let ck = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(ck.block_count, 1);
        assert_eq!(ck.get("block0.w"), Some(a.value()));
        assert_eq!(ck.get("block0.mix"), Some(b.value()));
    }

    #[test]
    fn f32_records_are_widened() {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"QNET");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.push(b'x');
        buf.push(DTYPE_F32);
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&1u64.to_le_bytes());
        buf.extend_from_slice(&0.5f32.to_le_bytes());
        let ck = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(ck.get("x").unwrap().data(), &[0.5]);
    }

    #[test]
    fn truncation_and_magic_errors() {
        let p = Parameter::new("w", Tensor::zeros(&[4]));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, 1, [&p]).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
        buf[0] = b'X';
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }
}
