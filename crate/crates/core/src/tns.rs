//! The `.tns` raw tensor file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"IDTN"
//! version  u16   (currently 1)
//! rank     u8
//! dims     rank x u32
//! payload  prod(dims) x f64, row-major
//! ```
//!
//! Parameter checkpoints append a named-slice table after the payload:
//! `count: u32`, then per slice `name_len: u32`, `name: [u8; name_len]`
//! (UTF-8), `offset: u64`, `length: u64`. Plain tensor files must end right
//! after the payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"IDTN";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceEntry {
    pub name: String,
    pub offset: u64,
    pub length: u64,
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.shape().len() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_checkpoint(t: &Tensor, slices: &[SliceEntry]) -> Vec<u8> {
    let mut out = encode_tensor(t);
    out.extend_from_slice(&(slices.len() as u32).to_le_bytes());
    for s in slices {
        out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
        out.extend_from_slice(s.name.as_bytes());
        out.extend_from_slice(&s.offset.to_le_bytes());
        out.extend_from_slice(&s.length.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.buf.len() {
            return Err(format!(
                "truncated: need {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn decode_body(r: &mut Reader<'_>) -> std::result::Result<Tensor, String> {
    if r.take(4)? != MAGIC {
        return Err("bad magic bytes (expected IDTN)".into());
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let rank = r.take(1)?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let n: usize = shape.iter().product();
    let raw = r.take(n.checked_mul(8).ok_or("payload size overflow")?)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

/// Decodes a plain tensor. `origin` only labels errors.
pub fn decode_tensor(buf: &[u8], origin: &Path) -> Result<Tensor> {
    let mut r = Reader { buf, pos: 0 };
    let t = decode_body(&mut r).map_err(|m| Error::format(origin, m))?;
    if r.remaining() != 0 {
        return Err(Error::format(
            origin,
            format!("{} trailing bytes after payload", r.remaining()),
        ));
    }
    Ok(t)
}

pub fn decode_checkpoint(buf: &[u8], origin: &Path) -> Result<(Tensor, Vec<SliceEntry>)> {
    let mut r = Reader { buf, pos: 0 };
    let parse = |r: &mut Reader<'_>| -> std::result::Result<_, String> {
        let t = decode_body(r)?;
        let count = r.u32()? as usize;
        let mut slices = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| "slice name is not UTF-8".to_string())?
                .to_string();
            let offset = r.u64()?;
            let length = r.u64()?;
            if offset + length > t.len() as u64 {
                return Err(format!("slice `{name}` exceeds payload"));
            }
            slices.push(SliceEntry { name, offset, length });
        }
        if r.remaining() != 0 {
            return Err(format!("{} trailing bytes after slice table", r.remaining()));
        }
        Ok((t, slices))
    };
    parse(&mut r).map_err(|m| Error::format(origin, m))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let buf = fs::read(path).map_err(|e| Error::format(path, e.to_string()))?;
    decode_tensor(&buf, path)
}

pub fn write_checkpoint(path: &Path, t: &Tensor, slices: &[SliceEntry]) -> Result<()> {
    fs::write(path, encode_checkpoint(t, slices))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(Tensor, Vec<SliceEntry>)> {
    let buf = fs::read(path).map_err(|e| Error::format(path, e.to_string()))?;
    decode_checkpoint(&buf, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_bytes_are_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -0.5]).unwrap();
        let b = encode_tensor(&t);
        assert_eq!(&b[..4], b"IDTN");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(b[6], 2);
        assert_eq!(&b[7..11], &[2, 0, 0, 0]);
        assert_eq!(&b[11..15], &[1, 0, 0, 0]);
        assert_eq!(&b[15..23], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 15 + 16);
    }

    #[test]
    fn corrupt_magic_names_file() {
        let t = Tensor::vector(vec![1.0]);
        let mut b = encode_tensor(&t);
        b[0] = b'X';
        let err = decode_tensor(&b, Path::new("img_03.tns")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("img_03.tns") && msg.contains("magic"), "{msg}");
    }

    #[test]
    fn plain_reader_rejects_checkpoint_tail() {
        let t = Tensor::vector(vec![1.0, 2.0]);
        let slices = vec![SliceEntry {
            name: "w".into(),
            offset: 0,
            length: 2,
        }];
        let b = encode_checkpoint(&t, &slices);
        assert!(decode_tensor(&b, Path::new("x")).is_err());
        let (t2, s2) = decode_checkpoint(&b, Path::new("x")).unwrap();
        assert_eq!(t2, t);
        assert_eq!(s2, slices);
    }

    #[test]
    fn slice_out_of_bounds_rejected() {
        let t = Tensor::vector(vec![1.0, 2.0]);
        let slices = vec![SliceEntry {
            name: "w".into(),
            offset: 1,
            length: 2,
        }];
        let b = encode_checkpoint(&t, &slices);
        assert!(decode_checkpoint(&b, Path::new("x")).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(dims in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let mut r = crate::rng::RngState::new(seed);
            let t = Tensor::new(dims, r.gaussian_vec(n)).unwrap();
            let back = decode_tensor(&encode_tensor(&t), Path::new("p")).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
