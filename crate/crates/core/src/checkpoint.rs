//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CDKD"                      magic
//! u16                         format version
//! u32 + UTF-8                 header: canonical key/value text
//! u32                         tensor count
//! per tensor:
//!   u16 + UTF-8               name
//!   u8                        rank
//!   u32 × rank                extents
//!   f32 × numel               values
//! u32                         CRC-32 of every preceding byte
//! ```
//!
//! The header is rendered canonically and tensors keep their order, so a
//! load followed by a save reproduces the input file byte for byte.

use std::fs;
use std::path::Path;

use crate::kv::KvDoc;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CDKD";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub header: KvDoc,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(header: KvDoc) -> Self {
        Self {
            header,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.push((name.into(), t.detached()));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose name starts with `prefix`, prefix stripped, in file order.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = self.header.render();
        let mut out = Vec::with_capacity(64 + header.len() + self.tensors.iter().map(|(_, t)| 4 * t.numel() + 32).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(header.len(), "header")?.to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&len_u32(self.tensors.len(), "tensor count")?.to_le_bytes());
        for (name, t) in &self.tensors {
            let n = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&n.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.rank()).map_err(|_| Error::Checkpoint(format!("rank too large for `{name}`")))?;
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&len_u32(d, "extent")?.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
        }
        if bytes.len() < 4 + 2 + 4 + 4 + 4 {
            return Err(Error::Checkpoint(format!("file too short ({} bytes)", bytes.len())));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (this build reads {VERSION})"
            )));
        }
        let hlen = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(hlen)?)
            .map_err(|_| Error::Checkpoint("header is not valid UTF-8".into()))?;
        let header = KvDoc::parse(header)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Checkpoint("tensor name is not valid UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after tensor table", body.len() - r.pos)));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} does not fit in 32 bits")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("unexpected end of file at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut h = KvDoc::new();
        h.section_mut("model").set("channels", "[4, 8]").set("residual", true);
        let mut c = Checkpoint::new(h);
        c.push("stem", &Tensor::from_fn([4, 3, 3, 3], |i| i as f32 * 0.01 - 0.5));
        c.push("fc.bias", &Tensor::new([2], vec![f32::MIN_POSITIVE, -0.0]).unwrap());
        c.push("scalar", &Tensor::scalar(3.5));
        c
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let a = sample().to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&a).unwrap();
        assert_eq!(back.to_bytes().unwrap(), a);
        assert_eq!(back.tensor("fc.bias").unwrap().data()[1].to_bits(), (-0.0f32).to_bits());
        assert_eq!(&a[..4], b"CDKD");
    }

    #[test]
    fn every_corrupted_byte_is_reported() {
        let a = sample().to_bytes().unwrap();
        for i in 0..a.len() {
            let mut b = a.clone();
            b[i] ^= 0x5a;
            assert!(Checkpoint::from_bytes(&b).is_err(), "flip at byte {i} went unnoticed");
        }
        let mut b = a.clone();
        b[20] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Checksum { .. })));
        assert!(Checkpoint::from_bytes(&a[..a.len() - 3]).is_err());
    }

    #[test]
    fn magic_and_version() {
        let mut a = sample().to_bytes().unwrap();
        a[0] = b'X';
        assert!(Checkpoint::from_bytes(&a).unwrap_err().to_string().contains("magic"));

        let mut b = sample().to_bytes().unwrap();
        b[4] = 9;
        let n = b.len() - 4;
        let crc = crc32fast::hash(&b[..n]);
        b[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(Checkpoint::from_bytes(&b).unwrap_err().to_string().contains("version 9"));
    }
}
