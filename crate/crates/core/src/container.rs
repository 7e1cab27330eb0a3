//! Versioned binary container shared by every persisted artifact.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DRAMA1"                      magic, 6 bytes
//! u8                            content kind
//! u32 n, u64 × n                header fields
//! u32 n, (u32 len, utf-8) × n   string table
//! u32 n, record × n             tensor records
//! record := u32 name_len, name, u32 rank, u64 × rank dims, f64 × prod(dims)
//! ```

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::numerics::{numel, Tensor};

pub const MAGIC: &[u8; 6] = b"DRAMA1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ContentKind {
    Encoder = 0,
    Adapter = 1,
    Gate = 2,
    Index = 3,
}

impl ContentKind {
    fn from_u8(b: u8) -> Result<Self> {
        Ok(match b {
            0 => ContentKind::Encoder,
            1 => ContentKind::Adapter,
            2 => ContentKind::Gate,
            3 => ContentKind::Index,
            other => return Err(Error::format(format!("unknown content kind {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Record {
    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Self {
        Record { name: name.into(), dims: t.shape().to_vec(), data: t.data().to_vec() }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.dims.clone(), self.data.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: ContentKind,
    pub header: Vec<u64>,
    pub strings: Vec<String>,
    pub records: Vec<Record>,
}

fn count(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::format(format!("count {n} exceeds u32")))
}

impl Container {
    pub fn new(kind: ContentKind) -> Self {
        Container { kind, header: Vec::new(), strings: Vec::new(), records: Vec::new() }
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.records.push(Record::from_tensor(name, t));
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.write_all(MAGIC)?;
        out.write_u8(self.kind as u8)?;
        out.write_u32::<LittleEndian>(count(self.header.len())?)?;
        for &h in &self.header {
            out.write_u64::<LittleEndian>(h)?;
        }
        out.write_u32::<LittleEndian>(count(self.strings.len())?)?;
        for s in &self.strings {
            out.write_u32::<LittleEndian>(count(s.len())?)?;
            out.write_all(s.as_bytes())?;
        }
        out.write_u32::<LittleEndian>(count(self.records.len())?)?;
        for r in &self.records {
            if numel(&r.dims) != r.data.len() {
                return Err(Error::format(format!("record {} has inconsistent dims", r.name)));
            }
            out.write_u32::<LittleEndian>(count(r.name.len())?)?;
            out.write_all(r.name.as_bytes())?;
            out.write_u32::<LittleEndian>(count(r.dims.len())?)?;
            for &d in &r.dims {
                out.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in &r.data {
                out.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let trunc = |e: std::io::Error| Error::format(format!("truncated container: {e}"));
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 6];
        cur.read_exact(&mut magic).map_err(trunc)?;
        if &magic != MAGIC {
            return Err(Error::format("bad magic, expected DRAMA1"));
        }
        let kind = ContentKind::from_u8(cur.read_u8().map_err(trunc)?)?;
        let n = cur.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let header = (0..n)
            .map(|_| cur.read_u64::<LittleEndian>().map_err(trunc))
            .collect::<Result<Vec<_>>>()?;
        let n = cur.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let mut strings = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            strings.push(read_string(&mut cur)?);
        }
        let n = cur.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let mut records = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = read_string(&mut cur)?;
            let rank = cur.read_u32::<LittleEndian>().map_err(trunc)? as usize;
            let dims = (0..rank)
                .map(|_| cur.read_u64::<LittleEndian>().map(|d| d as usize).map_err(trunc))
                .collect::<Result<Vec<_>>>()?;
            let len = numel(&dims);
            let remaining = bytes.len() - cur.position() as usize;
            if len.checked_mul(8).is_none_or(|b| b > remaining) {
                return Err(Error::format(format!("record {name} payload truncated")));
            }
            let mut data = vec![0.0; len];
            cur.read_f64_into::<LittleEndian>(&mut data).map_err(trunc)?;
            records.push(Record { name, dims, data });
        }
        if (cur.position() as usize) != bytes.len() {
            return Err(Error::format("trailing bytes after last record"));
        }
        Ok(Container { kind, header, strings, records })
    }

    pub fn expect_kind(self, kind: ContentKind) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::format(format!("expected {:?} container, found {:?}", kind, self.kind)));
        }
        Ok(self)
    }

    pub fn header_at(&self, i: usize) -> Result<u64> {
        self.header
            .get(i)
            .copied()
            .ok_or_else(|| Error::format(format!("header field {i} missing")))
    }

    /// Takes records in order, checking each name.
    pub fn reader(&self) -> RecordReader<'_> {
        RecordReader { records: &self.records, pos: 0 }
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Container::from_bytes(&fs::read(path)?)
    }
}

fn read_string(cur: &mut Cursor<&[u8]>) -> Result<String> {
    let len = cur
        .read_u32::<LittleEndian>()
        .map_err(|e| Error::format(format!("truncated container: {e}")))? as usize;
    let remaining = cur.get_ref().len() - cur.position() as usize;
    if len > remaining {
        return Err(Error::format("string runs past end of container"));
    }
    let mut buf = vec![0u8; len];
    cur.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::format(format!("invalid utf-8: {e}")))
}

pub struct RecordReader<'a> {
    records: &'a [Record],
    pos: usize,
}

impl<'a> RecordReader<'a> {
    pub fn next(&mut self, name: &str, dims: &[usize]) -> Result<Tensor> {
        let r = self
            .records
            .get(self.pos)
            .ok_or_else(|| Error::format(format!("record {name} missing")))?;
        if r.name != name {
            return Err(Error::format(format!("expected record {name}, found {}", r.name)));
        }
        if r.dims != dims {
            return Err(Error::format(format!(
                "record {name} has dims {:?}, expected {:?}",
                r.dims, dims
            )));
        }
        self.pos += 1;
        r.to_tensor()
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.records.len() {
            return Err(Error::format(format!(
                "{} unexpected trailing records",
                self.records.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut c = Container::new(ContentKind::Encoder);
        c.header = vec![1, 2, u64::MAX];
        c.strings = vec!["alpha".into(), "ß".into()];
        c.push_tensor("w", &Tensor::matrix(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap());
        c.push_tensor("s", &Tensor::scalar(7.0));
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.records[0].data[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn rejects_garbage() {
        assert!(Container::from_bytes(b"DRAMA2\0").is_err());
        let c = Container::new(ContentKind::Gate);
        let mut bytes = c.to_bytes().unwrap();
        bytes.push(0);
        assert!(Container::from_bytes(&bytes).is_err());
        bytes.truncate(9);
        assert!(Container::from_bytes(&bytes).is_err());
    }
}
