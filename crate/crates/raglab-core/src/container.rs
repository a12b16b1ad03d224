//! Shared framing for the project's binary files: four magic bytes, a u32
//! format version, little-endian payload, and a trailing FNV-1a 64 checksum
//! over everything before it. Readers verify magic, version, and checksum
//! before handing out a single payload byte.

use crate::error::{Error, Result};
use crate::hash::fnv1a64;
use std::path::Path;

pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new(magic: &'static str, version: u32) -> Self {
        debug_assert_eq!(magic.len(), 4);
        let mut buf = Vec::new();
        buf.extend_from_slice(magic.as_bytes());
        buf.extend_from_slice(&version.to_le_bytes());
        ByteWriter { buf }
    }

    pub fn put_u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn put_u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    /// Length-prefixed byte blob.
    pub fn put_blob(&mut self, bytes: &[u8]) {
        self.put_u64(bytes.len() as u64);
        self.buf.extend_from_slice(bytes);
    }

    pub fn put_f64s(&mut self, vals: &[f64]) {
        for &v in vals {
            self.put_f64(v);
        }
    }

    pub fn put_f32s(&mut self, vals: &[f32]) {
        for &v in vals {
            self.put_f32(v);
        }
    }

    /// Current length, checksum excluded.
    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    /// Append the checksum and return the finished file image.
    pub fn finish(mut self) -> Vec<u8> {
        let sum = fnv1a64(&self.buf);
        self.buf.extend_from_slice(&sum.to_le_bytes());
        self.buf
    }

    pub fn write_file(self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.finish())?)
    }
}

pub struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
    end: usize,
}

impl<'a> ByteReader<'a> {
    /// Validate framing and position the cursor after the version field.
    pub fn open(data: &'a [u8], magic: &'static str, version: u32) -> Result<Self> {
        debug_assert_eq!(magic.len(), 4);
        if data.len() < 4 + 4 + 8 {
            return Err(Error::Truncated);
        }
        if &data[..4] != magic.as_bytes() {
            return Err(Error::BadMagic { expected: magic });
        }
        let body = &data[..data.len() - 8];
        let stored = u64::from_le_bytes(data[data.len() - 8..].try_into().unwrap());
        if fnv1a64(body) != stored {
            return Err(Error::Checksum);
        }
        let found = u32::from_le_bytes(data[4..8].try_into().unwrap());
        if found != version {
            return Err(Error::Version { found, expected: version });
        }
        Ok(ByteReader { data, pos: 8, end: data.len() - 8 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.end {
            return Err(Error::Truncated);
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn blob(&mut self) -> Result<&'a [u8]> {
        let len = self.u64()? as usize;
        self.take(len)
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    /// Fail if payload bytes remain unread.
    pub fn expect_end(&self) -> Result<()> {
        if self.pos != self.end {
            return Err(Error::Format(format!("{} unread payload bytes", self.end - self.pos)));
        }
        Ok(())
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    Ok(std::fs::read(path)?)
}
