//! Little-endian helpers shared by the proxy, model and embedding file formats.
//!
//! Readers work over a fully loaded buffer so truncation is detected before any
//! value is handed back, and every error carries the byte offset it refers to.

use crate::error::{Error, Result};

#[derive(Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn magic(&mut self, magic: &[u8; 4]) {
        self.buf.extend_from_slice(magic);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let out = &self.buf[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::format(
                self.offset(),
                format!(
                    "truncated file: need {len} bytes for {what}, {} remain",
                    self.buf.len() - self.pos
                ),
            )),
        }
    }

    pub fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let at = self.offset();
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(Error::format(
                at,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        Ok(())
    }

    pub fn expect_version(&mut self, version: u32) -> Result<()> {
        let at = self.offset();
        let got = self.u32("version")?;
        if got != version {
            return Err(Error::format(at, format!("unsupported version {got}, expected {version}")));
        }
        Ok(())
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        let at = self.offset();
        let b = self.take(8, what)?;
        let v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(Error::format(at, format!("non-finite value in {what}")));
        }
        Ok(v)
    }

    /// Reads `count` finite f64 values after checking the whole span is present.
    pub fn f64_vec(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = count
            .checked_mul(8)
            .ok_or_else(|| Error::format(self.offset(), format!("{what} length overflows")))?;
        let start = self.offset();
        let raw = self.take(bytes, what)?;
        raw.chunks_exact(8)
            .enumerate()
            .map(|(i, c)| {
                let v = f64::from_le_bytes(c.try_into().expect("8 bytes"));
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::format(start + 8 * i as u64, format!("non-finite value in {what}")))
                }
            })
            .collect()
    }

    pub fn u32_vec(&mut self, count: usize, what: &str) -> Result<Vec<u32>> {
        let bytes = count
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.offset(), format!("{what} length overflows")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(Error::format(
                self.offset(),
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ))
        }
    }
}
