//! Little-endian binary helpers shared by the on-disk formats.

use crate::error::{Error, Result};

pub(crate) trait WriteLe {
    fn put_u8(&mut self, v: u8);
    fn put_u32(&mut self, v: u32);
    fn put_u64(&mut self, v: u64);
    fn put_f64(&mut self, v: f64);
    fn put_str(&mut self, s: &str);
}

impl WriteLe for Vec<u8> {
    fn put_u8(&mut self, v: u8) {
        self.push(v);
    }
    fn put_u32(&mut self, v: u32) {
        self.extend_from_slice(&v.to_le_bytes());
    }
    fn put_u64(&mut self, v: u64) {
        self.extend_from_slice(&v.to_le_bytes());
    }
    fn put_f64(&mut self, v: f64) {
        self.extend_from_slice(&v.to_le_bytes());
    }
    fn put_str(&mut self, s: &str) {
        self.put_u32(s.len() as u32);
        self.extend_from_slice(s.as_bytes());
    }
}

/// Cursor over a byte buffer; every failure carries the byte offset.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn error(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            message: message.into(),
        }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.error(format!(
                "truncated {what}: need {n} bytes, {} available",
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, magic: &[u8], format: &str) -> Result<()> {
        let found = self.take(magic.len(), "magic")?;
        if found != magic {
            return Err(Error::UnsupportedFormat(format!(
                "not a {format} file (bad magic {found:?})"
            )));
        }
        Ok(())
    }

    pub fn version(&mut self, expected: u32) -> Result<()> {
        let found = self.u32("version")?;
        if found != expected {
            return Err(Error::Version { found, expected });
        }
        Ok(())
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    /// A count that must fit in the remaining bytes at `min_bytes_each`.
    /// A u64 element count, rejected if the remaining bytes cannot hold
    /// `n * min_bytes_each`.
    pub fn count(&mut self, what: &str, min_bytes_each: usize) -> Result<usize> {
        let at = self.pos;
        let n = self.u64(what)?;
        self.check_count(at, n, what, min_bytes_each)
    }

    /// Like [`Reader::count`] for a u32 field.
    pub fn count_u32(&mut self, what: &str, min_bytes_each: usize) -> Result<usize> {
        let at = self.pos;
        let n = self.u32(what)? as u64;
        self.check_count(at, n, what, min_bytes_each)
    }

    fn check_count(&self, at: usize, n: u64, what: &str, min_bytes_each: usize) -> Result<usize> {
        if n.saturating_mul(min_bytes_each as u64) > self.remaining() as u64 {
            return Err(Error::Parse {
                offset: at,
                message: format!("{what} {n} exceeds the remaining {} bytes", self.remaining()),
            });
        }
        Ok(n as usize)
    }

    pub fn string(&mut self, what: &str) -> Result<String> {
        let at = self.pos;
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Parse {
            offset: at,
            message: format!("{what} is not valid UTF-8"),
        })
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.error(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}
