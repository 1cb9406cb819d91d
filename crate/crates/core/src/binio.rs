//! Little-endian primitives for the dataset and checkpoint files.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};

pub(crate) fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

pub(crate) fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

pub(crate) fn put_len(w: &mut impl Write, v: usize) -> Result<()> {
    put_u64(w, v as u64)
}

pub(crate) fn put_f64s(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(vs.len() * 8);
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(w.write_all(&buf)?)
}

pub(crate) fn put_str(w: &mut impl Write, s: &str) -> Result<()> {
    put_len(w, s.len())?;
    Ok(w.write_all(s.as_bytes())?)
}

/// Reader that reports a short read as a truncated file.
pub(crate) struct Input<R> {
    inner: R,
    what: &'static str,
}

impl<R: Read> Input<R> {
    pub(crate) fn new(inner: R, what: &'static str) -> Self {
        Self { inner, what }
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => Error::format(format!("{} file is truncated", self.what)),
            _ => Error::Io(e),
        })
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let mut buf = [0u8; 4];
        self.fill(&mut buf)?;
        if &buf != expected {
            return Err(Error::format(format!(
                "not a {} file: expected magic {:?}, found {:?}",
                self.what,
                String::from_utf8_lossy(expected),
                String::from_utf8_lossy(&buf)
            )));
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.fill(&mut buf)?;
        Ok(u32::from_le_bytes(buf))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let mut buf = [0u8; 8];
        self.fill(&mut buf)?;
        Ok(u64::from_le_bytes(buf))
    }

    /// A length field, rejected if larger than `limit`.
    pub(crate) fn len(&mut self, limit: u64, field: &str) -> Result<usize> {
        let v = self.u64()?;
        if v > limit {
            return Err(Error::format(format!("{} {field} {v} is implausibly large", self.what)));
        }
        Ok(v as usize)
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut buf = vec![0u8; n * 8];
        self.fill(&mut buf)?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    pub(crate) fn string(&mut self, limit: u64) -> Result<String> {
        let n = self.len(limit, "string length")?;
        let mut buf = vec![0u8; n];
        self.fill(&mut buf)?;
        String::from_utf8(buf).map_err(|_| Error::format(format!("{} string is not UTF-8", self.what)))
    }

    /// True if no bytes remain.
    pub(crate) fn at_end(&mut self) -> Result<bool> {
        let mut buf = [0u8; 1];
        Ok(self.inner.read(&mut buf)? == 0)
    }
}
