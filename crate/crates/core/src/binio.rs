//! Little-endian helpers shared by the binary snapshot formats.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BinError {
    #[error("unexpected end of data at byte {0}")]
    Truncated(usize),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    Magic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("invalid data at byte {at}: {reason}")]
    Invalid { at: usize, reason: String },
    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
}

#[derive(Debug, Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn with_header(magic: &[u8; 4], version: u32) -> Self {
        let mut w = Self::default();
        w.bytes(magic);
        w.u32(version);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    /// `u32` byte length followed by UTF-8.
    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    pub fn len(&self) -> usize {
        self.buf.len()
    }
    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

#[derive(Debug)]
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    /// Checks magic and version, leaving the cursor after the header.
    pub fn with_header(buf: &'a [u8], magic: &[u8; 4], version: u32) -> Result<Self, BinError> {
        let mut r = Self::new(buf);
        let found: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if &found != magic {
            return Err(BinError::Magic {
                expected: *magic,
                found,
            });
        }
        let v = r.u32()?;
        if v != version {
            return Err(BinError::Version {
                expected: version,
                found: v,
            });
        }
        Ok(r)
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], BinError> {
        if self.remaining() < n {
            return Err(BinError::Truncated(self.buf.len()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, BinError> {
        Ok(self.take(1)?[0])
    }
    pub fn u32(&mut self) -> Result<u32, BinError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    pub fn u64(&mut self) -> Result<u64, BinError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    pub fn f32(&mut self) -> Result<f32, BinError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    pub fn f64(&mut self) -> Result<f64, BinError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    pub fn str(&mut self) -> Result<String, BinError> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|e| BinError::Invalid {
            at,
            reason: e.to_string(),
        })
    }
    pub fn char(&mut self) -> Result<char, BinError> {
        let at = self.pos;
        let v = self.u32()?;
        char::from_u32(v).ok_or(BinError::Invalid {
            at,
            reason: format!("{v:#x} is not a unicode scalar value"),
        })
    }

    /// Length prefix sanity check: a count of `n` items of at least `min_size` bytes
    /// cannot exceed what is left in the buffer.
    pub fn count(&mut self, min_size: usize) -> Result<usize, BinError> {
        let at = self.pos;
        let n = self.u64()? as usize;
        if n.saturating_mul(min_size.max(1)) > self.remaining() {
            return Err(BinError::Truncated(at));
        }
        Ok(n)
    }

    pub fn finish(self) -> Result<(), BinError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(BinError::Trailing(n)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_values_round_trip() {
        let mut w = ByteWriter::with_header(b"TEST", 3);
        w.u32(7);
        w.str("乐");
        w.f64(-0.25);
        let bytes = w.into_bytes();
        let mut r = ByteReader::with_header(&bytes, b"TEST", 3).unwrap();
        assert_eq!(r.u32().unwrap(), 7);
        assert_eq!(r.str().unwrap(), "乐");
        assert_eq!(r.f64().unwrap(), -0.25);
        r.finish().unwrap();
    }

    #[test]
    fn wrong_version_and_truncation() {
        let bytes = ByteWriter::with_header(b"TEST", 2).into_bytes();
        assert!(matches!(
            ByteReader::with_header(&bytes, b"TEST", 1),
            Err(BinError::Version { .. })
        ));
        assert!(matches!(
            ByteReader::with_header(&bytes[..6], b"TEST", 2),
            Err(BinError::Truncated(_))
        ));
    }
}
