//! Little-endian field readers and writers shared by the log, checkpoint,
//! workflow and wire formats.

use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeError(pub String);

impl fmt::Display for DecodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DecodeError {}

pub type DecodeResult<T> = Result<T, DecodeError>;

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.remaining() == 0
    }

    pub fn take(&mut self, n: usize) -> DecodeResult<&'a [u8]> {
        if self.remaining() < n {
            return Err(DecodeError(format!("need {n} bytes at offset {}, have {}", self.pos, self.remaining())));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> DecodeResult<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> DecodeResult<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> DecodeResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> DecodeResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn i64(&mut self) -> DecodeResult<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// u32 length prefix followed by that many bytes.
    pub fn bytes32(&mut self) -> DecodeResult<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    /// u16 length prefix followed by that many bytes.
    pub fn bytes16(&mut self) -> DecodeResult<&'a [u8]> {
        let n = self.u16()? as usize;
        self.take(n)
    }

    pub fn str16(&mut self) -> DecodeResult<&'a str> {
        std::str::from_utf8(self.bytes16()?).map_err(|e| DecodeError(format!("bad utf-8: {e}")))
    }

    pub fn str32(&mut self) -> DecodeResult<&'a str> {
        std::str::from_utf8(self.bytes32()?).map_err(|e| DecodeError(format!("bad utf-8: {e}")))
    }

    pub fn finish(&self) -> DecodeResult<()> {
        if self.is_empty() { Ok(()) } else { Err(DecodeError(format!("{} trailing bytes", self.remaining()))) }
    }
}

pub trait Put {
    fn put_u8(&mut self, v: u8);
    fn put_u16(&mut self, v: u16);
    fn put_u32(&mut self, v: u32);
    fn put_u64(&mut self, v: u64);
    fn put_i64(&mut self, v: i64);
    fn put_bytes32(&mut self, v: &[u8]);
    fn put_bytes16(&mut self, v: &[u8]);
}

impl Put for Vec<u8> {
    fn put_u8(&mut self, v: u8) {
        self.push(v);
    }

    fn put_u16(&mut self, v: u16) {
        self.extend_from_slice(&v.to_le_bytes());
    }

    fn put_u32(&mut self, v: u32) {
        self.extend_from_slice(&v.to_le_bytes());
    }

    fn put_u64(&mut self, v: u64) {
        self.extend_from_slice(&v.to_le_bytes());
    }

    fn put_i64(&mut self, v: i64) {
        self.extend_from_slice(&v.to_le_bytes());
    }

    fn put_bytes32(&mut self, v: &[u8]) {
        self.put_u32(v.len() as u32);
        self.extend_from_slice(v);
    }

    fn put_bytes16(&mut self, v: &[u8]) {
        self.put_u16(v.len() as u16);
        self.extend_from_slice(v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_reads_are_errors() {
        let mut r = Reader::new(&[1, 2, 3]);
        assert!(r.u32().is_err());
        assert_eq!(r.u16().unwrap(), 0x0201);
        assert!(r.finish().is_err());
        assert_eq!(r.u8().unwrap(), 3);
        r.finish().unwrap();
    }

    #[test]
    fn length_prefixed_fields() {
        let mut b = Vec::new();
        b.put_bytes16(b"name");
        b.put_bytes32(b"");
        b.put_i64(-7);
        let mut r = Reader::new(&b);
        assert_eq!(r.str16().unwrap(), "name");
        assert_eq!(r.bytes32().unwrap(), b"");
        assert_eq!(r.i64().unwrap(), -7);
        r.finish().unwrap();
    }
}
