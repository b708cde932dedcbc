//! Little-endian primitives shared by the checkpoint and dataset formats.

use crate::error::FormatError;

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub fn bytes(&mut self, n: usize, ctx: &'static str) -> Result<&'a [u8], FormatError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(FormatError::Truncated(ctx))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn magic(&mut self, expected: [u8; 4]) -> Result<(), FormatError> {
        let found: [u8; 4] = self.bytes(4, "magic")?.try_into().expect("4 bytes");
        if found != expected {
            return Err(FormatError::BadMagic { expected, found });
        }
        Ok(())
    }

    pub fn u32(&mut self, ctx: &'static str) -> Result<u32, FormatError> {
        let b = self.bytes(4, ctx)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn f32s(&mut self, n: usize, ctx: &'static str) -> Result<Vec<f64>, FormatError> {
        let len = n.checked_mul(4).ok_or(FormatError::Truncated(ctx))?;
        let b = self.bytes(len, ctx)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    pub fn finish(&self) -> Result<(), FormatError> {
        if self.pos != self.buf.len() {
            return Err(FormatError::Malformed(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub(crate) fn to_u32(v: usize, what: &str) -> Result<u32, FormatError> {
    u32::try_from(v).map_err(|_| FormatError::Malformed(format!("{what} {v} exceeds u32")))
}
