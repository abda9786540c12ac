// SPDX-License-Identifier: Apache-2.0

//! Little-endian primitives shared by the `.muit`, `.musm` and `.musa` containers.
//!
//! Every container is `magic (4 bytes) | u32 version | payload | u64 checksum`,
//! where the checksum is FNV-1a 64 over the payload bytes only.

use crate::error::FormatError;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Append-only payload builder.
#[derive(Debug)]
pub struct Writer {
    buf: Vec<u8>,
    payload_start: usize,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut buf = Vec::with_capacity(1 << 12);
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&version.to_le_bytes());
        let payload_start = buf.len();
        Self { buf, payload_start }
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

    pub fn len_prefix(&mut self, n: usize) {
        self.u64(n as u64);
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    /// Length-prefixed f32 vector.
    pub fn f32s(&mut self, v: &[f32]) {
        self.len_prefix(v.len());
        for &x in v {
            self.f32(x);
        }
    }

    pub fn u32s(&mut self, v: &[u32]) {
        self.len_prefix(v.len());
        for &x in v {
            self.u32(x);
        }
    }

    /// Payload bytes written so far (excluding the header).
    pub fn payload(&self) -> &[u8] {
        &self.buf[self.payload_start..]
    }

    pub fn finish(mut self) -> Vec<u8> {
        let sum = fnv1a64(&self.buf[self.payload_start..]);
        self.buf.extend_from_slice(&sum.to_le_bytes());
        self.buf
    }
}

/// Bounds-checked cursor. Running out of bytes is always [`FormatError::Truncated`].
#[derive(Debug)]
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    payload_start: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic and version and positions the cursor at the payload.
    pub fn open(bytes: &'a [u8], magic: &[u8; 4], version: u32) -> Result<Self, FormatError> {
        if bytes.len() < 4 {
            return Err(FormatError::Truncated { context: "magic" });
        }
        let found: [u8; 4] = bytes[..4].try_into().expect("length checked");
        if &found != magic {
            return Err(FormatError::BadMagic {
                expected: *magic,
                found,
            });
        }
        let mut r = Self {
            bytes,
            pos: 4,
            payload_start: 8,
        };
        let v = r.u32("version")?;
        if v != version {
            return Err(FormatError::UnsupportedVersion {
                expected: version,
                found: v,
            });
        }
        Ok(r)
    }

    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8], FormatError> {
        let end = self
            .pos
            .checked_add(n)
            .ok_or(FormatError::Truncated { context })?;
        if end > self.bytes.len() {
            return Err(FormatError::Truncated { context });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self, context: &'static str) -> Result<u8, FormatError> {
        Ok(self.take(1, context)?[0])
    }

    pub fn u32(&mut self, context: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(
            self.take(4, context)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn u64(&mut self, context: &'static str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(
            self.take(8, context)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn f32(&mut self, context: &'static str) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(
            self.take(4, context)?.try_into().expect("4 bytes"),
        ))
    }

    /// Reads a u64 length prefix, rejecting lengths that cannot fit in the
    /// remaining bytes at `elem_size` bytes per element.
    pub fn len_prefix(&mut self, elem_size: usize, context: &'static str) -> Result<usize, FormatError> {
        let n = self.u64(context)?;
        let remaining = (self.bytes.len() - self.pos) as u64;
        if elem_size > 0 && n.saturating_mul(elem_size as u64) > remaining {
            return Err(FormatError::Truncated { context });
        }
        usize::try_from(n).map_err(|_| FormatError::Malformed(format!("{context}: length overflow")))
    }

    pub fn str(&mut self, context: &'static str) -> Result<String, FormatError> {
        let n = self.u32(context)? as usize;
        let raw = self.take(n, context)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| FormatError::Malformed(format!("{context}: invalid UTF-8")))
    }

    pub fn raw(&mut self, n: usize, context: &'static str) -> Result<&'a [u8], FormatError> {
        self.take(n, context)
    }

    pub fn f32s(&mut self, context: &'static str) -> Result<Vec<f32>, FormatError> {
        let n = self.len_prefix(4, context)?;
        (0..n).map(|_| self.f32(context)).collect()
    }

    pub fn u32s(&mut self, context: &'static str) -> Result<Vec<u32>, FormatError> {
        let n = self.len_prefix(4, context)?;
        (0..n).map(|_| self.u32(context)).collect()
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Reads the trailing checksum, requires end-of-file, and verifies it.
    pub fn finish(mut self) -> Result<(), FormatError> {
        let payload_end = self.pos;
        let stored = self.u64("checksum")?;
        if self.pos != self.bytes.len() {
            return Err(FormatError::Malformed(format!(
                "{} trailing bytes after checksum",
                self.bytes.len() - self.pos
            )));
        }
        let computed = fnv1a64(&self.bytes[self.payload_start..payload_end]);
        if stored != computed {
            return Err(FormatError::ChecksumMismatch { stored, computed });
        }
        Ok(())
    }
}
