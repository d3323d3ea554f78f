use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub(crate) const DIGEST_LEN: usize = 32;

/// Appends the trailing digest.
pub(crate) fn seal(mut buf: Vec<u8>) -> Vec<u8> {
    let d = Sha256::digest(&buf);
    buf.extend_from_slice(&d);
    buf
}

/// Bounds-checked cursor over a file body. Every read failure is a
/// `Truncated` error naming the field.
pub(crate) struct Reader<'a> {
    path: PathBuf,
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks the magic and the trailing digest and returns a reader over
    /// the bytes between them.
    pub fn open(path: &Path, data: &'a [u8], magic: &[u8]) -> Result<Self> {
        if data.len() < magic.len() || &data[..magic.len()] != magic {
            if data.len() < magic.len() && magic.starts_with(data) {
                return Err(Error::Truncated {
                    path: path.into(),
                    detail: "file ends inside the magic".into(),
                });
            }
            return Err(Error::BadMagic {
                path: path.into(),
                expected: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        if data.len() < magic.len() + DIGEST_LEN {
            return Err(Error::Truncated {
                path: path.into(),
                detail: "file too short for its digest".into(),
            });
        }
        Ok(Reader {
            path: path.into(),
            data: &data[..data.len() - DIGEST_LEN],
            pos: magic.len(),
        })
    }

    /// Compares the trailing digest with the body.
    pub fn verify_digest(path: &Path, data: &[u8]) -> Result<()> {
        let (body, tail) = data.split_at(data.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != tail {
            return Err(Error::DigestMismatch { path: path.into() });
        }
        Ok(())
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                path: self.path.clone(),
                detail: format!("{what}: need {n} bytes, {} left", self.remaining()),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u16(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.malformed(format!("{what} is not UTF-8")))
    }

    /// `n` floats, checking the length before allocating.
    pub fn f64s(&mut self, n: u64, what: &str) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .filter(|&b| b <= self.remaining() as u64)
            .ok_or_else(|| Error::Truncated {
                path: self.path.clone(),
                detail: format!("{what}: {n} values do not fit in {} bytes", self.remaining()),
            })?;
        let raw = self.take(bytes as usize, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.malformed(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }

    pub fn malformed(&self, detail: impl Into<String>) -> Error {
        Error::Malformed {
            path: self.path.clone(),
            detail: detail.into(),
        }
    }
}

pub(crate) fn put_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    let n = u16::try_from(s.len()).map_err(|_| Error::Config(format!("name too long: {s}")))?;
    put_u16(buf, n);
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

pub(crate) fn put_f64s(buf: &mut Vec<u8>, v: &[f64]) {
    buf.reserve(v.len() * 8);
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}
