//! `FPDS1` sample files: magic, `u32` dim, `u64` rows, `dim` column names
//! (`u16` length + UTF-8), row-major `f64` payload, SHA-256.

use std::path::Path;

use super::bytes::{put_f64s, put_str, put_u32, put_u64, seal, Reader};
use crate::error::Result;
use crate::nd::Tensor;
use crate::samples::SampleSet;

pub const DATASET_MAGIC: &[u8; 5] = b"FPDS1";

pub fn write_dataset(set: &SampleSet) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(64 + set.points().len() * 8);
    buf.extend_from_slice(DATASET_MAGIC);
    put_u32(&mut buf, set.dim() as u32);
    put_u64(&mut buf, set.len() as u64);
    for c in set.columns() {
        put_str(&mut buf, c)?;
    }
    put_f64s(&mut buf, set.points().data());
    Ok(seal(buf))
}

/// Parses dataset bytes; `path` only labels errors.
pub fn read_dataset(path: &Path, data: &[u8]) -> Result<SampleSet> {
    let mut r = Reader::open(path, data, DATASET_MAGIC)?;
    let dim = r.u32("dimension")? as usize;
    let n = r.u64("row count")?;
    if dim == 0 {
        return Err(r.malformed("zero dimension"));
    }
    let mut columns = Vec::with_capacity(dim.min(r.remaining()));
    for _ in 0..dim {
        columns.push(r.string("column name")?);
    }
    let count = n
        .checked_mul(dim as u64)
        .ok_or_else(|| r.malformed("row count overflows"))?;
    let payload = r.f64s(count, "payload")?;
    r.finish()?;
    Reader::verify_digest(path, data)?;
    let points = Tensor::new(vec![n as usize, dim], payload).map_err(|e| r.malformed(e.to_string()))?;
    SampleSet::new(columns, points).map_err(|e| r.malformed(e.to_string()))
}

pub fn save_dataset(path: &Path, set: &SampleSet) -> Result<()> {
    super::write_atomic(path, &write_dataset(set)?)
}

pub fn load_dataset(path: &Path) -> Result<SampleSet> {
    read_dataset(path, &super::read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn sample() -> SampleSet {
        SampleSet::from_flat(2, vec![0.5, -1.25, 3.0, f64::MIN_POSITIVE, -0.0, 1e300]).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        let bytes = write_dataset(&s).unwrap();
        let back = read_dataset(Path::new("mem"), &bytes).unwrap();
        assert_eq!(back.columns(), s.columns());
        let a: Vec<u64> = s.points().data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.points().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(write_dataset(&back).unwrap(), bytes);
    }

    #[test]
    fn distinct_corruption_errors() {
        let bytes = write_dataset(&sample()).unwrap();
        let p = Path::new("mem");
        let mut flipped = bytes.clone();
        let payload_start = bytes.len() - 32 - 8;
        flipped[payload_start] ^= 1;
        assert!(matches!(read_dataset(p, &flipped), Err(Error::DigestMismatch { .. })));
        let mut magic = bytes.clone();
        magic[4] = b'2';
        assert!(matches!(read_dataset(p, &magic), Err(Error::BadMagic { .. })));
        assert!(matches!(read_dataset(p, &bytes[..bytes.len() - 40]), Err(Error::Truncated { .. })));
        assert!(matches!(read_dataset(p, &bytes[..3]), Err(Error::Truncated { .. })));
    }
}
