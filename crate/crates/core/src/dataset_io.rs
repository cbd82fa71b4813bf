//! Binary dataset files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MMDS" | u32 version | u32 M | M × u32 dim | u64 rows | u32 C
//! | M blocks of rows × dim f64 | rows × u16 labels | u64 CRC-64/XZ
//! ```

use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use crate::data::PairedDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"MMDS";
pub const DATASET_VERSION: u32 = 1;

pub(crate) const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn finished(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Splits off and verifies the trailing checksum; returns the payload.
pub(crate) fn verified_payload<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<&'a [u8]> {
    if bytes.len() < 12 {
        return Err(Error::Format(format!("file too short ({} bytes)", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let actual = CRC64.checksum(body);
    if stored != actual {
        return Err(Error::Format(format!(
            "checksum mismatch: stored {stored:016x}, computed {actual:016x}"
        )));
    }
    if &body[..4] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&body[..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(body)
}

pub fn dataset_to_bytes(ds: &PairedDataset) -> Result<Vec<u8>> {
    if ds.n_classes > u16::MAX as usize + 1 {
        return Err(Error::Format("too many classes for u16 labels".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.xs.len() as u32).to_le_bytes());
    for d in ds.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    out.extend_from_slice(&(ds.n_classes as u32).to_le_bytes());
    for x in &ds.xs {
        for v in x.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for l in &ds.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    let crc = CRC64.checksum(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<PairedDataset> {
    let body = verified_payload(bytes, DATASET_MAGIC)?;
    let mut r = Reader::new(body);
    r.take(4)?;
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {version}, this build reads version {DATASET_VERSION}"
        )));
    }
    let m = r.u32()? as usize;
    let dims = (0..m).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let rows = r.u64()? as usize;
    let n_classes = r.u32()? as usize;
    let mut xs = Vec::with_capacity(m);
    for &d in &dims {
        xs.push(Tensor::new(vec![rows, d], r.f64s(rows * d)?)?);
    }
    let labels = (0..rows).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
    if !r.finished() {
        return Err(Error::Format("trailing bytes after label block".into()));
    }
    PairedDataset::new(n_classes, xs, labels)
}

pub fn save_dataset(ds: &PairedDataset, path: &Path) -> Result<()> {
    fs::write(path, dataset_to_bytes(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<PairedDataset> {
    dataset_from_bytes(&fs::read(path)?)
}
