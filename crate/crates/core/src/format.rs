//! Binary containers: CPT1 tensors, named-tensor files and CPDS datasets.
//!
//! All integers are `u32` little-endian; tensor payloads are row-major
//! `f32` little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::toy::dataset::{Direction, ToyDataset, ToySample, SAMPLE_PIXELS};

pub const TENSOR_MAGIC: &[u8; 4] = b"CPT1";
pub const DATASET_MAGIC: &[u8; 4] = b"CPDS";

/// Largest rank accepted when decoding, as a guard against corrupt headers.
const MAX_RANK: usize = 16;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Cursor over an in-memory buffer with format-tagged errors.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], format: &'static str) -> Self {
        Reader { buf, pos: 0, format }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::format(self.format, format!("truncated at byte {}", self.pos)));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::format(self.format, "bad magic bytes"));
        }
        Ok(())
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) -> Result<()> {
    out.extend_from_slice(TENSOR_MAGIC);
    put_u32(out, t.rank())?;
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    out.reserve(t.numel() * 4);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn decode_tensor_from(r: &mut Reader<'_>) -> Result<Tensor> {
    r.magic(TENSOR_MAGIC)?;
    let rank = r.u32()?;
    if rank > MAX_RANK {
        return Err(Error::format("CPT1", format!("rank {rank} is implausible")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel = 1usize;
    for _ in 0..rank {
        let d = r.u32()?;
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| Error::format("CPT1", "extent product overflows"))?;
        shape.push(d);
    }
    let bytes = r.take(
        numel
            .checked_mul(4)
            .ok_or_else(|| Error::format("CPT1", "payload too large"))?,
    )?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::format("CPT1", e.to_string()))
}

/// Decodes exactly one CPT1 record.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes, "CPT1");
    let t = decode_tensor_from(&mut r)?;
    if !r.done() {
        return Err(Error::format("CPT1", "trailing bytes after tensor"));
    }
    Ok(t)
}

/// Sequence of `u32 name length, UTF-8 name, CPT1 record` entries.
pub fn encode_named(entries: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for (name, t) in entries {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        encode_tensor(t, &mut out)?;
    }
    Ok(out)
}

pub fn decode_named(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader::new(bytes, "CPT1");
    let mut out = Vec::new();
    while !r.done() {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format("CPT1", "tensor name is not UTF-8"))?
            .to_string();
        out.push((name, decode_tensor_from(&mut r)?));
    }
    Ok(out)
}

pub fn write_named(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    write_file(path, &encode_named(entries)?)
}

pub fn read_named(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode_named(&read_file(path)?)
}

pub fn encode_dataset(ds: &ToyDataset) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + (ds.train.len() + ds.val.len()) * (SAMPLE_PIXELS + 1));
    out.extend_from_slice(DATASET_MAGIC);
    put_u32(&mut out, ds.train.len())?;
    put_u32(&mut out, ds.val.len())?;
    for s in ds.train.iter().chain(&ds.val) {
        out.push(s.label.index() as u8);
        out.extend_from_slice(&s.frames);
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<ToyDataset> {
    let mut r = Reader::new(bytes, "CPDS");
    r.magic(DATASET_MAGIC)?;
    let train_n = r.u32()?;
    let val_n = r.u32()?;
    let expected = (train_n as u128 + val_n as u128) * (SAMPLE_PIXELS as u128 + 1) + 12;
    if expected != bytes.len() as u128 {
        return Err(Error::format(
            "CPDS",
            format!(
                "{train_n} + {val_n} samples need {expected} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    let mut read = |n: usize| -> Result<Vec<ToySample>> {
        (0..n)
            .map(|_| {
                let label = r.take(1)?[0] as usize;
                let label = Direction::from_index(label)
                    .map_err(|_| Error::format("CPDS", format!("label byte {label} is not in 0..4")))?;
                let frames = r.take(SAMPLE_PIXELS)?.to_vec();
                if frames.iter().any(|&p| p > 1) {
                    return Err(Error::format("CPDS", "pixel bytes must be 0 or 1"));
                }
                Ok(ToySample { frames, label })
            })
            .collect()
    };
    let train = read(train_n)?;
    let val = read(val_n)?;
    Ok(ToyDataset { train, val, seed: None })
}

pub fn write_dataset(path: &Path, ds: &ToyDataset) -> Result<()> {
    write_file(path, &encode_dataset(ds)?)
}

pub fn read_dataset(path: &Path) -> Result<ToyDataset> {
    decode_dataset(&read_file(path)?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}
