//! Named-tensor archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DCAT" | u32 version = 1 | u32 entry count
//! per entry: u16 name length | UTF-8 name | u8 dtype (0 f32, 1 f64, 2 u8)
//!            | u8 rank | u64 extents[rank] | raw values
//! ```

use std::io::{Read, Write};

use crate::error::{AppError, AppResult};

pub const MAGIC: &[u8; 4] = b"DCAT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum EntryData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl EntryData {
    pub fn code(&self) -> u8 {
        match self {
            EntryData::F32(_) => 0,
            EntryData::F64(_) => 1,
            EntryData::U8(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            EntryData::F32(v) => v.len(),
            EntryData::F64(v) => v.len(),
            EntryData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: EntryData,
}

impl Entry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: EntryData) -> AppResult<Self> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(AppError::data(format!(
                "archive entry '{name}': shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        if name.len() > u16::MAX as usize || shape.len() > u8::MAX as usize {
            return Err(AppError::data(format!("archive entry '{name}' has an oversized name or rank")));
        }
        Ok(Self { name, shape, data })
    }
}

pub fn write_archive(out: &mut impl Write, entries: &[Entry]) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(entries.len() as u32).to_le_bytes())?;
    for e in entries {
        out.write_all(&(e.name.len() as u16).to_le_bytes())?;
        out.write_all(e.name.as_bytes())?;
        out.write_all(&[e.data.code(), e.shape.len() as u8])?;
        for &d in &e.shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        match &e.data {
            EntryData::F32(v) => v.iter().try_for_each(|x| out.write_all(&x.to_le_bytes()))?,
            EntryData::F64(v) => v.iter().try_for_each(|x| out.write_all(&x.to_le_bytes()))?,
            EntryData::U8(v) => out.write_all(v)?,
        }
    }
    Ok(())
}

pub fn to_bytes(entries: &[Entry]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_archive(&mut buf, entries).expect("writing to a Vec cannot fail");
    buf
}

fn take<'a>(buf: &mut &'a [u8], n: usize, what: &str) -> AppResult<&'a [u8]> {
    if buf.len() < n {
        return Err(AppError::data(format!("archive truncated while reading {what}")));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

fn u16_at(buf: &mut &[u8]) -> AppResult<u16> {
    Ok(u16::from_le_bytes(take(buf, 2, "u16")?.try_into().unwrap()))
}

fn u32_at(buf: &mut &[u8]) -> AppResult<u32> {
    Ok(u32::from_le_bytes(take(buf, 4, "u32")?.try_into().unwrap()))
}

fn u64_at(buf: &mut &[u8]) -> AppResult<u64> {
    Ok(u64::from_le_bytes(take(buf, 8, "u64")?.try_into().unwrap()))
}

pub fn from_bytes(bytes: &[u8]) -> AppResult<Vec<Entry>> {
    let mut buf = bytes;
    if take(&mut buf, 4, "magic")? != MAGIC {
        return Err(AppError::data("not a tensor archive (bad magic)"));
    }
    let version = u32_at(&mut buf)?;
    if version != VERSION {
        return Err(AppError::data(format!("unsupported archive version {version}")));
    }
    let count = u32_at(&mut buf)? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = u16_at(&mut buf)? as usize;
        let name = std::str::from_utf8(take(&mut buf, name_len, "entry name")?)
            .map_err(|_| AppError::data("archive entry name is not UTF-8"))?
            .to_string();
        let head = take(&mut buf, 2, "entry header")?;
        let (code, rank) = (head[0], head[1] as usize);
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64_at(&mut buf)? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| AppError::data(format!("archive entry '{name}' has an overflowing shape")))?;
        let data = match code {
            0 => EntryData::F32(
                take(&mut buf, numel.saturating_mul(4), &name)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            1 => EntryData::F64(
                take(&mut buf, numel.saturating_mul(8), &name)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            2 => EntryData::U8(take(&mut buf, numel, &name)?.to_vec()),
            other => return Err(AppError::data(format!("archive entry '{name}' has unknown dtype {other}"))),
        };
        entries.push(Entry { name, shape, data });
    }
    if !buf.is_empty() {
        return Err(AppError::data(format!("{} trailing bytes after archive entries", buf.len())));
    }
    Ok(entries)
}

pub fn read_archive(input: &mut impl Read) -> AppResult<Vec<Entry>> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| AppError::data(format!("reading archive: {e}")))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes_are_exact() {
        let e = Entry::new("w", vec![2], EntryData::F32(vec![1.0, -2.0])).unwrap();
        let b = to_bytes(&[e]);
        let mut expect = b"DCAT".to_vec();
        expect.extend_from_slice(&[1, 0, 0, 0, 1, 0, 0, 0]);
        expect.extend_from_slice(&[1, 0, b'w', 0, 1]);
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(b, expect);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let e = Entry::new("x", vec![1, 3], EntryData::U8(vec![1, 2, 3])).unwrap();
        let b = to_bytes(&[e]);
        assert!(from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
        assert!(Entry::new("y", vec![2, 2], EntryData::F64(vec![0.0])).is_err());
    }
}
