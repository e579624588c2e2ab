//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"IEECKPT1"  u64 header_len  header (UTF-8 JSON)
//! repeated:    u32 name_len  name (UTF-8)  u64 byte_len  bytes
//! ```
//!
//! Parameter blobs are raw `f32` values; masks are bit-packed, LSB first.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::model::Model;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"IEECKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub bytes: Vec<u8>,
}

impl Record {
    pub fn floats(name: impl Into<String>, values: &[f32]) -> Self {
        Self {
            name: name.into(),
            bytes: f32_to_bytes(values),
        }
    }

    pub fn bits(name: impl Into<String>, bits: &[bool]) -> Self {
        Self {
            name: name.into(),
            bytes: pack_bits(bits),
        }
    }
}

pub fn f32_to_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn bytes_to_f32(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Checkpoint(format!(
            "float blob of {} bytes is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], len: usize) -> Result<Vec<bool>> {
    if bytes.len() != len.div_ceil(8) {
        return Err(Error::Checkpoint(format!(
            "bit blob of {} bytes cannot hold exactly {len} bits",
            bytes.len()
        )));
    }
    Ok((0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
}

pub fn write<H: Serialize>(path: &Path, header: &H, records: &[Record]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let header = serde_json::to_vec(header)?;
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for r in records {
        buf.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(r.name.as_bytes());
        buf.extend_from_slice(&(r.bytes.len() as u64).to_le_bytes());
        buf.extend_from_slice(&r.bytes);
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read<H: DeserializeOwned>(path: &Path) -> Result<(H, BTreeMap<String, Vec<u8>>)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let header_len = cur.u64()? as usize;
    let header = serde_json::from_slice(cur.take(header_len)?)?;
    let mut records = BTreeMap::new();
    while cur.pos < buf.len() {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
        let len = cur.u64()? as usize;
        records.insert(name, cur.take(len)?.to_vec());
    }
    Ok((header, records))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut a = [0u8; 8];
        a.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(a))
    }
}

/// Parameter values, masks, freeze flags and batch-norm statistics.
pub fn model_records(model: &Model) -> Vec<Record> {
    let mut out = Vec::new();
    for (li, layer) in model.layers().iter().enumerate() {
        for p in &layer.params {
            out.push(Record::floats(format!("param/{}", p.name), p.value.data()));
            if let Some(mask) = &p.mask {
                out.push(Record::bits(format!("mask/{}", p.name), mask));
            }
            if let Some(freeze) = &p.freeze {
                out.push(Record::bits(format!("freeze/{}", p.name), freeze));
            }
            if !p.requires_grad {
                out.push(Record {
                    name: format!("frozen/{}", p.name),
                    bytes: Vec::new(),
                });
            }
        }
        if !layer.running_mean.is_empty() {
            out.push(Record::floats(format!("bn_mean/{li}"), &layer.running_mean));
            out.push(Record::floats(format!("bn_var/{li}"), &layer.running_var));
        }
    }
    out
}

/// Inverse of [`model_records`] for a model built from the same spec.
pub fn restore_model(model: &mut Model, records: &BTreeMap<String, Vec<u8>>) -> Result<()> {
    let missing = |name: &str| Error::Checkpoint(format!("missing record `{name}`"));
    for (li, layer) in model.layers_mut().iter_mut().enumerate() {
        for p in &mut layer.params {
            let key = format!("param/{}", p.name);
            let values = bytes_to_f32(records.get(&key).ok_or_else(|| missing(&key))?)?;
            if values.len() != p.value.numel() {
                return Err(Error::Checkpoint(format!("`{key}` has wrong length")));
            }
            p.value.data_mut().copy_from_slice(&values);
            p.value.clear_grad();
            let n = p.value.numel();
            p.mask = records
                .get(&format!("mask/{}", p.name))
                .map(|b| unpack_bits(b, n))
                .transpose()?;
            p.freeze = records
                .get(&format!("freeze/{}", p.name))
                .map(|b| unpack_bits(b, n))
                .transpose()?;
            p.requires_grad = !records.contains_key(&format!("frozen/{}", p.name));
        }
        if !layer.running_mean.is_empty() {
            let mk = format!("bn_mean/{li}");
            let vk = format!("bn_var/{li}");
            layer.running_mean = bytes_to_f32(records.get(&mk).ok_or_else(|| missing(&mk))?)?;
            layer.running_var = bytes_to_f32(records.get(&vk).ok_or_else(|| missing(&vk))?)?;
        }
        layer.clear_cache();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bit_packing_round_trips(bits in proptest::collection::vec(any::<bool>(), 0..200)) {
            let packed = pack_bits(&bits);
            prop_assert_eq!(unpack_bits(&packed, bits.len()).unwrap(), bits);
        }
    }

    #[test]
    fn container_round_trips_and_rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let recs = vec![Record::floats("a", &[1.0, -2.5]), Record::bits("m", &[true, false, true])];
        write(&path, &serde_json::json!({"step": 3}), &recs).unwrap();
        let (h, r): (serde_json::Value, _) = read(&path).unwrap();
        assert_eq!(h["step"], 3);
        assert_eq!(bytes_to_f32(&r["a"]).unwrap(), vec![1.0, -2.5]);
        assert_eq!(unpack_bits(&r["m"], 3).unwrap(), vec![true, false, true]);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(read::<serde_json::Value>(&path).is_err());
    }
}
