//! The `MTC1` container format.
//!
//! Layout:
//!
//! ```text
//! magic        4 bytes   "MTC1"
//! header_len   u64 LE    length of the header text in bytes
//! header       JSON      canonical: sorted keys, no whitespace
//! padding      0..7      zero bytes so the payload starts 8-byte aligned
//! payload      tensor buffers, f32 little-endian, each at an 8-byte
//!              aligned offset relative to the payload start
//! ```
//!
//! The header maps each tensor name to `{"dtype":"f32","nbytes":..,
//! "offset":..,"shape":[..]}`. Checkpoint metadata, when present, lives
//! under the reserved key `__metadata__` as a string-to-string map.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Checkpoint, Tensor};

pub const CONTAINER_MAGIC: &[u8; 4] = b"MTC1";
pub const METADATA_KEY: &str = "__metadata__";
const ALIGN: usize = 8;
const MAX_ELEMENTS: usize = u32::MAX as usize;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    dtype: String,
    nbytes: u64,
    offset: u64,
    shape: Vec<usize>,
}

#[derive(Serialize)]
#[serde(untagged)]
enum HeaderItem<'a> {
    Meta(&'a BTreeMap<String, String>),
    Tensor(Entry),
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Serializes a checkpoint to its canonical byte representation.
pub fn encode_container(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut header: BTreeMap<&str, HeaderItem> = BTreeMap::new();
    if !ckpt.meta().is_empty() {
        header.insert(METADATA_KEY, HeaderItem::Meta(ckpt.meta()));
    }
    let mut offset = 0usize;
    for (name, tensor) in ckpt.iter() {
        if name == METADATA_KEY {
            return Err(Error::invalid(format!("tensor name '{METADATA_KEY}' is reserved")));
        }
        if tensor.numel() > MAX_ELEMENTS {
            return Err(Error::TooLarge {
                name: name.clone(),
                elements: tensor.numel(),
            });
        }
        if tensor.has_nan() {
            return Err(Error::NanPayload(name.clone()));
        }
        offset = align_up(offset);
        let nbytes = tensor.numel() * 4;
        header.insert(
            name,
            HeaderItem::Tensor(Entry {
                dtype: "f32".into(),
                nbytes: nbytes as u64,
                offset: offset as u64,
                shape: tensor.shape().to_vec(),
            }),
        );
        offset += nbytes;
    }
    let header_text =
        serde_json::to_vec(&header).map_err(|e| Error::Header(e.to_string()))?;

    let payload_start = align_up(4 + 8 + header_text.len());
    let mut out = Vec::with_capacity(payload_start + offset);
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&(header_text.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_text);
    out.resize(payload_start, 0);
    for (_, tensor) in ckpt.iter() {
        out.resize(payload_start + align_up(out.len() - payload_start), 0);
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub(crate) fn check_magic(bytes: &[u8], magic: &[u8; 4]) -> Result<()> {
    if bytes.len() < 4 {
        return Err(Error::Truncated("file shorter than magic".into()));
    }
    if &bytes[..4] != magic {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    Ok(())
}

/// Splits `magic | u64 len | header` and returns the header bytes and the
/// offset just past them.
pub(crate) fn split_header<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<(&'a [u8], usize)> {
    check_magic(bytes, magic)?;
    if bytes.len() < 12 {
        return Err(Error::Truncated("missing header length".into()));
    }
    let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
    let end = 12usize
        .checked_add(usize::try_from(header_len).map_err(|_| Error::Truncated("header length".into()))?)
        .ok_or_else(|| Error::Truncated("header length overflows".into()))?;
    if end > bytes.len() {
        return Err(Error::Truncated(format!(
            "header declares {header_len} bytes but file has {}",
            bytes.len() - 12
        )));
    }
    Ok((&bytes[12..end], end))
}

/// Parses and validates a container from bytes.
pub fn decode_container(bytes: &[u8]) -> Result<Checkpoint> {
    let (header_bytes, header_end) = split_header(bytes, CONTAINER_MAGIC)?;
    let header: BTreeMap<String, serde_json::Value> =
        serde_json::from_slice(header_bytes).map_err(|e| Error::Header(e.to_string()))?;

    let payload_start = align_up(header_end);
    if payload_start > bytes.len() {
        return Err(Error::Truncated("missing payload alignment padding".into()));
    }
    let payload = &bytes[payload_start..];

    let mut ckpt = Checkpoint::new();
    let mut entries = Vec::with_capacity(header.len());
    for (name, value) in header {
        if name == METADATA_KEY {
            let meta: BTreeMap<String, String> = serde_json::from_value(value)
                .map_err(|e| Error::Header(format!("{METADATA_KEY}: {e}")))?;
            *ckpt.meta_mut() = meta;
            continue;
        }
        let entry: Entry = serde_json::from_value(value)
            .map_err(|e| Error::Header(format!("tensor '{name}': {e}")))?;
        if entry.dtype != "f32" {
            return Err(Error::Header(format!(
                "tensor '{name}': unsupported dtype '{}'",
                entry.dtype
            )));
        }
        let numel = entry
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
        let shape_ok = !entry.shape.is_empty() && entry.shape.iter().all(|&d| d >= 1);
        match numel {
            Some(n) if shape_ok && n.checked_mul(4) == Some(entry.nbytes) => {}
            _ => {
                return Err(Error::SizeMismatch {
                    name,
                    shape: entry.shape,
                    nbytes: entry.nbytes,
                })
            }
        }
        entries.push((name, entry));
    }

    let mut by_offset: Vec<&(String, Entry)> = entries.iter().collect();
    by_offset.sort_by_key(|(_, e)| e.offset);
    let mut cursor = 0u64;
    for (name, e) in &by_offset {
        if e.offset < cursor || e.offset % ALIGN as u64 != 0 {
            return Err(Error::Overlap(name.clone()));
        }
        cursor = e.offset + e.nbytes;
        if cursor > payload.len() as u64 {
            return Err(Error::Truncated(format!("payload too short for tensor '{name}'")));
        }
    }
    if cursor != payload.len() as u64 {
        return Err(Error::Header(format!(
            "{} trailing payload bytes",
            payload.len() as u64 - cursor
        )));
    }

    for (name, e) in entries {
        let start = e.offset as usize;
        let raw = &payload[start..start + e.nbytes as usize];
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::NanPayload(name));
        }
        ckpt.insert(name, Tensor::from_parts(e.shape, data));
    }
    Ok(ckpt)
}

pub fn write_container(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_container(ckpt)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    decode_container(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("w", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        c
    }

    #[test]
    fn round_trip_simple() {
        let c = sample();
        let back = decode_container(&encode_container(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn empty_checkpoint_has_empty_header() {
        let bytes = encode_container(&Checkpoint::new()).unwrap();
        assert_eq!(&bytes[..4], b"MTC1");
        assert_eq!(u64::from_le_bytes(bytes[4..12].try_into().unwrap()), 2);
        assert_eq!(&bytes[12..14], b"{}");
        assert_eq!(bytes.len(), 16);
        assert!(decode_container(&bytes).unwrap().is_empty());
    }

    #[test]
    fn header_is_sorted_regardless_of_insertion() {
        let mut c = Checkpoint::new();
        c.insert("b", Tensor::new(vec![1], vec![2.0]).unwrap());
        c.insert("a", Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap());
        let bytes = encode_container(&c).unwrap();
        let (header, _) = split_header(&bytes, CONTAINER_MAGIC).unwrap();
        let text = std::str::from_utf8(header).unwrap();
        assert_eq!(
            text,
            r#"{"a":{"dtype":"f32","nbytes":12,"offset":0,"shape":[3]},"b":{"dtype":"f32","nbytes":4,"offset":16,"shape":[1]}}"#
        );
        let payload_start = align_up(12 + header.len());
        assert_eq!(payload_start % 8, 0);
        assert_eq!(bytes.len(), payload_start + 20);
    }

    #[test]
    fn metadata_round_trips() {
        let c = sample().with_meta("model_id", "m1").with_meta("role", "model");
        let bytes = encode_container(&c).unwrap();
        let back = decode_container(&bytes).unwrap();
        assert_eq!(back.meta(), c.meta());
        assert_eq!(encode_container(&back).unwrap(), bytes);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_container(&sample()).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_container(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn nan_payload_names_tensor() {
        let mut bytes = encode_container(&sample()).unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        match decode_container(&bytes) {
            Err(Error::NanPayload(name)) => assert_eq!(name, "w"),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn with_header(header: &str, payload: &[u8]) -> Vec<u8> {
        let mut out = b"MTC1".to_vec();
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.resize(align_up(out.len()), 0);
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn unparseable_header() {
        let bytes = with_header("{not json", &[]);
        assert!(matches!(decode_container(&bytes), Err(Error::Header(_))));
    }

    #[test]
    fn overlapping_offsets() {
        let header = r#"{"a":{"dtype":"f32","nbytes":8,"offset":0,"shape":[2]},"b":{"dtype":"f32","nbytes":8,"offset":0,"shape":[2]}}"#;
        let bytes = with_header(header, &[0u8; 8]);
        assert!(matches!(decode_container(&bytes), Err(Error::Overlap(_))));
    }

    #[test]
    fn nbytes_shape_mismatch() {
        let header = r#"{"a":{"dtype":"f32","nbytes":12,"offset":0,"shape":[2]}}"#;
        let bytes = with_header(header, &[0u8; 12]);
        assert!(matches!(decode_container(&bytes), Err(Error::SizeMismatch { .. })));
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = encode_container(&sample()).unwrap();
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(decode_container(&bytes), Err(Error::Truncated(_))));
    }

    #[test]
    fn reserved_name_rejected() {
        let mut c = Checkpoint::new();
        c.insert(METADATA_KEY, Tensor::new(vec![1], vec![0.0]).unwrap());
        assert!(encode_container(&c).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.mtc");
        let c = sample();
        write_container(&c, &path).unwrap();
        assert_eq!(read_container(&path).unwrap(), c);
    }
}
