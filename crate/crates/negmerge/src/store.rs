//! Checkpoint container: `[u64 LE header length][JSON header][data]`.
//!
//! The header maps each tensor name to `{"dtype", "shape", "data_offsets"}`
//! with offsets relative to the data section, plus an optional
//! `__metadata__` string map. [`to_bytes`] writes a canonical form (names in
//! sorted order, data packed in the same order, header padded with spaces to
//! a multiple of 8 bytes), so loading and re-saving a canonical file
//! reproduces it byte for byte.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use negmerge_core::{DType, Tensor, TensorData, TensorMap};
use serde::de::{Deserializer, MapAccess, Visitor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError};

const METADATA_KEY: &str = "__metadata__";
const HEADER_ALIGN: usize = 8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadOptions {
    pub allow_nonfinite: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SaveOptions {
    pub allow_nonfinite: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

/// Header keys in file order, so duplicates stay visible.
struct RawHeader(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = RawHeader;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<RawHeader, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, serde_json::Value>()? {
                    out.push((k, v));
                }
                Ok(RawHeader(out))
            }
        }
        d.deserialize_map(V)
    }
}

fn malformed(msg: impl Into<String>) -> FormatError {
    FormatError::MalformedHeader(msg.into())
}

pub fn from_bytes(bytes: &[u8], opts: LoadOptions) -> Result<TensorMap, FormatError> {
    if bytes.len() < 8 {
        return Err(FormatError::Truncated(bytes.len()));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let available = (bytes.len() - 8) as u64;
    if n > available {
        return Err(FormatError::HeaderTooLarge { header: n, available });
    }
    let header_end = 8 + n as usize;
    let text = std::str::from_utf8(&bytes[8..header_end]).map_err(|e| malformed(e.to_string()))?;
    let raw: RawHeader = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
    let data = &bytes[header_end..];

    let mut metadata: Option<BTreeMap<String, String>> = None;
    let mut entries: BTreeMap<String, (DType, Vec<usize>, u64, u64)> = BTreeMap::new();
    for (name, value) in raw.0 {
        if name == METADATA_KEY {
            if metadata.is_some() {
                return Err(FormatError::DuplicateName(name));
            }
            let m: BTreeMap<String, String> =
                serde_json::from_value(value).map_err(|e| malformed(format!("{METADATA_KEY}: {e}")))?;
            metadata = Some(m);
            continue;
        }
        if entries.contains_key(&name) {
            return Err(FormatError::DuplicateName(name));
        }
        let entry: Entry = serde_json::from_value(value).map_err(|e| malformed(format!("{name}: {e}")))?;
        let dtype = DType::parse(&entry.dtype).ok_or_else(|| FormatError::UnknownDtype {
            name: name.clone(),
            dtype: entry.dtype.clone(),
        })?;
        let [begin, end] = entry.data_offsets;
        if begin > end || end > data.len() as u64 {
            return Err(FormatError::OffsetOutOfBounds {
                name,
                begin,
                end,
                len: data.len() as u64,
            });
        }
        let count = entry
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| malformed(format!("{name}: shape overflows")))?;
        let expected = count
            .checked_mul(dtype.size_in_bytes() as u64)
            .ok_or_else(|| malformed(format!("{name}: shape overflows")))?;
        if end - begin != expected {
            return Err(FormatError::SizeMismatch {
                name,
                expected,
                actual: end - begin,
            });
        }
        entries.insert(name, (dtype, entry.shape, begin, end));
    }

    // packed, non-overlapping, covering the whole data section
    let mut spans: Vec<(u64, u64, &str)> = entries.iter().map(|(k, e)| (e.2, e.3, k.as_str())).collect();
    spans.sort();
    let mut cursor = 0u64;
    for &(begin, end, name) in &spans {
        if begin < cursor {
            return Err(FormatError::OverlappingOffsets(name.to_string()));
        }
        if begin > cursor {
            return Err(FormatError::Gap { at: cursor });
        }
        cursor = end;
    }
    if cursor != data.len() as u64 {
        return Err(FormatError::Gap { at: cursor });
    }

    let mut map = TensorMap::new();
    for (name, (dtype, shape, begin, end)) in entries {
        let chunk = &data[begin as usize..end as usize];
        let values = match dtype {
            DType::F32 => TensorData::F32(
                chunk
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                chunk
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
        };
        let tensor = if opts.allow_nonfinite {
            Tensor::new_allow_nonfinite(shape, values)
        } else {
            Tensor::new(shape, values)
        }
        .map_err(|e| match e {
            negmerge_core::Error::NonFiniteValue { index, .. } => FormatError::NonFinite {
                name: name.clone(),
                index,
            },
            other => malformed(other.to_string()),
        })?;
        map.insert(name.clone(), tensor).map_err(|e| malformed(e.to_string()))?;
    }
    if let Some(m) = metadata {
        *map.metadata_mut() = m;
    }
    Ok(map)
}

/// Canonical encoding of `map`.
pub fn to_bytes(map: &TensorMap, opts: SaveOptions) -> Result<Vec<u8>, FormatError> {
    if !opts.allow_nonfinite {
        if let Some((name, index)) = map.first_nonfinite() {
            return Err(FormatError::NonFinite {
                name: name.to_string(),
                index,
            });
        }
    }
    let mut header = String::from("{");
    let mut first = true;
    let mut push_key = |header: &mut String, key: &str| {
        if !first {
            header.push(',');
        }
        first = false;
        header.push_str(&serde_json::to_string(key).expect("string serializes"));
        header.push(':');
    };
    if !map.metadata().is_empty() {
        push_key(&mut header, METADATA_KEY);
        header.push_str(&serde_json::to_string(map.metadata()).expect("string map serializes"));
    }
    let mut offset = 0u64;
    for (name, t) in map.iter() {
        let size = (t.len() * t.dtype().size_in_bytes()) as u64;
        let entry = Entry {
            dtype: t.dtype().as_str().to_string(),
            shape: t.shape().to_vec(),
            data_offsets: [offset, offset + size],
        };
        push_key(&mut header, name);
        header.push_str(&serde_json::to_string(&entry).expect("entry serializes"));
        offset += size;
    }
    header.push('}');
    while header.len() % HEADER_ALIGN != 0 {
        header.push(' ');
    }

    let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for (_, t) in map.iter() {
        match t.data() {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    Ok(out)
}

pub fn load(path: impl AsRef<Path>) -> Result<TensorMap, Error> {
    load_with(path, LoadOptions::default())
}

pub fn load_with(path: impl AsRef<Path>, opts: LoadOptions) -> Result<TensorMap, Error> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, opts).map_err(|e| Error::format(path, e))
}

pub fn save(map: &TensorMap, path: impl AsRef<Path>) -> Result<(), Error> {
    save_with(map, path, SaveOptions::default())
}

pub fn save_with(map: &TensorMap, path: impl AsRef<Path>, opts: SaveOptions) -> Result<(), Error> {
    let path = path.as_ref();
    let bytes = to_bytes(map, opts).map_err(|e| Error::format(path, e))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(header: &str, data: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(data);
        out
    }

    fn f32_bytes(v: &[f32]) -> Vec<u8> {
        v.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    #[test]
    fn decodes_hand_assembled_file() {
        let bytes = file(
            r#"{"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#,
            &f32_bytes(&[1.0, 2.0]),
        );
        let m = from_bytes(&bytes, LoadOptions::default()).unwrap();
        assert_eq!(m.get("w").unwrap().to_f64_vec(), vec![1.0, 2.0]);
        assert_eq!(m.get("w").unwrap().dtype(), DType::F32);
    }

    #[test]
    fn canonical_output_is_stable() {
        let m = TensorMap::new()
            .with("w", Tensor::from_f32(vec![2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let bytes = to_bytes(&m, SaveOptions::default()).unwrap();
        assert_eq!(bytes.len() % 8, 0);
        let again = to_bytes(&from_bytes(&bytes, LoadOptions::default()).unwrap(), SaveOptions::default()).unwrap();
        assert_eq!(bytes, again);
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(header_len % 8, 0);
        assert_eq!(&bytes[8 + header_len..], &f32_bytes(&[1.0, 2.0])[..]);
    }

    #[test]
    fn empty_and_scalar_tensors() {
        let m = TensorMap::new()
            .with("empty", Tensor::from_f64(vec![0], vec![]).unwrap())
            .unwrap()
            .with("scalar", Tensor::from_f64(vec![], vec![3.5]).unwrap())
            .unwrap();
        let bytes = to_bytes(&m, SaveOptions::default()).unwrap();
        let back = from_bytes(&bytes, LoadOptions::default()).unwrap();
        assert!(back.bit_eq(&m));
        assert_eq!(back.get("empty").unwrap().len(), 0);
        assert_eq!(back.get("scalar").unwrap().shape(), &[] as &[usize]);
    }

    #[test]
    fn metadata_round_trips() {
        let mut m = TensorMap::new().with("a", Tensor::vector(vec![1.0])).unwrap();
        m.set_metadata("origin", "unit \"test\"");
        let bytes = to_bytes(&m, SaveOptions::default()).unwrap();
        let back = from_bytes(&bytes, LoadOptions::default()).unwrap();
        assert_eq!(back.metadata(), m.metadata());
        assert_eq!(to_bytes(&back, SaveOptions::default()).unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_files() {
        let ok_data = f32_bytes(&[1.0, 2.0]);
        let cases: Vec<(Vec<u8>, fn(&FormatError) -> bool)> = vec![
            (vec![1, 2, 3], |e| matches!(e, FormatError::Truncated(3))),
            (
                {
                    let mut b = 1000u64.to_le_bytes().to_vec();
                    b.extend_from_slice(b"{}");
                    b
                },
                |e| matches!(e, FormatError::HeaderTooLarge { .. }),
            ),
            (file("{not json", &[]), |e| matches!(e, FormatError::MalformedHeader(_))),
            (
                file(r#"{"w":{"dtype":"F32","shape":[2],"data_offsets":[0,16]}}"#, &ok_data),
                |e| matches!(e, FormatError::OffsetOutOfBounds { .. }),
            ),
            (
                file(r#"{"w":{"dtype":"I8","shape":[2],"data_offsets":[0,8]}}"#, &ok_data),
                |e| matches!(e, FormatError::UnknownDtype { .. }),
            ),
            (
                file(
                    r#"{"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"w":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#,
                    &ok_data,
                ),
                |e| matches!(e, FormatError::DuplicateName(n) if n == "w"),
            ),
            (
                file(
                    r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#,
                    &ok_data,
                ),
                |e| matches!(e, FormatError::OverlappingOffsets(_)),
            ),
            (
                file(r#"{"w":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}}"#, &ok_data),
                |e| matches!(e, FormatError::SizeMismatch { .. }),
            ),
            (
                file(r#"{"w":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#, &ok_data),
                |e| matches!(e, FormatError::Gap { at: 0 }),
            ),
            (
                file(
                    r#"{"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8],"extra":1}}"#,
                    &ok_data,
                ),
                |e| matches!(e, FormatError::MalformedHeader(_)),
            ),
        ];
        for (i, (bytes, check)) in cases.into_iter().enumerate() {
            let err = from_bytes(&bytes, LoadOptions::default()).unwrap_err();
            assert!(check(&err), "case {i}: {err:?}");
        }
    }

    #[test]
    fn nonfinite_policy() {
        let bytes = file(
            r#"{"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#,
            &f32_bytes(&[1.0, f32::NAN]),
        );
        assert!(matches!(
            from_bytes(&bytes, LoadOptions::default()),
            Err(FormatError::NonFinite { index: 1, .. })
        ));
        let m = from_bytes(&bytes, LoadOptions { allow_nonfinite: true }).unwrap();
        assert!(matches!(
            to_bytes(&m, SaveOptions::default()),
            Err(FormatError::NonFinite { .. })
        ));
        let out = to_bytes(&m, SaveOptions { allow_nonfinite: true }).unwrap();
        let back = from_bytes(&out, LoadOptions { allow_nonfinite: true }).unwrap();
        assert!(back.bit_eq(&m));
    }

    #[test]
    fn unordered_offsets_are_accepted() {
        // data for "b" precedes data for "a"
        let mut data = f32_bytes(&[5.0]);
        data.extend(f32_bytes(&[7.0, 8.0]));
        let bytes = file(
            r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[4,12]},"b":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#,
            &data,
        );
        let m = from_bytes(&bytes, LoadOptions::default()).unwrap();
        assert_eq!(m.get("a").unwrap().to_f64_vec(), vec![7.0, 8.0]);
        assert_eq!(m.get("b").unwrap().to_f64_vec(), vec![5.0]);
    }
}
