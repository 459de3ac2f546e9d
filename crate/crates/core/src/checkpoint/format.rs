//! Safetensors container: an 8-byte little-endian header length, a JSON
//! header mapping tensor name to `{dtype, shape, data_offsets}`, then the
//! raw payload. Offsets are relative to the start of the payload.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer};
use serde_json::{json, Map, Value};

use super::dtype::{Dtype, TensorData};
use super::TensorMeta;
use crate::error::{Error, Result};

pub const METADATA_KEY: &str = "__metadata__";

/// Guards against reading an absurd header length from a corrupt file.
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

const HEADER_ALIGN: usize = 8;

/// Header entries in file order, keeping duplicates so they can be rejected.
struct RawHeader(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = RawHeader;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<RawHeader, A::Error> {
                let mut entries = Vec::with_capacity(map.size_hint().unwrap_or(0));
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    entries.push((k, v));
                }
                Ok(RawHeader(entries))
            }
        }

        deserializer.deserialize_map(EntriesVisitor)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    dtype: String,
    shape: Vec<u64>,
    data_offsets: [u64; 2],
}

pub(crate) struct ParsedHeader {
    pub manifest: Vec<TensorMeta>,
    pub metadata: BTreeMap<String, String>,
    pub data_start: u64,
}

pub(crate) fn read_header(path: &Path) -> Result<ParsedHeader> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();

    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|_| Error::Format("file shorter than the 8-byte header length".into()))?;
    let header_len = u64::from_le_bytes(len_bytes);
    if header_len > MAX_HEADER_LEN || 8 + header_len > file_len {
        return Err(Error::Format(format!(
            "header length {header_len} exceeds file size {file_len}"
        )));
    }
    let mut header = vec![0u8; header_len as usize];
    file.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    let text = std::str::from_utf8(&header)
        .map_err(|e| Error::Format(format!("header is not UTF-8: {e}")))?;
    let RawHeader(entries) = serde_json::from_str(text)
        .map_err(|e| Error::Format(format!("header is not a JSON object: {e}")))?;

    let mut seen = HashSet::with_capacity(entries.len());
    let mut metadata = BTreeMap::new();
    let mut manifest = Vec::with_capacity(entries.len());
    for (name, value) in entries {
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicated tensor name `{name}`")));
        }
        if name == METADATA_KEY {
            metadata = serde_json::from_value(value)
                .map_err(|e| Error::Format(format!("{METADATA_KEY} must map strings to strings: {e}")))?;
            continue;
        }
        let entry: RawEntry = serde_json::from_value(value)
            .map_err(|e| Error::Format(format!("entry `{name}`: {e}")))?;
        let dtype = Dtype::parse(&entry.dtype)?;
        if entry.shape.iter().any(|&d| d == 0) {
            return Err(Error::Format(format!("`{name}` has a zero extent")));
        }
        let shape: Vec<usize> = entry.shape.iter().map(|&d| d as usize).collect();
        let [begin, end] = entry.data_offsets;
        if end < begin {
            return Err(Error::Format(format!("`{name}` has inverted data_offsets")));
        }
        let numel: u64 = entry.shape.iter().product();
        if end - begin != numel * dtype.width() as u64 {
            return Err(Error::Format(format!(
                "`{name}`: {} bytes do not hold {numel} {dtype} elements",
                end - begin
            )));
        }
        manifest.push(TensorMeta {
            name,
            shape,
            dtype,
            byte_offset: begin,
            byte_length: end - begin,
        });
    }

    // Regions must tile the payload exactly, without gaps or overlaps.
    let mut regions: Vec<&TensorMeta> = manifest.iter().collect();
    regions.sort_by_key(|m| m.byte_offset);
    let mut cursor = 0u64;
    for meta in &regions {
        if meta.byte_offset != cursor {
            return Err(Error::Format(format!(
                "`{}` starts at byte {} but the previous region ends at {cursor}",
                meta.name, meta.byte_offset
            )));
        }
        cursor += meta.byte_length;
    }
    let data_start = 8 + header_len;
    let available = file_len - data_start;
    if available < cursor {
        return Err(Error::Truncation {
            expected: cursor,
            found: available,
        });
    }
    if available > cursor {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last tensor",
            available - cursor
        )));
    }

    manifest.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(ParsedHeader {
        manifest,
        metadata,
        data_start,
    })
}

/// Assigns contiguous payload offsets in manifest order.
pub(crate) fn layout(manifest: &mut [TensorMeta]) {
    let mut cursor = 0u64;
    for meta in manifest.iter_mut() {
        meta.byte_offset = cursor;
        meta.byte_length = (meta.numel() * meta.dtype.width()) as u64;
        cursor += meta.byte_length;
    }
}

pub(crate) fn header_bytes(manifest: &[TensorMeta], metadata: &BTreeMap<String, String>) -> Vec<u8> {
    let mut root = Map::new();
    if !metadata.is_empty() {
        root.insert(METADATA_KEY.to_string(), json!(metadata));
    }
    for meta in manifest {
        root.insert(
            meta.name.clone(),
            json!({
                "dtype": meta.dtype.as_str(),
                "shape": meta.shape,
                "data_offsets": [meta.byte_offset, meta.byte_offset + meta.byte_length],
            }),
        );
    }
    let mut bytes = serde_json::to_vec(&Value::Object(root)).expect("header serializes");
    let padded = bytes.len().div_ceil(HEADER_ALIGN) * HEADER_ALIGN;
    bytes.resize(padded, b' ');
    bytes
}

/// Streams a checkpoint to disk one tensor at a time, in manifest order.
///
/// The header is written up front, so the full manifest (names, shapes,
/// dtypes) must be known when the writer is created.
pub struct CheckpointWriter {
    path: PathBuf,
    out: BufWriter<File>,
    manifest: Vec<TensorMeta>,
    next: usize,
}

impl CheckpointWriter {
    /// `manifest` is re-sorted by name and re-laid-out; offsets passed in
    /// are ignored.
    pub fn create(
        path: impl AsRef<Path>,
        mut manifest: Vec<TensorMeta>,
        metadata: &BTreeMap<String, String>,
    ) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        manifest.sort_by(|a, b| a.name.cmp(&b.name));
        if let Some(w) = manifest.windows(2).find(|w| w[0].name == w[1].name) {
            return Err(Error::Format(format!("duplicated tensor name `{}`", w[0].name)));
        }
        layout(&mut manifest);
        let header = header_bytes(&manifest, metadata);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::with_capacity(1 << 20, file);
        out.write_all(&(header.len() as u64).to_le_bytes())
            .and_then(|_| out.write_all(&header))
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            out,
            manifest,
            next: 0,
        })
    }

    pub fn manifest(&self) -> &[TensorMeta] {
        &self.manifest
    }

    fn expect_next(&mut self, name: &str, len: usize) -> Result<Dtype> {
        let meta = self.manifest.get(self.next).ok_or_else(|| {
            Error::Format(format!("`{name}` written after the manifest was exhausted"))
        })?;
        if meta.name != name {
            return Err(Error::Format(format!(
                "expected tensor `{}` next, got `{name}`",
                meta.name
            )));
        }
        if meta.numel() != len {
            return Err(Error::Shape(format!(
                "`{name}` holds {len} elements, manifest says {}",
                meta.numel()
            )));
        }
        self.next += 1;
        Ok(meta.dtype)
    }

    /// Writes values, narrowing to the manifest dtype.
    pub fn write_values(&mut self, name: &str, data: &TensorData) -> Result<()> {
        let dtype = self.expect_next(name, data.len())?;
        const CHUNK: usize = 1 << 16;
        let mut buf = Vec::with_capacity(CHUNK * dtype.width());
        let mut start = 0;
        while start < data.len() {
            let end = (start + CHUNK).min(data.len());
            buf.clear();
            data.encode_range_into(dtype, start..end, &mut buf);
            self.out.write_all(&buf).map_err(|e| Error::io(&self.path, e))?;
            start = end;
        }
        Ok(())
    }

    /// Writes already-encoded storage bytes verbatim.
    pub fn write_raw(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let width = self
            .manifest
            .get(self.next)
            .map(|m| m.dtype.width())
            .unwrap_or(1);
        if bytes.len() % width != 0 {
            return Err(Error::Format(format!("`{name}`: ragged byte length")));
        }
        self.expect_next(name, bytes.len() / width)?;
        self.out.write_all(bytes).map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        if self.next != self.manifest.len() {
            return Err(Error::Format(format!(
                "only {} of {} tensors were written",
                self.next,
                self.manifest.len()
            )));
        }
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}
