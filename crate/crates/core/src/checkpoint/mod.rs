//! Checkpoints stored in the safetensors format, read lazily one tensor at
//! a time, plus task-vector arithmetic.

mod dtype;
mod format;
mod task_vector;

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub use dtype::{Dtype, Scalar, TensorData};
pub use format::{CheckpointWriter, METADATA_KEY};
pub use task_vector::{task_vector, TaskVector};
pub(crate) use task_vector::delta_of as task_vector_delta;

use crate::error::{Error, Result};

/// One manifest entry: where a tensor lives in the payload and how to read it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub byte_offset: u64,
    pub byte_length: u64,
}

impl TensorMeta {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, dtype: Dtype) -> Self {
        let mut meta = Self {
            name: name.into(),
            shape,
            dtype,
            byte_offset: 0,
            byte_length: 0,
        };
        meta.byte_length = (meta.numel() * dtype.width()) as u64;
        meta
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// A materialized tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    /// Storage dtype; `data` is held in its accumulation precision.
    pub dtype: Dtype,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(
        name: impl Into<String>,
        shape: Vec<usize>,
        dtype: Dtype,
        data: TensorData,
    ) -> Result<Self> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "`{name}` has shape {shape:?} but {} values",
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("`{name}` has a zero extent")));
        }
        Ok(Self {
            name,
            shape,
            dtype,
            data,
        })
    }

    pub fn f64(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        Self::new(name, shape, Dtype::F64, TensorData::F64(values))
    }

    pub fn f32(name: impl Into<String>, shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        Self::new(name, shape, Dtype::F32, TensorData::F32(values))
    }

    pub fn meta(&self) -> TensorMeta {
        TensorMeta::new(self.name.clone(), self.shape.clone(), self.dtype)
    }
}

#[derive(Clone, Debug)]
enum Payload {
    File { path: Arc<PathBuf>, data_start: u64 },
    /// Encoded storage bytes, one buffer per manifest entry.
    Memory(Arc<Vec<Vec<u8>>>),
}

/// A named set of dense tensors. Immutable once built; cloning is cheap.
///
/// File-backed checkpoints only parse the header on load. Tensor values are
/// read from disk each time they are requested, so a per-tensor pass keeps
/// at most the tensor currently in hand resident.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    manifest: Vec<TensorMeta>,
    index: HashMap<String, usize>,
    metadata: BTreeMap<String, String>,
    payload: Payload,
}

impl Checkpoint {
    pub fn empty() -> Self {
        Self {
            manifest: Vec::new(),
            index: HashMap::new(),
            metadata: BTreeMap::new(),
            payload: Payload::Memory(Arc::new(Vec::new())),
        }
    }

    /// Builds an in-memory checkpoint. Tensors are re-ordered by name.
    pub fn from_tensors(tensors: impl IntoIterator<Item = Tensor>) -> Result<Self> {
        let mut tensors: Vec<Tensor> = tensors.into_iter().collect();
        tensors.sort_by(|a, b| a.name.cmp(&b.name));
        if let Some(w) = tensors.windows(2).find(|w| w[0].name == w[1].name) {
            return Err(Error::Format(format!("duplicated tensor name `{}`", w[0].name)));
        }
        let mut manifest: Vec<TensorMeta> = tensors.iter().map(Tensor::meta).collect();
        format::layout(&mut manifest);
        let buffers = tensors.iter().map(|t| t.data.encode(t.dtype)).collect();
        Ok(Self::assemble(
            manifest,
            BTreeMap::new(),
            Payload::Memory(Arc::new(buffers)),
        ))
    }

    fn assemble(
        manifest: Vec<TensorMeta>,
        metadata: BTreeMap<String, String>,
        payload: Payload,
    ) -> Self {
        let index = manifest
            .iter()
            .enumerate()
            .map(|(i, m)| (m.name.clone(), i))
            .collect();
        Self {
            manifest,
            index,
            metadata,
            payload,
        }
    }

    /// Parses the header only; no tensor is read.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let header = format::read_header(path)?;
        Ok(Self::assemble(
            header.manifest,
            header.metadata,
            Payload::File {
                path: Arc::new(path.to_path_buf()),
                data_start: header.data_start,
            },
        ))
    }

    /// Writes the checkpoint with tensors laid out in name order. Storage
    /// bytes are copied verbatim, one tensor at a time.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut writer = CheckpointWriter::create(path, self.manifest.clone(), &self.metadata)?;
        for (i, meta) in self.manifest.iter().enumerate() {
            let bytes = self.raw_bytes(i)?;
            writer.write_raw(&meta.name, &bytes)?;
        }
        writer.finish()
    }

    pub fn manifest(&self) -> &[TensorMeta] {
        &self.manifest
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.manifest.iter().map(|m| m.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    /// Total element count `D` across all tensors.
    pub fn numel(&self) -> usize {
        self.manifest.iter().map(TensorMeta::numel).sum()
    }

    pub fn largest_tensor_bytes(&self) -> u64 {
        self.manifest.iter().map(|m| m.byte_length).max().unwrap_or(0)
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn with_metadata(mut self, metadata: BTreeMap<String, String>) -> Self {
        self.metadata = metadata;
        self
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn meta(&self, name: &str) -> Option<&TensorMeta> {
        self.position(name).map(|i| &self.manifest[i])
    }

    fn position_or_err(&self, name: &str) -> Result<usize> {
        self.position(name)
            .ok_or_else(|| Error::compat(name, "no such tensor in checkpoint"))
    }

    /// Storage bytes of the `i`-th manifest entry.
    pub fn raw_bytes(&self, i: usize) -> Result<Vec<u8>> {
        let meta = &self.manifest[i];
        match &self.payload {
            Payload::Memory(buffers) => Ok(buffers[i].clone()),
            Payload::File { path, data_start } => {
                let mut reader = self.open_region(path, *data_start, meta)?;
                let mut bytes = vec![0u8; meta.byte_length as usize];
                reader
                    .read_exact(&mut bytes)
                    .map_err(|e| truncation_or_io(path, e, meta))?;
                Ok(bytes)
            }
        }
    }

    fn open_region(&self, path: &Path, data_start: u64, meta: &TensorMeta) -> Result<BufReader<File>> {
        let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
        file.seek(SeekFrom::Start(data_start + meta.byte_offset))
            .map_err(|e| Error::io(path, e))?;
        Ok(BufReader::with_capacity(1 << 16, file))
    }

    /// Materializes the `i`-th tensor's values, widening half dtypes to f32.
    pub fn values_at(&self, i: usize) -> Result<TensorData> {
        let meta = &self.manifest[i];
        match &self.payload {
            Payload::Memory(buffers) => Ok(TensorData::decode(meta.dtype, &buffers[i])),
            Payload::File { path, data_start } => {
                // Decode in chunks so the raw bytes and the widened values
                // are never both resident in full.
                let mut reader = self.open_region(path, *data_start, meta)?;
                let mut out = TensorData::with_capacity(meta.dtype, meta.numel());
                let mut chunk = vec![0u8; 1 << 16];
                let mut remaining = meta.byte_length as usize;
                while remaining > 0 {
                    let n = remaining.min(chunk.len());
                    reader
                        .read_exact(&mut chunk[..n])
                        .map_err(|e| truncation_or_io(path, e, meta))?;
                    out.extend_from_le_bytes(meta.dtype, &chunk[..n]);
                    remaining -= n;
                }
                Ok(out)
            }
        }
    }

    pub fn values(&self, name: &str) -> Result<TensorData> {
        self.values_at(self.position_or_err(name)?)
    }

    pub fn tensor_at(&self, i: usize) -> Result<Tensor> {
        let meta = &self.manifest[i];
        Ok(Tensor {
            name: meta.name.clone(),
            shape: meta.shape.clone(),
            dtype: meta.dtype,
            data: self.values_at(i)?,
        })
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        self.tensor_at(self.position_or_err(name)?)
    }

    /// Lazily materializes tensors in manifest order.
    pub fn tensors(&self) -> impl Iterator<Item = Result<Tensor>> + '_ {
        (0..self.len()).map(move |i| self.tensor_at(i))
    }

    /// Pulls every tensor into memory.
    pub fn to_memory(&self) -> Result<Checkpoint> {
        let buffers = (0..self.len())
            .map(|i| self.raw_bytes(i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::assemble(
            self.manifest.clone(),
            self.metadata.clone(),
            Payload::Memory(Arc::new(buffers)),
        ))
    }

    /// True when both checkpoints hold the same manifest (names, shapes,
    /// dtypes) and bit-identical storage bytes.
    pub fn content_eq(&self, other: &Checkpoint) -> Result<bool> {
        if self.len() != other.len() {
            return Ok(false);
        }
        for (i, (a, b)) in self.manifest.iter().zip(&other.manifest).enumerate() {
            if a.name != b.name || a.shape != b.shape || a.dtype != b.dtype {
                return Ok(false);
            }
            if self.raw_bytes(i)? != other.raw_bytes(i)? {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

fn truncation_or_io(path: &Path, e: std::io::Error, meta: &TensorMeta) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Truncation {
            expected: meta.byte_offset + meta.byte_length,
            found: meta.byte_offset,
        }
    } else {
        Error::io(path, e)
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    ckpt.save(path)
}

/// Succeeds iff both manifests have the same names, and per name the same
/// shape and dtype. The error names the first offending tensor.
pub fn validate_compat(a: &Checkpoint, b: &Checkpoint) -> Result<()> {
    for meta in a.manifest() {
        let other = b
            .meta(&meta.name)
            .ok_or_else(|| Error::compat(&meta.name, "missing from second checkpoint"))?;
        if other.shape != meta.shape {
            return Err(Error::compat(
                &meta.name,
                format!("shape {:?} vs {:?}", meta.shape, other.shape),
            ));
        }
        if other.dtype != meta.dtype {
            return Err(Error::compat(
                &meta.name,
                format!("dtype {} vs {}", meta.dtype, other.dtype),
            ));
        }
    }
    if let Some(extra) = b.names().find(|n| a.position(n).is_none()) {
        return Err(Error::compat(extra, "missing from first checkpoint"));
    }
    Ok(())
}

/// Manifest-level compatibility for anything aligned to a reference
/// checkpoint (score maps, task vectors): same names and shapes, any dtype.
pub(crate) fn validate_shapes(reference: &[TensorMeta], other: &[TensorMeta]) -> Result<()> {
    if let Some(missing) = reference
        .iter()
        .find(|m| !other.iter().any(|o| o.name == m.name))
    {
        return Err(Error::compat(&missing.name, "missing from aligned object"));
    }
    for o in other {
        match reference.iter().find(|m| m.name == o.name) {
            None => return Err(Error::compat(&o.name, "not in reference manifest")),
            Some(m) if m.shape != o.shape => {
                return Err(Error::compat(
                    &o.name,
                    format!("shape {:?} vs reference {:?}", o.shape, m.shape),
                ))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_tensor_ckpt() -> Checkpoint {
        Checkpoint::from_tensors([
            Tensor::f32("w", vec![4, 4], (0..16).map(|i| i as f32).collect()).unwrap(),
            Tensor::f32("b", vec![4], vec![1.0, -2.0, 3.5, 0.0]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn dimensionality_is_total_element_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        two_tensor_ckpt().save(&path).unwrap();
        let ckpt = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt.len(), 2);
        assert_eq!(ckpt.numel(), 20);
        assert_eq!(ckpt.names().collect::<Vec<_>>(), ["b", "w"]);
        assert_eq!(ckpt.values("b").unwrap().to_f64_vec(), [1.0, -2.0, 3.5, 0.0]);
    }

    #[test]
    fn in_memory_duplicate_names_rejected() {
        let t = Tensor::f32("a", vec![1], vec![0.0]).unwrap();
        assert!(matches!(
            Checkpoint::from_tensors([t.clone(), t]),
            Err(Error::Format(_))
        ));
    }

    fn write_raw_file(path: &Path, header: &str, payload: &[u8]) {
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend_from_slice(payload);
        std::fs::write(path, bytes).unwrap();
    }

    #[test]
    fn duplicated_name_in_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.safetensors");
        let header = r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"a":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#;
        write_raw_file(&path, header, &[0u8; 8]);
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("duplicated")), "{err}");
    }

    #[test]
    fn short_payload_is_a_truncation_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.safetensors");
        let header = r#"{"a":{"dtype":"F32","shape":[4],"data_offsets":[0,16]}}"#;
        write_raw_file(&path, header, &[0u8; 10]);
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Truncation {
                expected: 16,
                found: 10
            })
        ));
    }

    #[test]
    fn unsupported_dtype_and_malformed_headers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.safetensors");
        write_raw_file(
            &path,
            r#"{"a":{"dtype":"I64","shape":[1],"data_offsets":[0,8]}}"#,
            &[0u8; 8],
        );
        assert!(matches!(load_checkpoint(&path), Err(Error::Dtype(_))));

        write_raw_file(&path, "not json", &[]);
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));

        // Gap between regions.
        write_raw_file(
            &path,
            r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#,
            &[0u8; 8],
        );
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));

        // Byte length disagrees with the shape.
        write_raw_file(
            &path,
            r#"{"a":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}}"#,
            &[0u8; 8],
        );
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));

        std::fs::write(&path, [1u8, 2, 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn metadata_survives_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("meta.safetensors");
        let meta = BTreeMap::from([("format".to_string(), "pt".to_string())]);
        two_tensor_ckpt().with_metadata(meta.clone()).save(&path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap().metadata(), &meta);
    }

    #[test]
    fn empty_checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.safetensors");
        Checkpoint::empty().save(&path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.numel(), 0);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len() % 8, 0);
    }

    #[test]
    fn header_is_padded_to_eight_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pad.safetensors");
        two_tensor_ckpt().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(n % 8, 0);
        assert_eq!(bytes.len(), 8 + n + 20 * 4);
    }

    #[test]
    fn compat_reports_first_offender() {
        let a = two_tensor_ckpt();
        validate_compat(&a, &a).unwrap();

        let reshaped = Checkpoint::from_tensors([
            Tensor::f32("w", vec![2, 8], vec![0.0; 16]).unwrap(),
            Tensor::f32("b", vec![4], vec![0.0; 4]).unwrap(),
        ])
        .unwrap();
        assert!(matches!(
            validate_compat(&a, &reshaped),
            Err(Error::Compat { tensor, .. }) if tensor == "w"
        ));

        let missing =
            Checkpoint::from_tensors([Tensor::f32("w", vec![4, 4], vec![0.0; 16]).unwrap()]).unwrap();
        assert!(matches!(
            validate_compat(&a, &missing),
            Err(Error::Compat { tensor, .. }) if tensor == "b"
        ));
        assert!(matches!(
            validate_compat(&missing, &a),
            Err(Error::Compat { tensor, .. }) if tensor == "b"
        ));

        let retyped = Checkpoint::from_tensors([
            Tensor::f32("w", vec![4, 4], vec![0.0; 16]).unwrap(),
            Tensor::new("b", vec![4], Dtype::F16, TensorData::F32(vec![0.0; 4])).unwrap(),
        ])
        .unwrap();
        assert!(validate_compat(&a, &retyped).is_err());
    }
}
