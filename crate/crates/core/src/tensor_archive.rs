//! Checkpoint tensor files.
//!
//! Layout: an 8-byte little-endian header length `N`, `N` bytes of UTF-8 JSON
//! mapping tensor names to `{"dtype", "shape", "data_offsets"}` (plus an
//! optional `"__metadata__"` string map), then the raw data block. Offsets are
//! relative to the start of the data block.
//!
//! Opening an archive only parses the header; tensor data is read on demand,
//! one tensor at a time.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::dtype::Dtype;

const METADATA_KEY: &str = "__metadata__";
/// Refuse headers beyond this size; real checkpoints stay well under it.
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

pub type Metadata = BTreeMap<String, String>;

#[derive(Debug, thiserror::Error)]
pub enum ArchiveError {
    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("tensor data regions overlap in {path}: {first} and {second}")]
    OverlappingRegions {
        path: PathBuf,
        first: String,
        second: String,
    },
    #[error("unknown dtype {dtype:?} for tensor {name}")]
    UnknownDtype { name: String, dtype: String },
    #[error("{path} is truncated: expected at least {expected} bytes, found {actual}")]
    TruncatedFile { path: PathBuf, expected: u64, actual: u64 },
    #[error("no tensor named {0:?}")]
    NameNotFound(String),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("tensor {name}: {reason}")]
    InvalidEntry { name: String, reason: String },
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ArchiveError + '_ {
    move |source| ArchiveError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data_offsets: (u64, u64),
}

impl TensorMeta {
    pub fn num_elements(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> u64 {
        self.data_offsets.1 - self.data_offsets.0
    }
}

/// A decoded tensor. Values are row-major and widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub meta: TensorMeta,
    pub values: Vec<f64>,
}

/// One tensor to be written.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl TensorEntry {
    pub fn new(name: impl Into<String>, dtype: Dtype, shape: Vec<usize>, values: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            dtype,
            shape,
            values,
        }
    }
}

/// Header-only view of a tensor file.
#[derive(Debug, Clone)]
pub struct TensorArchive {
    path: PathBuf,
    entries: BTreeMap<String, TensorMeta>,
    metadata: Option<Metadata>,
    data_start: u64,
}

impl TensorArchive {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ArchiveError> {
        let path = path.as_ref();
        let mut file = File::open(path).map_err(io_err(path))?;
        let file_len = file.metadata().map_err(io_err(path))?.len();
        let malformed = |reason: String| ArchiveError::MalformedHeader {
            path: path.to_path_buf(),
            reason,
        };

        if file_len < 8 {
            return Err(ArchiveError::TruncatedFile {
                path: path.to_path_buf(),
                expected: 8,
                actual: file_len,
            });
        }
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes).map_err(io_err(path))?;
        let header_len = u64::from_le_bytes(len_bytes);
        if header_len > MAX_HEADER_LEN {
            return Err(malformed(format!("header length {header_len} is implausible")));
        }
        if 8 + header_len > file_len {
            return Err(ArchiveError::TruncatedFile {
                path: path.to_path_buf(),
                expected: 8 + header_len,
                actual: file_len,
            });
        }
        let mut header = vec![0u8; header_len as usize];
        file.read_exact(&mut header).map_err(io_err(path))?;
        let document: Value =
            serde_json::from_slice(&header).map_err(|e| malformed(format!("header is not valid JSON: {e}")))?;
        let Value::Object(object) = document else {
            return Err(malformed("header is not a JSON object".into()));
        };

        let data_start = 8 + header_len;
        let (entries, metadata) = parse_header(path, object)?;
        validate_layout(path, &entries, file_len - data_start)?;

        Ok(Self {
            path: path.to_path_buf(),
            entries,
            metadata,
            data_start,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Entries keyed (and therefore ordered) by name.
    pub fn entries(&self) -> &BTreeMap<String, TensorMeta> {
        &self.entries
    }

    pub fn meta(&self, name: &str) -> Option<&TensorMeta> {
        self.entries.get(name)
    }

    pub fn metadata(&self) -> Option<&Metadata> {
        self.metadata.as_ref()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(TensorMeta::num_elements).sum()
    }

    /// Stored bytes of one tensor, undecoded.
    pub fn read_raw(&self, name: &str) -> Result<Vec<u8>, ArchiveError> {
        let meta = self
            .entries
            .get(name)
            .ok_or_else(|| ArchiveError::NameNotFound(name.to_string()))?;
        let mut file = File::open(&self.path).map_err(io_err(&self.path))?;
        file.seek(SeekFrom::Start(self.data_start + meta.data_offsets.0))
            .map_err(io_err(&self.path))?;
        let mut buf = vec![0u8; meta.byte_len() as usize];
        file.read_exact(&mut buf).map_err(io_err(&self.path))?;
        Ok(buf)
    }

    pub fn read_tensor(&self, name: &str) -> Result<TensorData, ArchiveError> {
        let raw = self.read_raw(name)?;
        let meta = self.entries[name].clone();
        let mut values = Vec::new();
        meta.dtype.decode_into(&raw, &mut values);
        Ok(TensorData { meta, values })
    }

    /// Streams tensors in ascending byte-wise name order, decoding each only
    /// when it is reached.
    pub fn iter_tensors(&self) -> TensorIter<'_> {
        TensorIter {
            archive: self,
            names: self.entries.keys(),
        }
    }

    pub fn read_all(&self) -> Result<Vec<TensorData>, ArchiveError> {
        self.iter_tensors().map(|r| r.map(|(_, t)| t)).collect()
    }
}

pub struct TensorIter<'a> {
    archive: &'a TensorArchive,
    names: std::collections::btree_map::Keys<'a, String, TensorMeta>,
}

impl Iterator for TensorIter<'_> {
    type Item = Result<(String, TensorData), ArchiveError>;

    fn next(&mut self) -> Option<Self::Item> {
        let name = self.names.next()?;
        Some(self.archive.read_tensor(name).map(|t| (name.clone(), t)))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.names.size_hint()
    }
}

fn parse_header(
    path: &Path,
    object: Map<String, Value>,
) -> Result<(BTreeMap<String, TensorMeta>, Option<Metadata>), ArchiveError> {
    let malformed = |reason: String| ArchiveError::MalformedHeader {
        path: path.to_path_buf(),
        reason,
    };
    let mut entries = BTreeMap::new();
    let mut metadata = None;

    for (name, value) in object {
        if name == METADATA_KEY {
            let map: Metadata = serde_json::from_value(value)
                .map_err(|e| malformed(format!("__metadata__ must map strings to strings: {e}")))?;
            metadata = Some(map);
            continue;
        }
        if name.is_empty() {
            return Err(malformed("empty tensor name".into()));
        }
        let Value::Object(fields) = value else {
            return Err(malformed(format!("entry {name:?} is not an object")));
        };
        let dtype_str = fields
            .get("dtype")
            .and_then(Value::as_str)
            .ok_or_else(|| malformed(format!("entry {name:?} lacks a string dtype")))?;
        let dtype: Dtype = dtype_str.parse().map_err(|_| ArchiveError::UnknownDtype {
            name: name.clone(),
            dtype: dtype_str.to_string(),
        })?;
        let shape = fields
            .get("shape")
            .and_then(Value::as_array)
            .ok_or_else(|| malformed(format!("entry {name:?} lacks a shape array")))?
            .iter()
            .map(|d| d.as_u64().map(|d| d as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| malformed(format!("entry {name:?} has a non-integer dimension")))?;
        let offsets = fields
            .get("data_offsets")
            .and_then(Value::as_array)
            .filter(|a| a.len() == 2)
            .and_then(|a| Some((a[0].as_u64()?, a[1].as_u64()?)))
            .ok_or_else(|| malformed(format!("entry {name:?} needs two integer data_offsets")))?;
        if offsets.1 < offsets.0 {
            return Err(malformed(format!("entry {name:?} has end < begin")));
        }
        let expected = shape
            .iter()
            .try_fold(dtype.size_in_bytes() as u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| malformed(format!("entry {name:?} shape overflows")))?;
        if offsets.1 - offsets.0 != expected {
            return Err(malformed(format!(
                "entry {name:?} spans {} bytes but shape {shape:?} of {dtype} needs {expected}",
                offsets.1 - offsets.0
            )));
        }
        entries.insert(
            name.clone(),
            TensorMeta {
                name,
                dtype,
                shape,
                data_offsets: offsets,
            },
        );
    }
    Ok((entries, metadata))
}

fn validate_layout(path: &Path, entries: &BTreeMap<String, TensorMeta>, data_len: u64) -> Result<(), ArchiveError> {
    let mut regions: Vec<&TensorMeta> = entries.values().collect();
    regions.sort_by_key(|m| (m.data_offsets.0, m.data_offsets.1));

    let mut cursor = 0u64;
    let mut previous: Option<&TensorMeta> = None;
    for meta in regions {
        let (begin, end) = meta.data_offsets;
        if begin < cursor {
            return Err(ArchiveError::OverlappingRegions {
                path: path.to_path_buf(),
                first: previous.map(|p| p.name.clone()).unwrap_or_default(),
                second: meta.name.clone(),
            });
        }
        if begin > cursor {
            return Err(ArchiveError::MalformedHeader {
                path: path.to_path_buf(),
                reason: format!("gap before tensor {:?} at offset {cursor}", meta.name),
            });
        }
        cursor = end;
        previous = Some(meta);
    }
    if cursor > data_len {
        return Err(ArchiveError::TruncatedFile {
            path: path.to_path_buf(),
            expected: cursor,
            actual: data_len,
        });
    }
    if cursor < data_len {
        return Err(ArchiveError::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("{} trailing bytes after the last tensor", data_len - cursor),
        });
    }
    Ok(())
}

/// Header line for one tensor, used to lay out a file before its data is known.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
}

/// Writes an archive tensor by tensor. The header is fixed up front, so the
/// data must be supplied in exactly the order of the specs. The file appears
/// at its final path only after [`ArchiveWriter::finish`].
pub struct ArchiveWriter {
    final_path: PathBuf,
    temp_path: PathBuf,
    out: BufWriter<File>,
    specs: Vec<TensorSpec>,
    next: usize,
    scratch: Vec<u8>,
}

impl ArchiveWriter {
    pub fn create(
        path: impl AsRef<Path>,
        specs: Vec<TensorSpec>,
        metadata: Option<&Metadata>,
    ) -> Result<Self, ArchiveError> {
        let final_path = path.as_ref().to_path_buf();
        let mut header = Map::new();
        if let Some(metadata) = metadata {
            header.insert(
                METADATA_KEY.to_string(),
                serde_json::to_value(metadata).expect("string map serializes"),
            );
        }
        let mut offset = 0u64;
        for spec in &specs {
            if spec.name.is_empty() || spec.name == METADATA_KEY {
                return Err(ArchiveError::InvalidEntry {
                    name: spec.name.clone(),
                    reason: "reserved or empty name".into(),
                });
            }
            let len = spec.shape.iter().product::<usize>() as u64 * spec.dtype.size_in_bytes() as u64;
            let previous = header.insert(
                spec.name.clone(),
                serde_json::json!({
                    "dtype": spec.dtype.as_str(),
                    "shape": spec.shape,
                    "data_offsets": [offset, offset + len],
                }),
            );
            if previous.is_some() {
                return Err(ArchiveError::DuplicateName(spec.name.clone()));
            }
            offset += len;
        }
        let header_bytes = serde_json::to_vec(&Value::Object(header)).expect("header serializes");

        let temp_path = temp_sibling(&final_path);
        let file = File::create(&temp_path).map_err(io_err(&temp_path))?;
        let mut out = BufWriter::new(file);
        out.write_all(&(header_bytes.len() as u64).to_le_bytes())
            .and_then(|_| out.write_all(&header_bytes))
            .map_err(io_err(&temp_path))?;
        Ok(Self {
            final_path,
            temp_path,
            out,
            specs,
            next: 0,
            scratch: Vec::new(),
        })
    }

    /// Appends the next tensor's values, narrowing to its declared dtype.
    pub fn write_tensor(&mut self, name: &str, values: &[f64]) -> Result<(), ArchiveError> {
        let spec = self.specs.get(self.next).ok_or_else(|| ArchiveError::InvalidEntry {
            name: name.to_string(),
            reason: "more tensors written than declared".into(),
        })?;
        if spec.name != name {
            return Err(ArchiveError::InvalidEntry {
                name: name.to_string(),
                reason: format!("expected tensor {:?} next", spec.name),
            });
        }
        let expected = spec.shape.iter().product::<usize>();
        if values.len() != expected {
            return Err(ArchiveError::InvalidEntry {
                name: name.to_string(),
                reason: format!("{} values for shape {:?}", values.len(), spec.shape),
            });
        }
        self.scratch.clear();
        spec.dtype.encode_into(values, &mut self.scratch);
        self.out.write_all(&self.scratch).map_err(io_err(&self.temp_path))?;
        self.next += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<TensorArchive, ArchiveError> {
        if self.next != self.specs.len() {
            let missing = self.specs[self.next].name.clone();
            let _ = fs::remove_file(&self.temp_path);
            return Err(ArchiveError::InvalidEntry {
                name: missing,
                reason: "declared but never written".into(),
            });
        }
        self.out.flush().map_err(io_err(&self.temp_path))?;
        let file = self.out.into_inner().map_err(|e| ArchiveError::Io {
            path: self.temp_path.clone(),
            source: e.into_error(),
        })?;
        file.sync_all().map_err(io_err(&self.temp_path))?;
        drop(file);
        fs::rename(&self.temp_path, &self.final_path).map_err(io_err(&self.final_path))?;
        TensorArchive::open(&self.final_path)
    }
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp.{}", std::process::id()));
    path.with_file_name(name)
}

/// Writes a whole archive. Data is laid out in the order of `entries`.
pub fn write_archive(
    path: impl AsRef<Path>,
    entries: &[TensorEntry],
    metadata: Option<&Metadata>,
) -> Result<TensorArchive, ArchiveError> {
    let specs = entries
        .iter()
        .map(|e| TensorSpec {
            name: e.name.clone(),
            dtype: e.dtype,
            shape: e.shape.clone(),
        })
        .collect();
    let mut writer = ArchiveWriter::create(path, specs, metadata)?;
    for entry in entries {
        writer.write_tensor(&entry.name, &entry.values)?;
    }
    writer.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn raw_file(header: &str, data: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn minimal_single_tensor() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        fs::write(
            &path,
            raw_file(
                r#"{"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#,
                &[0x00, 0x00, 0x80, 0x3F],
            ),
        )
        .unwrap();
        let archive = TensorArchive::open(&path).unwrap();
        assert_eq!(archive.len(), 1);
        assert_eq!(archive.meta("w").unwrap().byte_len(), 4);
        assert_eq!(archive.read_tensor("w").unwrap().values, vec![1.0]);
    }

    #[test]
    fn decodes_each_dtype() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.safetensors");
        let header = r#"{"a":{"dtype":"BF16","shape":[],"data_offsets":[0,2]},"b":{"dtype":"F16","shape":[1],"data_offsets":[2,4]}}"#;
        fs::write(&path, raw_file(header, &[0x80, 0x3F, 0x00, 0x3C])).unwrap();
        let archive = TensorArchive::open(&path).unwrap();
        assert_eq!(archive.read_tensor("a").unwrap().values, vec![1.0]);
        assert_eq!(archive.read_tensor("b").unwrap().values, vec![1.0]);
        assert!(archive.meta("a").unwrap().shape.is_empty());
    }

    #[test]
    fn rejects_overlapping_regions() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("o.safetensors");
        let header = r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#;
        fs::write(&path, raw_file(header, &[0u8; 8])).unwrap();
        assert!(matches!(
            TensorArchive::open(&path),
            Err(ArchiveError::OverlappingRegions { .. })
        ));
    }

    #[test]
    fn rejects_bad_headers() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.safetensors");

        fs::write(&path, raw_file("{not json", &[])).unwrap();
        assert!(matches!(
            TensorArchive::open(&path),
            Err(ArchiveError::MalformedHeader { .. })
        ));

        fs::write(
            &path,
            raw_file(r#"{"a":{"dtype":"I8","shape":[1],"data_offsets":[0,1]}}"#, &[0]),
        )
        .unwrap();
        assert!(matches!(
            TensorArchive::open(&path),
            Err(ArchiveError::UnknownDtype { .. })
        ));

        fs::write(
            &path,
            raw_file(r#"{"a":{"dtype":"F32","shape":[4],"data_offsets":[0,16]}}"#, &[0; 8]),
        )
        .unwrap();
        assert!(matches!(
            TensorArchive::open(&path),
            Err(ArchiveError::TruncatedFile { .. })
        ));

        let mut bytes = 1_000u64.to_le_bytes().to_vec();
        bytes.extend_from_slice(b"{}");
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            TensorArchive::open(&path),
            Err(ArchiveError::TruncatedFile { .. })
        ));

        fs::write(
            &path,
            raw_file(r#"{"a":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}}"#, &[0; 8]),
        )
        .unwrap();
        assert!(matches!(
            TensorArchive::open(&path),
            Err(ArchiveError::MalformedHeader { .. })
        ));
    }

    #[test]
    fn write_then_read_preserves_entries_and_metadata() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("rt.safetensors");
        let metadata: Metadata = [("format".to_string(), "pt".to_string())].into();
        let entries = vec![
            TensorEntry::new("b", Dtype::F32, vec![2, 2], vec![1.0, -2.0, 3.5, 0.0]),
            TensorEntry::new("a", Dtype::BF16, vec![3], vec![1.0, 0.5, -4.0]),
        ];
        let archive = write_archive(&path, &entries, Some(&metadata)).unwrap();
        assert_eq!(archive.metadata(), Some(&metadata));
        // data is laid out in entry order
        assert_eq!(archive.meta("b").unwrap().data_offsets, (0, 16));
        assert_eq!(archive.meta("a").unwrap().data_offsets, (16, 22));
        let names: Vec<_> = archive.iter_tensors().map(|r| r.unwrap().0).collect();
        assert_eq!(names, ["a", "b"]);
        assert_eq!(archive.read_tensor("b").unwrap().values, entries[0].values);
        assert_eq!(archive.read_raw("a").unwrap(), [0x80, 0x3F, 0x00, 0x3F, 0x80, 0xC0]);
    }

    #[test]
    fn bf16_write_rounds_to_nearest_even() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bf.safetensors");
        let archive = write_archive(
            &path,
            &[TensorEntry::new(
                "x",
                Dtype::BF16,
                vec![2],
                vec![1.0, 1.0 + 2f64.powi(-9)],
            )],
            None,
        )
        .unwrap();
        assert_eq!(archive.read_raw("x").unwrap(), [0x80, 0x3F, 0x80, 0x3F]);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let dir = tempdir().unwrap();
        let entries = vec![
            TensorEntry::new("a", Dtype::F32, vec![1], vec![1.0]),
            TensorEntry::new("a", Dtype::F32, vec![1], vec![2.0]),
        ];
        assert!(matches!(
            write_archive(dir.path().join("dup"), &entries, None),
            Err(ArchiveError::DuplicateName(_))
        ));
    }

    #[test]
    fn empty_archive_iterates_nothing() {
        let dir = tempdir().unwrap();
        let archive = write_archive(dir.path().join("e"), &[], None).unwrap();
        assert!(archive.is_empty());
        assert_eq!(archive.iter_tensors().count(), 0);
    }

    #[test]
    fn missing_name() {
        let dir = tempdir().unwrap();
        let archive = write_archive(dir.path().join("m"), &[], None).unwrap();
        assert!(matches!(
            archive.read_tensor("nope"),
            Err(ArchiveError::NameNotFound(_))
        ));
    }

    #[test]
    fn writer_enforces_declared_order() {
        let dir = tempdir().unwrap();
        let specs = vec![
            TensorSpec {
                name: "x".into(),
                dtype: Dtype::F32,
                shape: vec![1],
            },
            TensorSpec {
                name: "y".into(),
                dtype: Dtype::F32,
                shape: vec![1],
            },
        ];
        let mut writer = ArchiveWriter::create(dir.path().join("w"), specs, None).unwrap();
        assert!(writer.write_tensor("y", &[1.0]).is_err());
        writer.write_tensor("x", &[1.0]).unwrap();
        assert!(writer.finish().is_err());
        assert!(!dir.path().join("w").exists());
    }
}
