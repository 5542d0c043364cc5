//! Safetensors-layout checkpoint reading and transformer block grouping.
//!
//! ```text
//! [0, 8)        header length N, little-endian u64
//! [8, 8 + N)    UTF-8 object: name -> {dtype, shape, data_offsets: [begin, end]}
//! [8 + N, ..)   raw tensor data, offsets relative to this point
//! ```
//!
//! Only float tensors (F64, F32, F16, BF16) are accepted. Everything is
//! converted to `f64` on load.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported dtype `{dtype}` for tensor `{name}`")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("tensor `{name}` byte range [{begin}, {end}) lies outside the data region of {data_len} bytes")]
    OutOfBounds {
        name: String,
        begin: u64,
        end: u64,
        data_len: u64,
    },
    #[error("tensors `{first}` and `{second}` have overlapping byte ranges")]
    Overlap { first: String, second: String },
    #[error("tensor `{name}` declares {declared} bytes but shape and dtype require {expected}")]
    LengthMismatch {
        name: String,
        declared: u64,
        expected: u64,
    },
    #[error("truncated read for tensor `{name}`: expected {expected} bytes, got {got}")]
    Truncated {
        name: String,
        expected: u64,
        got: u64,
    },
    #[error("tensor `{name}` contains NaN at element {index}; entropy is undefined")]
    NanElement { name: String, index: usize },
    #[error("no tensors match the block grouping rule")]
    NoMatchingTensors,
    #[error("tensor `{name}` matches both the embedding and the layer rule (layer {layer})")]
    ConflictingKinds { name: String, layer: u64 },
    #[error("transformer layer ids are not contiguous: missing layer {missing}")]
    NonContiguousLayers { missing: u64 },
    #[error("invalid grouping pattern: {0}")]
    Pattern(#[from] regex::Error),
}

pub type Result<T> = std::result::Result<T, TensorIoError>;

/// Element type of a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "F64")]
    F64,
    #[serde(rename = "F32")]
    F32,
    #[serde(rename = "F16")]
    F16,
    #[serde(rename = "BF16")]
    BF16,
}

impl Dtype {
    pub fn size_of(self) -> u64 {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Dtype::F64 => "F64",
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
        }
    }

    fn parse(tag: &str) -> Option<Self> {
        match tag {
            "F64" => Some(Dtype::F64),
            "F32" => Some(Dtype::F32),
            "F16" => Some(Dtype::F16),
            "BF16" => Some(Dtype::BF16),
            _ => None,
        }
    }

    /// Decodes one little-endian element.
    fn decode(self, bytes: &[u8]) -> f64 {
        match self {
            Dtype::F64 => f64::from_le_bytes(bytes.try_into().expect("8-byte chunk")),
            Dtype::F32 => f32::from_le_bytes(bytes.try_into().expect("4-byte chunk")) as f64,
            Dtype::F16 => half::f16::from_le_bytes([bytes[0], bytes[1]]).to_f64(),
            Dtype::BF16 => half::bf16::from_le_bytes([bytes[0], bytes[1]]).to_f64(),
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// A named tensor inside a container. `byte_offset` is relative to the start
/// of the data region, not the file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<u64>,
    pub byte_offset: u64,
    pub byte_length: u64,
}

impl TensorMeta {
    pub fn num_elements(&self) -> u64 {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Embedding,
    Transformer,
    Other,
}

/// Tensors that share one execution position in the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockGroup {
    pub exec_index: u64,
    pub kind: BlockKind,
    pub num_parameters: u64,
    pub tensors: Vec<TensorMeta>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSchema {
    pub model_name: String,
    /// Count of transformer blocks only.
    pub num_blocks: u64,
    pub blocks: Vec<BlockGroup>,
}

impl ModelSchema {
    pub fn transformer_blocks(&self) -> impl Iterator<Item = &BlockGroup> {
        self.blocks
            .iter()
            .filter(|b| b.kind == BlockKind::Transformer)
    }
}

/// An opened container: metadata plus the location of its data region.
#[derive(Debug, Clone)]
pub struct Container {
    path: PathBuf,
    data_start: u64,
    tensors: Vec<TensorMeta>,
    metadata: BTreeMap<String, String>,
}

impl Container {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let io_err = |source| TensorIoError::Io {
            path: path.clone(),
            source,
        };
        let mut file = File::open(&path).map_err(io_err)?;
        let file_len = file.metadata().map_err(io_err)?.len();

        let mut len_buf = [0u8; 8];
        file.read_exact(&mut len_buf).map_err(|_| {
            TensorIoError::MalformedHeader("file shorter than the 8-byte length prefix".into())
        })?;
        let header_len = u64::from_le_bytes(len_buf);
        if header_len > file_len.saturating_sub(8) {
            return Err(TensorIoError::MalformedHeader(format!(
                "header length {header_len} exceeds file size {file_len}"
            )));
        }
        let mut header = vec![0u8; header_len as usize];
        file.read_exact(&mut header).map_err(io_err)?;
        let data_start = 8 + header_len;
        let (tensors, metadata) = parse_header(&header, file_len - data_start)?;
        Ok(Self {
            path,
            data_start,
            tensors,
            metadata,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Tensors in header order.
    pub fn tensors(&self) -> &[TensorMeta] {
        &self.tensors
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorMeta> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Name stored under `__metadata__.model_name`, else the file stem.
    pub fn model_name(&self) -> String {
        self.metadata.get("model_name").cloned().unwrap_or_else(|| {
            self.path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
    }

    /// Raw little-endian bytes of one tensor. Each call opens its own handle,
    /// so concurrent reads of different tensors are fine.
    pub fn read_bytes(&self, meta: &TensorMeta) -> Result<Vec<u8>> {
        let io_err = |source| TensorIoError::Io {
            path: self.path.clone(),
            source,
        };
        let mut file = File::open(&self.path).map_err(io_err)?;
        file.seek(SeekFrom::Start(self.data_start + meta.byte_offset))
            .map_err(io_err)?;
        let mut buf = Vec::with_capacity(meta.byte_length as usize);
        Read::by_ref(&mut file)
            .take(meta.byte_length)
            .read_to_end(&mut buf)
            .map_err(io_err)?;
        if buf.len() as u64 != meta.byte_length {
            return Err(TensorIoError::Truncated {
                name: meta.name.clone(),
                expected: meta.byte_length,
                got: buf.len() as u64,
            });
        }
        Ok(buf)
    }

    pub fn load_f64(&self, meta: &TensorMeta) -> Result<Vec<f64>> {
        let bytes = self.read_bytes(meta)?;
        load_tensor_as_f64(meta, &bytes)
    }
}

/// Reads a container and returns its tensors in header order.
pub fn open_container(path: impl AsRef<Path>) -> Result<Vec<TensorMeta>> {
    Ok(Container::open(path)?.tensors)
}

#[derive(Deserialize)]
struct RawEntry {
    dtype: String,
    shape: Vec<u64>,
    data_offsets: [u64; 2],
}

fn parse_header(
    header: &[u8],
    data_len: u64,
) -> Result<(Vec<TensorMeta>, BTreeMap<String, String>)> {
    let text = std::str::from_utf8(header)
        .map_err(|e| TensorIoError::MalformedHeader(format!("header is not UTF-8: {e}")))?;
    let entries = serde_json::from_str::<OrderedEntries>(text)
        .map_err(|e| TensorIoError::MalformedHeader(e.to_string()))?
        .0;

    let mut metadata = BTreeMap::new();
    let mut tensors = Vec::with_capacity(entries.len());
    for (name, value) in entries {
        if name == "__metadata__" {
            let map = value.as_object().ok_or_else(|| {
                TensorIoError::MalformedHeader("__metadata__ is not an object".into())
            })?;
            for (k, v) in map {
                let v = v.as_str().ok_or_else(|| {
                    TensorIoError::MalformedHeader(format!("__metadata__.{k} is not a string"))
                })?;
                metadata.insert(k.clone(), v.to_owned());
            }
            continue;
        }
        let entry: RawEntry = serde_json::from_value(value)
            .map_err(|e| TensorIoError::MalformedHeader(format!("tensor `{name}`: {e}")))?;
        let dtype = Dtype::parse(&entry.dtype).ok_or_else(|| TensorIoError::UnsupportedDtype {
            name: name.clone(),
            dtype: entry.dtype.clone(),
        })?;
        let [begin, end] = entry.data_offsets;
        if end < begin || end > data_len {
            return Err(TensorIoError::OutOfBounds {
                name,
                begin,
                end,
                data_len,
            });
        }
        let expected = entry
            .shape
            .iter()
            .try_fold(dtype.size_of(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| {
                TensorIoError::MalformedHeader(format!("tensor `{name}`: size overflow"))
            })?;
        if end - begin != expected {
            return Err(TensorIoError::LengthMismatch {
                name,
                declared: end - begin,
                expected,
            });
        }
        tensors.push(TensorMeta {
            name,
            dtype,
            shape: entry.shape,
            byte_offset: begin,
            byte_length: end - begin,
        });
    }
    check_overlaps(&tensors)?;
    Ok((tensors, metadata))
}

/// Top-level header entries in file order. serde_json's default map sorts
/// keys, which would lose header order.
struct OrderedEntries(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for OrderedEntries {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct Visitor;
        impl<'de> serde::de::Visitor<'de> for Visitor {
            type Value = OrderedEntries;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a header object")
            }
            fn visit_map<A: serde::de::MapAccess<'de>>(
                self,
                mut map: A,
            ) -> std::result::Result<OrderedEntries, A::Error> {
                let mut seen = std::collections::HashSet::new();
                let mut entries = Vec::new();
                while let Some(key) = map.next_key::<String>()? {
                    if !seen.insert(key.clone()) {
                        return Err(serde::de::Error::custom(format!("duplicate key `{key}`")));
                    }
                    entries.push((key, map.next_value::<Value>()?));
                }
                Ok(OrderedEntries(entries))
            }
        }
        d.deserialize_map(Visitor)
    }
}

fn check_overlaps(tensors: &[TensorMeta]) -> Result<()> {
    let mut ranges: Vec<&TensorMeta> = tensors.iter().filter(|t| t.byte_length > 0).collect();
    ranges.sort_by_key(|t| (t.byte_offset, t.byte_length));
    for pair in ranges.windows(2) {
        if pair[0].byte_offset + pair[0].byte_length > pair[1].byte_offset {
            return Err(TensorIoError::Overlap {
                first: pair[0].name.clone(),
                second: pair[1].name.clone(),
            });
        }
    }
    Ok(())
}

/// Converts a tensor's raw bytes to `f64` in row-major storage order.
pub fn load_tensor_as_f64(meta: &TensorMeta, bytes: &[u8]) -> Result<Vec<f64>> {
    decode_elements(meta, bytes)?.collect()
}

/// Streaming decoder over a tensor's bytes. Yields an error and stops at the
/// first NaN.
pub fn decode_elements<'a>(
    meta: &'a TensorMeta,
    bytes: &'a [u8],
) -> Result<impl Iterator<Item = Result<f64>> + Clone + 'a> {
    if (bytes.len() as u64) < meta.byte_length {
        return Err(TensorIoError::Truncated {
            name: meta.name.clone(),
            expected: meta.byte_length,
            got: bytes.len() as u64,
        });
    }
    let width = meta.dtype.size_of() as usize;
    let dtype = meta.dtype;
    Ok(bytes[..meta.byte_length as usize]
        .chunks_exact(width)
        .enumerate()
        .map(move |(index, chunk)| {
            let v = dtype.decode(chunk);
            if v.is_nan() {
                Err(TensorIoError::NanElement {
                    name: meta.name.clone(),
                    index,
                })
            } else {
                Ok(v)
            }
        }))
}

/// A tensor to be written by [`write_container`].
#[derive(Debug, Clone)]
pub struct TensorData {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<u64>,
    pub bytes: Vec<u8>,
}

impl TensorData {
    pub fn from_f32(name: impl Into<String>, shape: Vec<u64>, values: &[f32]) -> Self {
        Self {
            name: name.into(),
            dtype: Dtype::F32,
            shape,
            bytes: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn from_f64(name: impl Into<String>, shape: Vec<u64>, values: &[f64]) -> Self {
        Self {
            name: name.into(),
            dtype: Dtype::F64,
            shape,
            bytes: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }
}

/// Writes tensors contiguously in the given order. The header is padded with
/// spaces to an 8-byte boundary.
pub fn write_container(
    path: impl AsRef<Path>,
    tensors: &[TensorData],
    metadata: &BTreeMap<String, String>,
) -> Result<Vec<TensorMeta>> {
    let path = path.as_ref();
    let mut header = String::from("{");
    let mut metas = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    let mut first = true;
    if !metadata.is_empty() {
        header.push_str("\"__metadata__\":");
        header.push_str(&serde_json::to_string(metadata).expect("string map serializes"));
        first = false;
    }
    for t in tensors {
        let len = t.bytes.len() as u64;
        let expected = t.shape.iter().product::<u64>() * t.dtype.size_of();
        if len != expected {
            return Err(TensorIoError::LengthMismatch {
                name: t.name.clone(),
                declared: len,
                expected,
            });
        }
        if !first {
            header.push(',');
        }
        first = false;
        let entry = serde_json::json!({
            "dtype": t.dtype.tag(),
            "shape": t.shape,
            "data_offsets": [offset, offset + len],
        });
        header.push_str(&serde_json::to_string(&t.name).expect("string serializes"));
        header.push(':');
        header.push_str(&entry.to_string());
        metas.push(TensorMeta {
            name: t.name.clone(),
            dtype: t.dtype,
            shape: t.shape.clone(),
            byte_offset: offset,
            byte_length: len,
        });
        offset += len;
    }
    header.push('}');
    while header.len() % 8 != 0 {
        header.push(' ');
    }

    let io_err = |source| TensorIoError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = std::io::BufWriter::new(File::create(path).map_err(io_err)?);
    file.write_all(&(header.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    file.write_all(header.as_bytes()).map_err(io_err)?;
    for t in tensors {
        file.write_all(&t.bytes).map_err(io_err)?;
    }
    file.flush().map_err(io_err)?;
    Ok(metas)
}

/// Name patterns that map tensors onto blocks.
#[derive(Debug, Clone)]
pub struct GroupingRule {
    /// Must contain one capture group holding the integer layer id.
    pub layer: Regex,
    pub embedding: Regex,
    /// Tensors matching this are left out of entropy analysis (norms).
    pub exclude: Regex,
}

pub const DEFAULT_LAYER_PATTERN: &str = r"(?:^|\.)layers\.(\d+)\.";
pub const DEFAULT_EMBEDDING_PATTERN: &str = r"(?:^|\.)(?:embed[a-z_]*|wte|tok_embeddings)\.";
pub const DEFAULT_EXCLUDE_PATTERN: &str = r"(?i)norm|(?:^|\.)ln_[a-z0-9_]*\.";

impl GroupingRule {
    pub fn new(layer: &str, embedding: &str, exclude: &str) -> Result<Self> {
        let layer = Regex::new(layer)?;
        if layer.captures_len() < 2 {
            return Err(TensorIoError::MalformedHeader(
                "layer pattern needs a capture group for the layer id".into(),
            ));
        }
        Ok(Self {
            layer,
            embedding: Regex::new(embedding)?,
            exclude: Regex::new(exclude)?,
        })
    }

    pub fn with_layer_pattern(layer: &str) -> Result<Self> {
        Self::new(layer, DEFAULT_EMBEDDING_PATTERN, DEFAULT_EXCLUDE_PATTERN)
    }

    fn includes(&self, name: &str) -> bool {
        name.ends_with(".weight") && !self.exclude.is_match(name)
    }
}

impl Default for GroupingRule {
    fn default() -> Self {
        Self::new(
            DEFAULT_LAYER_PATTERN,
            DEFAULT_EMBEDDING_PATTERN,
            DEFAULT_EXCLUDE_PATTERN,
        )
        .expect("default patterns compile")
    }
}

/// Groups weight tensors into blocks. Embedding is exec_index 1, layer `k` is
/// exec_index `k + 2`, and any remaining weights (output head) share one block
/// placed after the last layer.
pub fn group_blocks(
    model_name: impl Into<String>,
    tensors: &[TensorMeta],
    rule: &GroupingRule,
) -> Result<ModelSchema> {
    let mut layers: BTreeMap<u64, Vec<TensorMeta>> = BTreeMap::new();
    let mut embedding = Vec::new();
    let mut other = Vec::new();

    for t in tensors {
        if !rule.includes(&t.name) {
            log::info!("excluding `{}` from entropy analysis", t.name);
            continue;
        }
        let layer = rule
            .layer
            .captures(&t.name)
            .and_then(|c| c.get(1))
            .map(|m| {
                m.as_str().parse::<u64>().map_err(|_| {
                    TensorIoError::MalformedHeader(format!(
                        "layer id in `{}` is not an integer",
                        t.name
                    ))
                })
            })
            .transpose()?;
        let is_embedding = rule.embedding.is_match(&t.name);
        match (layer, is_embedding) {
            (Some(layer), true) => {
                return Err(TensorIoError::ConflictingKinds {
                    name: t.name.clone(),
                    layer,
                })
            }
            (Some(layer), false) => layers.entry(layer).or_default().push(t.clone()),
            (None, true) => embedding.push(t.clone()),
            (None, false) => other.push(t.clone()),
        }
    }
    if layers.is_empty() && embedding.is_empty() {
        return Err(TensorIoError::NoMatchingTensors);
    }
    if let Some(missing) = layers
        .keys()
        .enumerate()
        .find_map(|(i, &k)| (k != i as u64).then_some(i as u64))
    {
        return Err(TensorIoError::NonContiguousLayers { missing });
    }

    let mut blocks = Vec::with_capacity(layers.len() + 2);
    if !embedding.is_empty() {
        blocks.push(make_block(1, BlockKind::Embedding, embedding));
    }
    let num_blocks = layers.len() as u64;
    for (k, tensors) in layers {
        blocks.push(make_block(k + 2, BlockKind::Transformer, tensors));
    }
    if !other.is_empty() {
        blocks.push(make_block(num_blocks + 2, BlockKind::Other, other));
    }
    Ok(ModelSchema {
        model_name: model_name.into(),
        num_blocks,
        blocks,
    })
}

fn make_block(exec_index: u64, kind: BlockKind, mut tensors: Vec<TensorMeta>) -> BlockGroup {
    tensors.sort_by(|a, b| a.name.cmp(&b.name));
    BlockGroup {
        exec_index,
        kind,
        num_parameters: tensors.iter().map(TensorMeta::num_elements).sum(),
        tensors,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw_container(header: &str, data_len: usize) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(&(header.len() as u64).to_le_bytes()).unwrap();
        f.write_all(header.as_bytes()).unwrap();
        f.write_all(&vec![0u8; data_len]).unwrap();
        f.flush().unwrap();
        f
    }

    fn meta(name: &str, shape: Vec<u64>) -> TensorMeta {
        let n: u64 = shape.iter().product();
        TensorMeta {
            name: name.into(),
            dtype: Dtype::F32,
            shape,
            byte_offset: 0,
            byte_length: n * 4,
        }
    }

    #[test]
    fn single_f32_tensor() {
        let f = raw_container(
            r#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#,
            16,
        );
        let tensors = open_container(f.path()).unwrap();
        assert_eq!(tensors.len(), 1);
        assert_eq!(tensors[0].byte_length, 16);
        assert_eq!(tensors[0].shape, vec![2, 2]);
    }

    #[test]
    fn offsets_past_end_of_file() {
        let f = raw_container(
            r#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#,
            8,
        );
        assert!(matches!(
            open_container(f.path()),
            Err(TensorIoError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn overlapping_ranges() {
        let f = raw_container(
            r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}}"#,
            12,
        );
        match open_container(f.path()) {
            Err(TensorIoError::Overlap { first, second }) => {
                assert_eq!((first.as_str(), second.as_str()), ("a", "b"))
            }
            other => panic!("expected overlap error, got {other:?}"),
        }
    }

    #[test]
    fn adjacent_ranges_do_not_overlap() {
        let f = raw_container(
            r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[1],"data_offsets":[8,12]}}"#,
            12,
        );
        assert_eq!(open_container(f.path()).unwrap().len(), 2);
    }

    #[test]
    fn unsupported_dtype_and_garbage_header() {
        let f = raw_container(
            r#"{"a":{"dtype":"I8","shape":[2],"data_offsets":[0,2]}}"#,
            2,
        );
        assert!(matches!(
            open_container(f.path()),
            Err(TensorIoError::UnsupportedDtype { .. })
        ));
        let f = raw_container("{not json", 0);
        assert!(matches!(
            open_container(f.path()),
            Err(TensorIoError::MalformedHeader(_))
        ));
    }

    #[test]
    fn header_order_is_preserved() {
        let f = raw_container(
            r#"{"z":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"a":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#,
            8,
        );
        let names: Vec<_> = open_container(f.path())
            .unwrap()
            .into_iter()
            .map(|t| t.name)
            .collect();
        assert_eq!(names, ["z", "a"]);
    }

    #[test]
    fn decode_dtypes() {
        let m = TensorMeta {
            dtype: Dtype::F32,
            ..meta("w", vec![2])
        };
        let bytes: Vec<u8> = [1.0f32, 2.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        assert_eq!(load_tensor_as_f64(&m, &bytes).unwrap(), vec![1.0, 2.0]);

        let bf = TensorMeta {
            dtype: Dtype::BF16,
            byte_length: 2,
            ..meta("b", vec![1])
        };
        let bytes = half::bf16::from_f64(1.5).to_le_bytes();
        assert_eq!(load_tensor_as_f64(&bf, &bytes).unwrap(), vec![1.5]);
    }

    #[test]
    fn f16_rounding_of_one_tenth() {
        // 0.1 = 1.6 * 2^-4; 10-bit mantissa: round(0.6 * 1024) = 614.
        let oracle = (1.0 + 614.0 / 1024.0) * 2f64.powi(-4);
        assert_eq!(oracle, 0.0999755859375);
        let m = TensorMeta {
            dtype: Dtype::F16,
            byte_length: 2,
            ..meta("h", vec![1])
        };
        let bytes = half::f16::from_f64(0.1).to_le_bytes();
        assert_eq!(load_tensor_as_f64(&m, &bytes).unwrap(), vec![oracle]);
    }

    #[test]
    fn nan_and_truncation() {
        let m = meta("w", vec![2]);
        let bytes: Vec<u8> = [1.0f32, f32::NAN]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        assert!(matches!(
            load_tensor_as_f64(&m, &bytes),
            Err(TensorIoError::NanElement { index: 1, .. })
        ));
        assert!(matches!(
            load_tensor_as_f64(&m, &bytes[..4]),
            Err(TensorIoError::Truncated { .. })
        ));
    }

    #[test]
    fn grouping_assigns_exec_indices() {
        let tensors = vec![
            meta("embed.weight", vec![4, 2]),
            meta("layers.0.q.weight", vec![2, 2]),
            meta("layers.1.q.weight", vec![2, 2]),
        ];
        let schema = group_blocks("m", &tensors, &GroupingRule::default()).unwrap();
        let idx: Vec<_> = schema.blocks.iter().map(|b| b.exec_index).collect();
        assert_eq!(idx, [1, 2, 3]);
        assert_eq!(schema.num_blocks, 2);
        assert_eq!(schema.blocks[0].kind, BlockKind::Embedding);
        assert_eq!(schema.blocks[0].num_parameters, 8);
    }

    #[test]
    fn grouping_skips_norms_and_biases() {
        let tensors = vec![
            meta("layers.0.input_norm.weight", vec![2]),
            meta("layers.0.q.weight", vec![2, 2]),
            meta("layers.0.q.bias", vec![2]),
            meta("layers.0.ln_1.weight", vec![2]),
        ];
        let schema = group_blocks("m", &tensors, &GroupingRule::default()).unwrap();
        let names: Vec<_> = schema.blocks[0]
            .tensors
            .iter()
            .map(|t| t.name.as_str())
            .collect();
        assert_eq!(names, ["layers.0.q.weight"]);
        assert_eq!(schema.blocks[0].num_parameters, 4);
    }

    #[test]
    fn thirty_two_layers_span_two_to_thirty_three() {
        let tensors: Vec<_> = (0..32)
            .map(|k| meta(&format!("model.layers.{k}.mlp.weight"), vec![1]))
            .collect();
        let schema = group_blocks("m", &tensors, &GroupingRule::default()).unwrap();
        let idx: Vec<_> = schema.transformer_blocks().map(|b| b.exec_index).collect();
        assert_eq!(idx, (2..=33).collect::<Vec<_>>());
    }

    #[test]
    fn grouping_errors() {
        let rule = GroupingRule::default();
        assert!(matches!(
            group_blocks("m", &[meta("lm_head.weight", vec![1])], &rule),
            Err(TensorIoError::NoMatchingTensors)
        ));
        assert!(matches!(
            group_blocks("m", &[meta("layers.0.embed.weight", vec![1])], &rule),
            Err(TensorIoError::ConflictingKinds { layer: 0, .. })
        ));
        assert!(matches!(
            group_blocks(
                "m",
                &[
                    meta("layers.0.a.weight", vec![1]),
                    meta("layers.2.a.weight", vec![1])
                ],
                &rule
            ),
            Err(TensorIoError::NonContiguousLayers { missing: 1 })
        ));
    }

    #[test]
    fn custom_layer_pattern() {
        let rule = GroupingRule::with_layer_pattern(r"^h\.(\d+)\.").unwrap();
        let tensors = vec![
            meta("h.0.attn.weight", vec![3]),
            meta("h.1.attn.weight", vec![3]),
        ];
        let schema = group_blocks("gpt", &tensors, &rule).unwrap();
        assert_eq!(schema.num_blocks, 2);
        assert!(GroupingRule::with_layer_pattern(r"layers\.\d+").is_err());
    }
}
