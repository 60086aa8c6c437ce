//! Reading and writing single-file tensor archives.
//!
//! Layout: an 8-byte little-endian header length `N`, then `N` bytes of JSON
//! metadata, then the raw tensor payload. Each metadata entry names a tensor
//! and records its dtype, shape and `data_offsets` (a byte range relative to
//! the start of the payload). An optional `__metadata__` entry holds a flat
//! string map.
//!
//! Opening an archive only parses the header. Tensor bytes are read on
//! demand, one tensor at a time, so per-layer pipelines never hold more than
//! the layers they are currently working on.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use globset::{Glob, GlobSet, GlobSetBuilder};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::bf16::Bf16Word;
use crate::error::{Error, Result};

const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;
const METADATA_KEY: &str = "__metadata__";

/// Element types that may appear in an archive. Only `BF16`, `F16` and `F32`
/// can be materialized as [`WeightMatrix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[allow(non_camel_case_types)]
pub enum Dtype {
    BOOL,
    U8,
    I8,
    F8_E5M2,
    F8_E4M3,
    I16,
    U16,
    F16,
    BF16,
    I32,
    U32,
    F32,
    F64,
    I64,
    U64,
}

impl Dtype {
    pub fn size(self) -> usize {
        use Dtype::*;
        match self {
            BOOL | U8 | I8 | F8_E5M2 | F8_E4M3 => 1,
            I16 | U16 | F16 | BF16 => 2,
            I32 | U32 | F32 => 4,
            F64 | I64 | U64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        use Dtype::*;
        match self {
            BOOL => "BOOL",
            U8 => "U8",
            I8 => "I8",
            F8_E5M2 => "F8_E5M2",
            F8_E4M3 => "F8_E4M3",
            I16 => "I16",
            U16 => "U16",
            F16 => "F16",
            BF16 => "BF16",
            I32 => "I32",
            U32 => "U32",
            F32 => "F32",
            F64 => "F64",
            I64 => "I64",
            U64 => "U64",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        use Dtype::*;
        Some(match s {
            "BOOL" => BOOL,
            "U8" => U8,
            "I8" => I8,
            "F8_E5M2" => F8_E5M2,
            "F8_E4M3" => F8_E4M3,
            "I16" => I16,
            "U16" => U16,
            "F16" => F16,
            "BF16" => BF16,
            "I32" => I32,
            "U32" => U32,
            "F32" => F32,
            "F64" => F64,
            "I64" => I64,
            "U64" => U64,
            _ => return None,
        })
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Index entry for one tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Absolute byte offset of the first payload byte in the file.
    pub offset: u64,
    pub byte_len: u64,
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }
}

/// An opened archive. Immutable after [`open_checkpoint`]; share it freely
/// across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointHandle {
    path: PathBuf,
    names: Vec<String>,
    infos: Vec<TensorInfo>,
    lookup: HashMap<String, usize>,
    metadata: BTreeMap<String, String>,
    total_params: usize,
}

fn parse_err(msg: impl Into<String>) -> Error {
    Error::Parse(msg.into())
}

/// Parses the header and builds the tensor index without touching payloads.
pub fn open_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointHandle> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    if file_len < 8 {
        return Err(parse_err(format!(
            "{}: file is {file_len} bytes, too short for a header",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|e| Error::io(path, e))?;
    let header_len = u64::from_le_bytes(len_bytes);
    if header_len == 0 || header_len > MAX_HEADER_LEN || header_len > file_len - 8 {
        return Err(parse_err(format!(
            "{}: declared header length {header_len} does not fit a {file_len}-byte file",
            path.display()
        )));
    }
    let mut header = vec![0u8; header_len as usize];
    file.read_exact(&mut header)
        .map_err(|e| Error::io(path, e))?;
    let data_start = 8 + header_len;
    let payload_len = file_len - data_start;

    let root: Value = serde_json::from_slice(&header)
        .map_err(|e| parse_err(format!("{}: header is not valid JSON: {e}", path.display())))?;
    let Value::Object(entries) = root else {
        return Err(parse_err("header must be a JSON object"));
    };

    let mut handle = CheckpointHandle {
        path: path.to_path_buf(),
        names: Vec::new(),
        infos: Vec::new(),
        lookup: HashMap::new(),
        metadata: BTreeMap::new(),
        total_params: 0,
    };
    for (name, value) in entries {
        if name == METADATA_KEY {
            handle.metadata = parse_metadata(&value)?;
            continue;
        }
        let info = parse_entry(&name, &value, data_start, payload_len)?;
        handle.total_params += info.numel();
        handle.lookup.insert(name.clone(), handle.names.len());
        handle.names.push(name);
        handle.infos.push(info);
    }
    Ok(handle)
}

fn parse_metadata(value: &Value) -> Result<BTreeMap<String, String>> {
    let Value::Object(map) = value else {
        return Err(parse_err("__metadata__ must be an object"));
    };
    map.iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k.clone(), s.clone())),
            _ => Err(parse_err(format!(
                "__metadata__ value for `{k}` is not a string"
            ))),
        })
        .collect()
}

fn parse_entry(name: &str, value: &Value, data_start: u64, payload_len: u64) -> Result<TensorInfo> {
    let obj = value
        .as_object()
        .ok_or_else(|| parse_err(format!("entry `{name}` is not an object")))?;
    let dtype_str = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| parse_err(format!("entry `{name}` lacks a dtype")))?;
    let dtype = Dtype::parse(dtype_str)
        .ok_or_else(|| parse_err(format!("entry `{name}` has unknown dtype {dtype_str}")))?;
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| parse_err(format!("entry `{name}` lacks a shape")))?
        .iter()
        .map(|d| d.as_u64().map(|d| d as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| parse_err(format!("entry `{name}` has a non-integer dimension")))?;
    if !(1..=2).contains(&shape.len()) {
        return Err(parse_err(format!(
            "entry `{name}` has rank {}; only rank-1 and rank-2 tensors are supported",
            shape.len()
        )));
    }
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .filter(|a| a.len() == 2)
        .and_then(|a| Some((a[0].as_u64()?, a[1].as_u64()?)))
        .ok_or_else(|| parse_err(format!("entry `{name}` lacks valid data_offsets")))?;
    let (begin, end) = offsets;
    if begin > end {
        return Err(parse_err(format!(
            "entry `{name}` has reversed data_offsets"
        )));
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| parse_err(format!("entry `{name}` shape overflows")))?;
    let expected = numel as u64 * dtype.size() as u64;
    if end - begin != expected {
        return Err(Error::Integrity(format!(
            "entry `{name}` spans {} bytes but {dtype} {shape:?} needs {expected}",
            end - begin
        )));
    }
    if end > payload_len {
        return Err(Error::Integrity(format!(
            "entry `{name}` ends at payload byte {end}, past the {payload_len}-byte payload"
        )));
    }
    Ok(TensorInfo {
        dtype,
        shape,
        offset: data_start + begin,
        byte_len: end - begin,
    })
}

impl CheckpointHandle {
    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Tensor names in archive order.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn info(&self, name: &str) -> Option<&TensorInfo> {
        self.lookup.get(name).map(|&i| &self.infos[i])
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &TensorInfo)> {
        self.names.iter().map(String::as_str).zip(self.infos.iter())
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn total_params(&self) -> usize {
        self.total_params
    }

    /// Names passing `filter`, in archive order.
    pub fn list_layers(&self, filter: &LayerFilter) -> Vec<String> {
        let Ok(matcher) = filter.matcher() else {
            return Vec::new();
        };
        self.entries()
            .filter(|(name, info)| matcher.accepts(name, info.rank()))
            .map(|(name, _)| name.to_string())
            .collect()
    }

    /// Raw little-endian payload bytes of one tensor.
    pub fn read_raw(&self, name: &str) -> Result<Vec<u8>> {
        let info = self
            .info(name)
            .ok_or_else(|| Error::NotFound(name.to_string()))?;
        let mut file = File::open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        file.seek(SeekFrom::Start(info.offset))
            .map_err(|e| Error::io(&self.path, e))?;
        let mut buf = vec![0u8; info.byte_len as usize];
        file.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => {
                Error::Integrity(format!("payload of `{name}` is truncated"))
            }
            _ => Error::io(&self.path, e),
        })?;
        Ok(buf)
    }

    /// Loads a rank-2 tensor. bf16 payloads stay bf16; f16 payloads are
    /// widened to f32 (with a warning).
    pub fn load_matrix(&self, name: &str) -> Result<WeightMatrix> {
        self.load(name, false)
    }

    /// Loads a rank-1 tensor (a bias or norm scale) as a `1 x n` matrix.
    /// Rank-2 tensors are accepted too.
    pub fn load_vector(&self, name: &str) -> Result<WeightMatrix> {
        self.load(name, true)
    }

    fn load(&self, name: &str, allow_rank1: bool) -> Result<WeightMatrix> {
        let info = self
            .info(name)
            .ok_or_else(|| Error::NotFound(name.to_string()))?;
        let (rows, cols) = match info.shape.as_slice() {
            [m, n] => (*m, *n),
            [n] if allow_rank1 => (1, *n),
            other => {
                return Err(Error::Shape(format!(
                    "`{name}` has shape {other:?}; expected a rank-2 tensor"
                )))
            }
        };
        if !matches!(info.dtype, Dtype::BF16 | Dtype::F16 | Dtype::F32) {
            return Err(Error::UnsupportedDtype {
                layer: name.to_string(),
                dtype: info.dtype.to_string(),
            });
        }
        let bytes = self.read_raw(name)?;
        WeightMatrix::from_le_bytes(name, rows, cols, info.dtype, &bytes)
    }
}

/// Element storage of a [`WeightMatrix`], row-major.
#[derive(Debug, Clone, PartialEq)]
pub enum MatrixData {
    Bf16(Vec<Bf16Word>),
    F32(Vec<f32>),
    /// Derived matrices (reconstructions, edits) computed in double precision.
    F64(Vec<f64>),
}

/// One named 2-D layer, rows = output features, columns = input features.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    pub name: String,
    rows: usize,
    cols: usize,
    data: MatrixData,
    /// dtype the values had on disk; differs from the storage when f16 was
    /// widened to f32.
    source_dtype: Dtype,
}

impl WeightMatrix {
    pub fn new(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        data: MatrixData,
    ) -> Result<Self> {
        let len = match &data {
            MatrixData::Bf16(v) => v.len(),
            MatrixData::F32(v) => v.len(),
            MatrixData::F64(v) => v.len(),
        };
        if len != rows * cols {
            return Err(Error::Shape(format!(
                "{len} values cannot fill a {rows}x{cols} matrix"
            )));
        }
        let source_dtype = match &data {
            MatrixData::Bf16(_) => Dtype::BF16,
            MatrixData::F32(_) => Dtype::F32,
            MatrixData::F64(_) => Dtype::F64,
        };
        Ok(WeightMatrix {
            name: name.into(),
            rows,
            cols,
            data,
            source_dtype,
        })
    }

    /// Rounds each value to bf16.
    pub fn from_f64_as_bf16(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        values: &[f64],
    ) -> Result<Self> {
        let data = values.iter().map(|&v| Bf16Word::from_f64(v)).collect();
        Self::new(name, rows, cols, MatrixData::Bf16(data))
    }

    pub fn from_f64(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        Self::new(name, rows, cols, MatrixData::F64(values))
    }

    pub fn from_le_bytes(
        name: &str,
        rows: usize,
        cols: usize,
        dtype: Dtype,
        bytes: &[u8],
    ) -> Result<Self> {
        let n = rows * cols;
        if bytes.len() != n * dtype.size() {
            return Err(Error::Integrity(format!(
                "`{name}`: {} bytes for {n} {dtype} values",
                bytes.len()
            )));
        }
        let data = match dtype {
            Dtype::BF16 => MatrixData::Bf16(
                bytes
                    .chunks_exact(2)
                    .map(|c| Bf16Word(u16::from_le_bytes([c[0], c[1]])))
                    .collect(),
            ),
            Dtype::F32 => MatrixData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            Dtype::F16 => {
                log::warn!(
                    "`{name}` is stored as f16; widening to f32 (the bf16 probe will refuse it)"
                );
                MatrixData::F32(
                    bytes
                        .chunks_exact(2)
                        .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
                        .collect(),
                )
            }
            other => {
                return Err(Error::UnsupportedDtype {
                    layer: name.to_string(),
                    dtype: other.to_string(),
                })
            }
        };
        let mut m = Self::new(name, rows, cols, data)?;
        m.source_dtype = dtype;
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &MatrixData {
        &self.data
    }

    /// Storage dtype (`F16` sources report `F32`).
    pub fn dtype(&self) -> Dtype {
        match self.data {
            MatrixData::Bf16(_) => Dtype::BF16,
            MatrixData::F32(_) => Dtype::F32,
            MatrixData::F64(_) => Dtype::F64,
        }
    }

    pub fn source_dtype(&self) -> Dtype {
        self.source_dtype
    }

    pub fn as_bf16(&self) -> Option<&[Bf16Word]> {
        match &self.data {
            MatrixData::Bf16(v) => Some(v),
            _ => None,
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.value(i * self.cols + j)
    }

    /// Value at flat row-major index `idx`, widened to f64.
    #[inline]
    pub fn value(&self, idx: usize) -> f64 {
        match &self.data {
            MatrixData::Bf16(v) => v[idx].to_f64(),
            MatrixData::F32(v) => v[idx] as f64,
            MatrixData::F64(v) => v[idx],
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.value(i)).collect()
    }

    pub fn is_finite(&self) -> bool {
        (0..self.len()).all(|i| self.value(i).is_finite())
    }

    /// Payload bytes in the storage dtype, exactly as they would be written.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match &self.data {
            MatrixData::Bf16(v) => v.iter().flat_map(|w| w.0.to_le_bytes()).collect(),
            MatrixData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            MatrixData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    /// Dense f64 copy as a faer matrix.
    pub fn to_mat(&self) -> faer::Mat<f64> {
        faer::Mat::from_fn(self.rows, self.cols, |i, j| self.get(i, j))
    }

    /// Same shape and storage dtype, new values (rounded as needed).
    pub fn with_values(&self, values: &[f64]) -> Result<Self> {
        let data = match self.data {
            MatrixData::Bf16(_) => {
                MatrixData::Bf16(values.iter().map(|&v| Bf16Word::from_f64(v)).collect())
            }
            MatrixData::F32(_) => MatrixData::F32(values.iter().map(|&v| v as f32).collect()),
            MatrixData::F64(_) => MatrixData::F64(values.to_vec()),
        };
        let mut m = Self::new(self.name.clone(), self.rows, self.cols, data)?;
        if self.source_dtype != Dtype::F16 {
            m.source_dtype = self.source_dtype;
        }
        Ok(m)
    }
}

/// Selects tensors by name glob and rank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayerFilter {
    pub include: Vec<String>,
    pub exclude: Vec<String>,
    pub min_rank: usize,
}

impl Default for LayerFilter {
    /// Linear layers only: rank-2 tensors except embeddings and the LM head.
    fn default() -> Self {
        LayerFilter {
            include: vec!["*".into()],
            exclude: vec!["*embed*".into(), "*lm_head*".into()],
            min_rank: 2,
        }
    }
}

impl LayerFilter {
    /// Every tensor, any rank.
    pub fn all() -> Self {
        LayerFilter {
            include: vec!["*".into()],
            exclude: Vec::new(),
            min_rank: 1,
        }
    }

    pub fn include(patterns: &[&str]) -> Self {
        LayerFilter {
            include: patterns.iter().map(|s| s.to_string()).collect(),
            exclude: Vec::new(),
            min_rank: 1,
        }
    }

    pub fn with_exclude(mut self, patterns: &[&str]) -> Self {
        self.exclude.extend(patterns.iter().map(|s| s.to_string()));
        self
    }

    pub fn with_min_rank(mut self, rank: usize) -> Self {
        self.min_rank = rank;
        self
    }

    pub fn validate(&self) -> Result<()> {
        build_globs(&self.include)?;
        build_globs(&self.exclude)?;
        if !(1..=2).contains(&self.min_rank) {
            return Err(Error::Config(format!(
                "min_rank must be 1 or 2, got {}",
                self.min_rank
            )));
        }
        Ok(())
    }

    fn matcher(&self) -> Result<FilterMatcher> {
        Ok(FilterMatcher {
            include: build_globs(&self.include)?,
            exclude: build_globs(&self.exclude)?,
            min_rank: self.min_rank,
        })
    }
}

struct FilterMatcher {
    include: GlobSet,
    exclude: GlobSet,
    min_rank: usize,
}

impl FilterMatcher {
    fn accepts(&self, name: &str, rank: usize) -> bool {
        rank >= self.min_rank && self.include.is_match(name) && !self.exclude.is_match(name)
    }
}

fn build_globs(patterns: &[String]) -> Result<GlobSet> {
    let mut b = GlobSetBuilder::new();
    for p in patterns {
        b.add(Glob::new(p).map_err(|e| Error::Config(format!("bad glob `{p}`: {e}")))?);
    }
    b.build()
        .map_err(|e| Error::Config(format!("bad glob set: {e}")))
}

/// Declared tensor for [`ArchiveWriter`].
#[derive(Debug, Clone)]
pub struct TensorSpec {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
}

/// Streams an archive to disk: the header is written up front from the
/// declared specs, then payloads are appended one tensor at a time in
/// declaration order.
pub struct ArchiveWriter {
    path: PathBuf,
    out: BufWriter<File>,
    specs: Vec<TensorSpec>,
    next: usize,
}

impl ArchiveWriter {
    pub fn create(
        path: impl AsRef<Path>,
        specs: Vec<TensorSpec>,
        metadata: &BTreeMap<String, String>,
    ) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut header = Map::new();
        if !metadata.is_empty() {
            let meta: Map<String, Value> = metadata
                .iter()
                .map(|(k, v)| (k.clone(), Value::String(v.clone())))
                .collect();
            header.insert(METADATA_KEY.into(), Value::Object(meta));
        }
        let mut offset = 0u64;
        for spec in &specs {
            if header.contains_key(&spec.name) {
                return Err(Error::Config(format!("duplicate tensor `{}`", spec.name)));
            }
            let len = spec.shape.iter().product::<usize>() as u64 * spec.dtype.size() as u64;
            header.insert(
                spec.name.clone(),
                serde_json::json!({
                    "dtype": spec.dtype.name(),
                    "shape": spec.shape,
                    "data_offsets": [offset, offset + len],
                }),
            );
            offset += len;
        }
        let mut json = serde_json::to_vec(&Value::Object(header))
            .map_err(|e| Error::Parse(format!("cannot encode header: {e}")))?;
        // pad so the payload starts 8-byte aligned
        while (json.len() + 8) % 8 != 0 {
            json.push(b' ');
        }
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(file);
        out.write_all(&(json.len() as u64).to_le_bytes())
            .and_then(|_| out.write_all(&json))
            .map_err(|e| Error::io(&path, e))?;
        Ok(ArchiveWriter {
            path,
            out,
            specs,
            next: 0,
        })
    }

    /// Appends the payload of the next declared tensor.
    pub fn write_tensor(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let spec = self
            .specs
            .get(self.next)
            .ok_or_else(|| Error::Config(format!("`{name}` was not declared")))?;
        if spec.name != name {
            return Err(Error::Config(format!(
                "expected payload for `{}`, got `{name}`",
                spec.name
            )));
        }
        let expected = spec.shape.iter().product::<usize>() * spec.dtype.size();
        if bytes.len() != expected {
            return Err(Error::Shape(format!(
                "`{name}` payload is {} bytes, declared {expected}",
                bytes.len()
            )));
        }
        self.out
            .write_all(bytes)
            .map_err(|e| Error::io(&self.path, e))?;
        self.next += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if self.next != self.specs.len() {
            return Err(Error::Config(format!(
                "archive closed after {} of {} tensors",
                self.next,
                self.specs.len()
            )));
        }
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Writes a small archive of matrices in one go. Rank-1 tensors can be
/// passed as `1 x n` matrices with `rank1 = true` in the tuple.
pub fn write_archive(
    path: impl AsRef<Path>,
    tensors: &[(&WeightMatrix, bool)],
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let specs = tensors
        .iter()
        .map(|(m, rank1)| TensorSpec {
            name: m.name.clone(),
            dtype: m.dtype(),
            shape: if *rank1 {
                vec![m.cols()]
            } else {
                vec![m.rows(), m.cols()]
            },
        })
        .collect();
    let mut w = ArchiveWriter::create(path, specs, metadata)?;
    for (m, _) in tensors {
        w.write_tensor(&m.name, &m.to_le_bytes())?;
    }
    w.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bf16_matrix(name: &str, rows: usize, cols: usize, vals: &[f32]) -> WeightMatrix {
        WeightMatrix::new(
            name,
            rows,
            cols,
            MatrixData::Bf16(vals.iter().map(|&v| Bf16Word::from_f32(v)).collect()),
        )
        .unwrap()
    }

    fn fixture(dir: &Path) -> PathBuf {
        let q = bf16_matrix(
            "model.layers.0.self_attn.q_proj.weight",
            2,
            2,
            &[1.0, 2.0, 3.0, 4.0],
        );
        let k = bf16_matrix("model.layers.0.self_attn.k_proj.weight", 1, 2, &[5.0, 6.0]);
        let b = bf16_matrix("model.layers.0.self_attn.q_proj.bias", 1, 2, &[0.5, -0.5]);
        let e = bf16_matrix("model.embed_tokens.weight", 3, 2, &[0.0; 6]);
        let p = dir.join("fixture.safetensors");
        write_archive(
            &p,
            &[(&q, false), (&k, false), (&b, true), (&e, false)],
            &BTreeMap::new(),
        )
        .unwrap();
        p
    }

    #[test]
    fn open_and_list() {
        let dir = tempfile::tempdir().unwrap();
        let h = open_checkpoint(fixture(dir.path())).unwrap();
        assert_eq!(h.len(), 4);
        assert_eq!(h.total_params(), 4 + 2 + 2 + 6);
        let q = h.list_layers(&LayerFilter::include(&["*.q_proj.weight"]));
        assert_eq!(q, vec!["model.layers.0.self_attn.q_proj.weight"]);
        let no_embed = h.list_layers(&LayerFilter::all().with_exclude(&["*embed*"]));
        assert_eq!(no_embed.len(), 3);
        let mats = h.list_layers(&LayerFilter::all().with_min_rank(2));
        assert_eq!(mats.len(), 3);
        assert!(mats.iter().all(|n| !n.ends_with("bias")));
        // default filter: linear layers only
        assert_eq!(h.list_layers(&LayerFilter::default()).len(), 2);
    }

    #[test]
    fn archive_order_is_preserved() {
        let dir = tempfile::tempdir().unwrap();
        let h = open_checkpoint(fixture(dir.path())).unwrap();
        assert_eq!(h.names()[3], "model.embed_tokens.weight");
        let again = open_checkpoint(h.path()).unwrap();
        assert_eq!(h, again);
    }

    #[test]
    fn load_exact_bf16_codes() {
        let dir = tempfile::tempdir().unwrap();
        let h = open_checkpoint(fixture(dir.path())).unwrap();
        let m = h
            .load_matrix("model.layers.0.self_attn.q_proj.weight")
            .unwrap();
        assert_eq!(m.dtype(), Dtype::BF16);
        let codes: Vec<u16> = m.as_bf16().unwrap().iter().map(|w| w.0).collect();
        assert_eq!(codes, vec![0x3F80, 0x4000, 0x4040, 0x4080]);
        assert!(matches!(h.load_matrix("missing"), Err(Error::NotFound(_))));
        assert!(matches!(
            h.load_matrix("model.layers.0.self_attn.q_proj.bias"),
            Err(Error::Shape(_))
        ));
        let bias = h
            .load_vector("model.layers.0.self_attn.q_proj.bias")
            .unwrap();
        assert_eq!(bias.shape(), (1, 2));
    }

    #[test]
    fn f32_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let vals = [1.5f32, -0.0, f32::MIN_POSITIVE, 3.25e-20, 7.0, -1e30];
        let m = WeightMatrix::new("w", 2, 3, MatrixData::F32(vals.to_vec())).unwrap();
        let p = dir.path().join("f.safetensors");
        write_archive(&p, &[(&m, false)], &BTreeMap::new()).unwrap();
        let h = open_checkpoint(&p).unwrap();
        let back = h.load_matrix("w").unwrap();
        assert_eq!(back.to_le_bytes(), m.to_le_bytes());
        assert_eq!(h.read_raw("w").unwrap(), m.to_le_bytes());
    }

    #[test]
    fn f16_is_widened() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.safetensors");
        let specs = vec![TensorSpec {
            name: "w".into(),
            dtype: Dtype::F16,
            shape: vec![1, 2],
        }];
        let mut w = ArchiveWriter::create(&p, specs, &BTreeMap::new()).unwrap();
        let bytes: Vec<u8> = [half::f16::from_f32(0.5), half::f16::from_f32(-2.0)]
            .iter()
            .flat_map(|h| h.to_le_bytes())
            .collect();
        w.write_tensor("w", &bytes).unwrap();
        w.finish().unwrap();
        let m = open_checkpoint(&p).unwrap().load_matrix("w").unwrap();
        assert_eq!(m.dtype(), Dtype::F32);
        assert_eq!(m.source_dtype(), Dtype::F16);
        assert_eq!(m.to_f64_vec(), vec![0.5, -2.0]);
    }

    #[test]
    fn unsupported_dtype() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.safetensors");
        let specs = vec![TensorSpec {
            name: "ids".into(),
            dtype: Dtype::I64,
            shape: vec![2, 1],
        }];
        let mut w = ArchiveWriter::create(&p, specs, &BTreeMap::new()).unwrap();
        w.write_tensor("ids", &[0u8; 16]).unwrap();
        w.finish().unwrap();
        let h = open_checkpoint(&p).unwrap();
        assert!(matches!(
            h.load_matrix("ids"),
            Err(Error::UnsupportedDtype { .. })
        ));
    }

    #[test]
    fn empty_file_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.safetensors");
        std::fs::write(&p, b"").unwrap();
        assert!(matches!(open_checkpoint(&p), Err(Error::Parse(_))));
        std::fs::write(&p, [5u8, 0, 0, 0, 0, 0, 0, 0, b'{', b'}']).unwrap();
        assert!(matches!(open_checkpoint(&p), Err(Error::Parse(_))));
        std::fs::write(&p, [2u8, 0, 0, 0, 0, 0, 0, 0, b'[', b']']).unwrap();
        assert!(matches!(open_checkpoint(&p), Err(Error::Parse(_))));
    }

    #[test]
    fn range_past_eof_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trunc.safetensors");
        let header = br#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0u8; 8]); // only half the payload
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(open_checkpoint(&p), Err(Error::Integrity(_))));
    }

    #[test]
    fn inconsistent_range_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.safetensors");
        let header = br#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,12]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0u8; 16]);
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(open_checkpoint(&p), Err(Error::Integrity(_))));
    }

    #[test]
    fn rank3_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r3.safetensors");
        let header = br#"{"w":{"dtype":"U8","shape":[1,1,1],"data_offsets":[0,1]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        bytes.push(0);
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(open_checkpoint(&p), Err(Error::Parse(_))));
    }

    #[test]
    fn metadata_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = bf16_matrix("w", 1, 1, &[1.0]);
        let mut meta = BTreeMap::new();
        meta.insert("format".to_string(), "pt".to_string());
        let p = dir.path().join("m.safetensors");
        write_archive(&p, &[(&m, false)], &meta).unwrap();
        assert_eq!(open_checkpoint(&p).unwrap().metadata(), &meta);
    }
}
