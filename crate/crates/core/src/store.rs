//! The `.aemb` embedding matrix format and temporal mean pooling.
//!
//! Layout, all integers little-endian:
//!
//! | offset | size | field                     |
//! |--------|------|---------------------------|
//! | 0      | 4    | magic `AEMB`              |
//! | 4      | 2    | version (1)               |
//! | 6      | 2    | dtype code (1 = f32)      |
//! | 8      | 4    | dim                       |
//! | 12     | 8    | rows                      |
//! | 20     | ..   | rows x dim f32, row-major |
//!
//! The id index lives in a sidecar `<name>.idx`, one `{"id": .., "row": ..}`
//! object per line. Layer files are stored as `<model_id>/L<layer>.aemb`.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"AEMB";
pub const FORMAT_VERSION: u16 = 1;
pub const DTYPE_F32: u16 = 1;
pub const HEADER_LEN: usize = 20;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic in {0}")]
    BadMagic(String),
    #[error("unsupported format version {0}")]
    Version(u16),
    #[error("unsupported dtype code {0}")]
    Dtype(u16),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(u64),
    #[error("index entry {id:?} points at row {row}, but the matrix has {rows} rows")]
    RowOutOfRange { id: String, row: u64, rows: u64 },
    #[error("index lists id {0:?} more than once")]
    DuplicateId(String),
    #[error("index maps ids {first:?} and {second:?} to the same row {row}")]
    SharedRow { first: String, second: String, row: usize },
    #[error("index line {line}: {message}")]
    IndexParse { line: usize, message: String },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("dimension must be positive")]
    ZeroDim,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty frame matrix")]
    EmptyFrames,
    #[error("unknown utterance id {0:?}")]
    UnknownId(String),
    #[error("no layer files for model {model} under {dir}")]
    NoLayers { model: String, dir: String },
    #[error("missing layer file {0}")]
    MissingLayer(String),
}

/// Which encoder layer a matrix holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LayerSelector {
    Index(u32),
    /// Resolved to the highest layer id stored for the model.
    Last,
}

impl std::fmt::Display for LayerSelector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LayerSelector::Index(l) => write!(f, "L{l}"),
            LayerSelector::Last => f.write_str("last"),
        }
    }
}

impl From<LayerSelector> for String {
    fn from(l: LayerSelector) -> String {
        l.to_string()
    }
}

impl TryFrom<String> for LayerSelector {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl std::str::FromStr for LayerSelector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("last") {
            return Ok(LayerSelector::Last);
        }
        let digits = s.strip_prefix(['L', 'l']).unwrap_or(s);
        digits
            .parse()
            .map(LayerSelector::Index)
            .map_err(|_| format!("invalid layer {s:?}; expected an integer, L<n> or \"last\""))
    }
}

/// Dense row-major f32 matrix with an utterance-id index.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub model_id: String,
    pub layer_id: u32,
    dim: usize,
    values: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingMatrix {
    /// Validates shape, finiteness and index injectivity.
    pub fn new(
        model_id: impl Into<String>,
        layer_id: u32,
        dim: usize,
        values: Vec<f32>,
        index: HashMap<String, usize>,
    ) -> Result<Self, StoreError> {
        if dim == 0 {
            return Err(StoreError::ZeroDim);
        }
        if !values.len().is_multiple_of(dim) {
            return Err(StoreError::Shape(format!(
                "{} values do not fill rows of width {dim}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        let rows = values.len() / dim;
        let mut owner: HashMap<usize, &str> = HashMap::with_capacity(index.len());
        for (id, &row) in &index {
            if row >= rows {
                return Err(StoreError::RowOutOfRange {
                    id: id.clone(),
                    row: row as u64,
                    rows: rows as u64,
                });
            }
            if let Some(prev) = owner.insert(row, id) {
                let (first, second) = if prev < id.as_str() {
                    (prev, id.as_str())
                } else {
                    (id.as_str(), prev)
                };
                return Err(StoreError::SharedRow {
                    first: first.to_string(),
                    second: second.to_string(),
                    row,
                });
            }
        }
        Ok(Self {
            model_id: model_id.into(),
            layer_id,
            dim,
            values,
            index,
        })
    }

    /// Builds a matrix whose rows are indexed by `ids` in order.
    pub fn from_rows<S: Into<String>>(
        model_id: impl Into<String>,
        layer_id: u32,
        rows: impl IntoIterator<Item = (S, Vec<f32>)>,
    ) -> Result<Self, StoreError> {
        let mut values = Vec::new();
        let mut index = HashMap::new();
        let mut dim = None;
        for (i, (id, row)) in rows.into_iter().enumerate() {
            let id = id.into();
            match dim {
                None => dim = Some(row.len()),
                Some(d) if d != row.len() => {
                    return Err(StoreError::Shape(format!(
                        "row {id:?} has {} values, expected {d}",
                        row.len()
                    )))
                }
                _ => {}
            }
            if index.insert(id.clone(), i).is_some() {
                return Err(StoreError::DuplicateId(id));
            }
            values.extend_from_slice(&row);
        }
        Self::new(model_id, layer_id, dim.unwrap_or(0), values, index)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.values[row * self.dim..(row + 1) * self.dim]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn index(&self) -> &HashMap<String, usize> {
        &self.index
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn lookup(&self, id: &str) -> Result<&[f32], StoreError> {
        self.index
            .get(id)
            .map(|&r| self.row(r))
            .ok_or_else(|| StoreError::UnknownId(id.to_string()))
    }

    /// Index entries ordered by row.
    pub fn sorted_index(&self) -> Vec<(&str, usize)> {
        let mut entries: Vec<_> = self.index.iter().map(|(k, &v)| (k.as_str(), v)).collect();
        entries.sort_by_key(|&(_, r)| r);
        entries
    }
}

/// Frame-level representations of one utterance, `frames x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    dim: usize,
    data: Vec<f32>,
}

impl FrameMatrix {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self, StoreError> {
        if dim == 0 {
            return Err(StoreError::ZeroDim);
        }
        if data.is_empty() {
            return Err(StoreError::EmptyFrames);
        }
        if !data.len().is_multiple_of(dim) {
            return Err(StoreError::Shape(format!(
                "{} values do not fill frames of width {dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        Ok(Self { dim, data })
    }

    pub fn from_frames(frames: &[Vec<f32>]) -> Result<Self, StoreError> {
        let dim = frames.first().map(Vec::len).ok_or(StoreError::EmptyFrames)?;
        if frames.iter().any(|f| f.len() != dim) {
            return Err(StoreError::Shape("ragged frames".into()));
        }
        Self::new(dim, frames.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frames(&self) -> usize {
        self.data.len() / self.dim
    }
}

/// Temporal mean over frames; f64 accumulation, rounded once to f32.
pub fn mean_pool(frames: &FrameMatrix) -> Vec<f32> {
    let mut acc = vec![0.0f64; frames.dim];
    for frame in frames.data.chunks_exact(frames.dim) {
        for (a, &v) in acc.iter_mut().zip(frame) {
            *a += f64::from(v);
        }
    }
    let t = frames.frames() as f64;
    acc.into_iter().map(|s| (s / t) as f32).collect()
}

/// Serializes header and payload into a byte buffer.
pub fn encode_payload(dim: usize, values: &[f32]) -> Vec<u8> {
    let rows = values.len().checked_div(dim).unwrap_or(0);
    let mut out = Vec::with_capacity(HEADER_LEN + values.len() * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses header and payload; returns `(dim, values)`.
pub fn decode_payload(bytes: &[u8], origin: &str) -> Result<(usize, Vec<f32>), StoreError> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() < 4 || bytes[..4] != MAGIC {
            return Err(StoreError::BadMagic(origin.to_string()));
        }
        return Err(StoreError::Truncated {
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    if bytes[..4] != MAGIC {
        return Err(StoreError::BadMagic(origin.to_string()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(StoreError::Version(version));
    }
    let dtype = u16::from_le_bytes([bytes[6], bytes[7]]);
    if dtype != DTYPE_F32 {
        return Err(StoreError::Dtype(dtype));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let rows = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    if dim == 0 {
        return Err(StoreError::ZeroDim);
    }
    let expected = (dim as u64)
        .checked_mul(rows)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| StoreError::Shape("declared size overflows".into()))?;
    let found = (bytes.len() - HEADER_LEN) as u64;
    if found < expected {
        return Err(StoreError::Truncated { expected, found });
    }
    if found > expected {
        return Err(StoreError::TrailingBytes(found - expected));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dim, values))
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    id: String,
    row: u64,
}

/// `foo/L3.aemb` -> `foo/L3.idx`.
pub fn index_path(path: &Path) -> PathBuf {
    path.with_extension("idx")
}

/// Conventional location of one layer's matrix.
pub fn layer_path(root: &Path, model_id: &str, layer_id: u32) -> PathBuf {
    root.join(model_id).join(format!("L{layer_id}.aemb"))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_matrix(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<(), StoreError> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
    }
    fs::write(path, encode_payload(matrix.dim, &matrix.values)).map_err(io_err(path))?;

    let idx = index_path(path);
    let file = fs::File::create(&idx).map_err(io_err(&idx))?;
    let mut w = BufWriter::new(file);
    for (id, row) in matrix.sorted_index() {
        let line = serde_json::to_string(&IndexEntry {
            id: id.to_string(),
            row: row as u64,
        })
        .expect("index entries serialize");
        writeln!(w, "{line}").map_err(io_err(&idx))?;
    }
    w.flush().map_err(io_err(&idx))
}

/// Reads a matrix and its sidecar index. Model and layer ids are taken from
/// the conventional `<model_id>/L<layer>.aemb` path when it matches.
pub fn read_matrix(path: impl AsRef<Path>) -> Result<EmbeddingMatrix, StoreError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (dim, values) = decode_payload(&bytes, &path.display().to_string())?;
    let rows = (values.len() / dim) as u64;

    let idx = index_path(path);
    let file = fs::File::open(&idx).map_err(io_err(&idx))?;
    let mut index = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&idx))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: IndexEntry = serde_json::from_str(&line).map_err(|e| StoreError::IndexParse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if entry.row >= rows {
            return Err(StoreError::RowOutOfRange {
                id: entry.id,
                row: entry.row,
                rows,
            });
        }
        if index.insert(entry.id.clone(), entry.row as usize).is_some() {
            return Err(StoreError::DuplicateId(entry.id));
        }
    }

    let layer_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.strip_prefix('L'))
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let model_id = path
        .parent()
        .and_then(|p| p.file_name())
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string();
    EmbeddingMatrix::new(model_id, layer_id, dim, values, index)
}

/// Layer ids with a `.aemb` file under `<root>/<model_id>/`, ascending.
pub fn available_layers(root: &Path, model_id: &str) -> Result<Vec<u32>, StoreError> {
    let dir = root.join(model_id);
    let entries = fs::read_dir(&dir).map_err(io_err(&dir))?;
    let mut layers = Vec::new();
    for entry in entries {
        let entry = entry.map_err(io_err(&dir))?;
        let p = entry.path();
        if p.extension().and_then(|e| e.to_str()) != Some("aemb") {
            continue;
        }
        if let Some(l) = p
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.strip_prefix('L'))
            .and_then(|s| s.parse::<u32>().ok())
        {
            layers.push(l);
        }
    }
    layers.sort_unstable();
    Ok(layers)
}

pub fn resolve_layer(root: &Path, model_id: &str, layer: LayerSelector) -> Result<u32, StoreError> {
    match layer {
        LayerSelector::Index(l) => Ok(l),
        LayerSelector::Last => available_layers(root, model_id)?
            .last()
            .copied()
            .ok_or_else(|| StoreError::NoLayers {
                model: model_id.to_string(),
                dir: root.display().to_string(),
            }),
    }
}

pub fn load_layer(root: &Path, model_id: &str, layer_id: u32) -> Result<EmbeddingMatrix, StoreError> {
    let path = layer_path(root, model_id, layer_id);
    if !path.exists() {
        return Err(StoreError::MissingLayer(path.display().to_string()));
    }
    let mut m = read_matrix(&path)?;
    m.model_id = model_id.to_string();
    m.layer_id = layer_id;
    Ok(m)
}
