//! Embedding matrices and dataset manifests.
//!
//! Embedding file layout (little-endian):
//!
//! ```text
//! "FSSL" | version u32 = 1 | n u64 | d u32 | flags u32 (bit 0 = normalized) | n*d f32, row-major
//! ```
//!
//! Manifests are JSON lines with keys `id`, `row`, `source` and the optional
//! `quality`, `group` and `label`. The last two are evaluation-only: training
//! code receives a [`BlindManifest`], which has no field to hold them.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"FSSL";
pub const EMBEDDING_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4 + 4;
const FLAG_NORMALIZED: u32 = 1;

/// Tolerance on row norms for matrices flagged as normalized.
pub const NORM_TOL: f64 = 1e-6;

/// Dense row-major `n x d` matrix of f32 embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    n: usize,
    d: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl EmbeddingMatrix {
    pub fn new(n: usize, d: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::Size(format!(
                "expected {n}x{d} = {} values, got {}",
                n * d,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value at row {}, column {}",
                pos / d.max(1),
                pos % d.max(1)
            )));
        }
        Ok(Self {
            n,
            d,
            data,
            normalized: false,
        })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * d);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != d {
                return Err(Error::Dimension(format!(
                    "row {i} has {} columns, expected {d}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), d, data)
    }

    /// Builds from f64 values, rounding to f32.
    pub fn from_array(a: &Array2<f64>) -> Result<Self> {
        let (n, d) = a.dim();
        Self::new(n, d, a.iter().map(|&v| v as f32).collect())
    }

    pub fn empty(d: usize) -> Self {
        Self {
            n: 0,
            d,
            data: Vec::new(),
            normalized: false,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact panics on zero width
        (0..self.n).map(move |i| self.row(i))
    }

    /// Marks the matrix as normalized after checking every row norm.
    pub fn assume_normalized(mut self) -> Result<Self> {
        if let Some(i) = self.first_non_unit_row() {
            return Err(Error::Data(format!(
                "row {i} has norm {:.9}, expected 1",
                row_norm(self.row(i))
            )));
        }
        self.normalized = true;
        Ok(self)
    }

    fn first_non_unit_row(&self) -> Option<usize> {
        (0..self.n).find(|&i| (row_norm(self.row(i)) - 1.0).abs() > NORM_TOL)
    }

    /// Copies the selected rows, keeping the normalized flag.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.d);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            n: idx.len(),
            d: self.d,
            data,
            normalized: self.normalized,
        }
    }

    /// Stacks `other` below `self`. The result is normalized only if both are.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.d != other.d {
            return Err(Error::Dimension(format!(
                "cannot stack d={} on d={}",
                other.d, self.d
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self {
            n: self.n + other.n,
            d: self.d,
            data,
            normalized: self.normalized && other.normalized,
        })
    }

    pub fn to_array(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.n, self.d), |(i, j)| self.data[i * self.d + j] as f64)
    }

    pub fn rows_to_array(&self, idx: &[usize]) -> Array2<f64> {
        Array2::from_shape_fn((idx.len(), self.d), |(r, j)| {
            self.data[idx[r] * self.d + j] as f64
        })
    }
}

pub(crate) fn row_norm(r: &[f32]) -> f64 {
    r.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

/// Scales every row to unit L2 norm and sets the normalized flag.
pub fn normalize_rows(m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut data = Vec::with_capacity(m.data.len());
    for i in 0..m.n {
        let r = m.row(i);
        let norm = row_norm(r);
        if norm == 0.0 {
            return Err(Error::Degenerate(format!("row {i} is the zero vector")));
        }
        data.extend(r.iter().map(|&v| (v as f64 / norm) as f32));
    }
    Ok(EmbeddingMatrix {
        n: m.n,
        d: m.d,
        data,
        normalized: true,
    })
}

pub fn save_embeddings(m: &EmbeddingMatrix, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(EMBEDDING_MAGIC);
    header.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    header.extend_from_slice(&(m.n as u64).to_le_bytes());
    header.extend_from_slice(&(m.d as u32).to_le_bytes());
    let flags = if m.normalized { FLAG_NORMALIZED } else { 0 };
    header.extend_from_slice(&flags.to_le_bytes());
    let io = |e| Error::io(path, e);
    w.write_all(&header).map_err(io)?;
    for v in &m.data {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Size(m) => Error::Size(format!("{}: {m}", path.display())),
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub(crate) fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "header needs {HEADER_LEN} bytes, file has {}",
            bytes.len()
        )));
    }
    if &bytes[0..4] != EMBEDDING_MAGIC {
        return Err(Error::Format("bad magic, expected \"FSSL\"".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != EMBEDDING_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let d = u32_at(16) as usize;
    let flags = u32_at(20);
    if flags & !FLAG_NORMALIZED != 0 {
        return Err(Error::Format(format!("unknown flag bits {flags:#x}")));
    }
    let n = usize::try_from(n).map_err(|_| Error::Format(format!("row count {n} too large")))?;
    let expected = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("{n}x{d} overflows")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::Size(format!(
            "payload is {} bytes, header declares {n}x{d} ({expected} bytes)",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let m = EmbeddingMatrix::new(n, d, data)?;
    if flags & FLAG_NORMALIZED != 0 {
        m.assume_normalized()
    } else {
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Curated,
    Uncurated,
    Retrieved,
}

/// One manifest line, including the evaluation-only fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub row: usize,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u32>,
}

/// A manifest record with group and label stripped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlindRecord {
    pub id: String,
    pub row: usize,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<Record>,
}

/// Manifest view handed to curation, pseudo-labeling and training.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BlindManifest {
    pub records: Vec<BlindRecord>,
}

fn check_unique<'a>(
    items: impl Iterator<Item = (&'a str, usize)>,
    n: Option<usize>,
) -> Result<()> {
    let mut ids = HashSet::new();
    let mut rows = HashSet::new();
    for (id, row) in items {
        if !ids.insert(id) {
            return Err(Error::Data(format!("duplicate sample id {id:?}")));
        }
        if !rows.insert(row) {
            return Err(Error::Data(format!("row {row} referenced twice")));
        }
        if let Some(n) = n {
            if row >= n {
                return Err(Error::Data(format!(
                    "record {id:?} points at row {row}, matrix has {n} rows"
                )));
            }
        }
    }
    Ok(())
}

impl DatasetManifest {
    pub fn validate(&self, n: Option<usize>) -> Result<()> {
        check_unique(self.records.iter().map(|r| (r.id.as_str(), r.row)), n)
    }

    pub fn blind(&self) -> BlindManifest {
        BlindManifest {
            records: self
                .records
                .iter()
                .map(|r| BlindRecord {
                    id: r.id.clone(),
                    row: r.row,
                    source: r.source,
                    quality: r.quality,
                })
                .collect(),
        }
    }

    /// Records sorted by row, so `records[i].row == i` for dense manifests.
    pub fn sorted_by_row(&self) -> Vec<&Record> {
        let mut v: Vec<&Record> = self.records.iter().collect();
        v.sort_by_key(|r| r.row);
        v
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self {
            records: read_jsonl(path)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.records)
    }
}

impl BlindManifest {
    pub fn validate(&self, n: Option<usize>) -> Result<()> {
        check_unique(self.records.iter().map(|r| (r.id.as_str(), r.row)), n)
    }

    /// Reads a manifest file, dropping any `group` and `label` keys.
    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self {
            records: read_jsonl(path)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.records)
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!("{} line {}: {e}", path.display(), lineno + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
