//! Embedding backend: fixed-size vectors per reference and per query window,
//! compared by cosine distance.
//!
//! Vectors come precomputed from `SLEM` files (or a CSV variant), or from
//! [`fallback_embed`], a deterministic hand-crafted embedder over PCP frames.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use thiserror::Error;

use crate::features::{PcpMatrix, N_BINS};

pub const EMBED_MAGIC: [u8; 4] = *b"SLEM";
pub const EMBED_VERSION: u32 = 1;
pub const DEFAULT_EMBED_DIM: usize = 256;
/// Fallback embeddings use this dimension (a multiple of 24 near the default).
pub const DEFAULT_FALLBACK_DIM: usize = 240;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("embedding {id:?} has dimension {found}, expected {expected}")]
    DimensionMismatch { id: String, expected: usize, found: usize },
    #[error("embedding {0:?} has zero norm")]
    ZeroNorm(String),
    #[error("embedding {0:?} has a non-finite component")]
    NonFinite(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("duplicate embedding id {0:?}")]
    DuplicateId(String),
    #[error("embedding index is empty")]
    EmptyIndex,
    #[error("fallback dimension {0} is not a positive multiple of 24")]
    BadDimension(usize),
    #[error("no embedding for {0:?}")]
    Missing(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackEmbedding {
    id: String,
    vector: Vec<f64>,
    norm: f64,
}

impl TrackEmbedding {
    /// Validates finiteness and a non-zero norm.
    pub fn new(id: impl Into<String>, vector: Vec<f64>) -> Result<Self, EmbedError> {
        let id = id.into();
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite(id));
        }
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 0.0 {
            return Err(EmbedError::ZeroNorm(id));
        }
        Ok(Self { id, vector, norm })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }
}

/// Id used for the embedding of window `index` of a concert.
pub fn window_embedding_id(concert_id: &str, window_index: usize) -> String {
    format!("{concert_id}/{window_index}")
}

/// `1 - a.b / (|a| |b|)`, in `[0, 2]`.
pub fn cosine_distance(a: &TrackEmbedding, b: &TrackEmbedding) -> Result<f64, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::DimensionMismatch { id: b.id.clone(), expected: a.dim(), found: b.dim() });
    }
    let dot: f64 = a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum();
    Ok((1.0 - dot / (a.norm * b.norm)).clamp(0.0, 2.0))
}

/// Reads embeddings from a `SLEM` file, or from CSV rows `id,v0,v1,...` when
/// the file does not start with the magic.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Vec<TrackEmbedding>, EmbedError> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if bytes.starts_with(&EMBED_MAGIC) {
        parse_slem(&bytes)
    } else {
        parse_embedding_csv(BufReader::new(&bytes[..]))
    }
}

fn parse_slem(bytes: &[u8]) -> Result<Vec<TrackEmbedding>, EmbedError> {
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u32()?;
    if version != EMBED_VERSION {
        return Err(EmbedError::Parse(format!("unsupported version {version}")));
    }
    let count = cur.u32()? as usize;
    let dim = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let id_len = cur.u16()? as usize;
        let id = std::str::from_utf8(cur.take(id_len)?)
            .map_err(|e| EmbedError::Parse(format!("id is not utf-8: {e}")))?
            .to_string();
        let raw = cur.take(dim * 4)?;
        let vector = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        out.push(TrackEmbedding::new(id, vector)?);
    }
    if cur.pos != bytes.len() {
        return Err(EmbedError::Parse(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    check_unique(&out)?;
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EmbedError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| EmbedError::Parse("truncated embedding file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, EmbedError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16, EmbedError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
}

fn parse_embedding_csv(reader: impl BufRead) -> Result<Vec<TrackEmbedding>, EmbedError> {
    let mut out: Vec<TrackEmbedding> = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(',');
        let id = fields.next().unwrap_or_default().trim().to_string();
        let vector = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| EmbedError::Parse(format!("line {}: {e}", n + 1)))?;
        if id.is_empty() || vector.is_empty() {
            return Err(EmbedError::Parse(format!("line {}: expected id followed by values", n + 1)));
        }
        if let Some(first) = out.first() {
            if first.dim() != vector.len() {
                return Err(EmbedError::DimensionMismatch { id, expected: first.dim(), found: vector.len() });
            }
        }
        out.push(TrackEmbedding::new(id, vector)?);
    }
    check_unique(&out)?;
    Ok(out)
}

fn check_unique(embeddings: &[TrackEmbedding]) -> Result<(), EmbedError> {
    let mut seen = BTreeSet::new();
    for e in embeddings {
        if !seen.insert(e.id.as_str()) {
            return Err(EmbedError::DuplicateId(e.id.clone()));
        }
    }
    Ok(())
}

/// Writes a `SLEM` file. Components are stored as `f32`.
pub fn write_embeddings(embeddings: &[TrackEmbedding], path: impl AsRef<Path>) -> Result<(), EmbedError> {
    let dim = embeddings.first().map_or(0, TrackEmbedding::dim);
    let mut out = Vec::with_capacity(16 + embeddings.len() * (2 + 16 + dim * 4));
    out.extend_from_slice(&EMBED_MAGIC);
    out.extend_from_slice(&EMBED_VERSION.to_le_bytes());
    out.extend_from_slice(&(embeddings.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for e in embeddings {
        if e.dim() != dim {
            return Err(EmbedError::DimensionMismatch { id: e.id.clone(), expected: dim, found: e.dim() });
        }
        let id_len = u16::try_from(e.id.len()).map_err(|_| EmbedError::Parse(format!("id {:?} too long", e.id)))?;
        out.extend_from_slice(&id_len.to_le_bytes());
        out.extend_from_slice(e.id.as_bytes());
        for &v in &e.vector {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Hand-crafted embedding of dimension `d` (a multiple of 24): `d / 24`
/// blocks, each the weighted per-bin mean followed by the weighted per-bin
/// standard deviation of the frames, with weights
/// `w_r(t) = 1 + 0.5 cos(2 pi r t / n)` for block `r`. Block 0 is the plain
/// global mean and std.
///
/// Pitch rotation permutes coordinates within each 12-bin half-block. An
/// all-zero input has no direction and is rejected with `ZeroNorm`.
pub fn fallback_embed(matrix: &PcpMatrix, d: usize) -> Result<TrackEmbedding, EmbedError> {
    if d == 0 || d % (2 * N_BINS) != 0 {
        return Err(EmbedError::BadDimension(d));
    }
    let n = matrix.n_frames();
    let blocks = d / (2 * N_BINS);
    let mut vector = Vec::with_capacity(d);
    for r in 0..blocks {
        let weight = |t: usize| 1.0 + 0.5 * (2.0 * std::f64::consts::PI * (r * t) as f64 / n as f64).cos();
        let mut total = 0.0;
        let mut sum = [0.0f64; N_BINS];
        for (t, row) in matrix.rows().enumerate() {
            let w = weight(t);
            total += w;
            for (s, &v) in sum.iter_mut().zip(row) {
                *s += w * v as f64;
            }
        }
        let mean = sum.map(|s| s / total);
        let mut var = [0.0f64; N_BINS];
        for (t, row) in matrix.rows().enumerate() {
            let w = weight(t);
            for ((acc, &v), m) in var.iter_mut().zip(row).zip(&mean) {
                let dv = v as f64 - m;
                *acc += w * dv * dv;
            }
        }
        vector.extend_from_slice(&mean);
        vector.extend(var.iter().map(|v| (v / total).sqrt()));
    }
    TrackEmbedding::new("", vector)
}

/// Reference embeddings normalized to unit length, sorted by id.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    dim: usize,
    ids: Vec<String>,
    unit_rows: Vec<f64>,
}

impl EmbeddingIndex {
    pub fn build(mut embeddings: Vec<TrackEmbedding>) -> Result<Self, EmbedError> {
        let first = embeddings.first().ok_or(EmbedError::EmptyIndex)?;
        let dim = first.dim();
        embeddings.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = embeddings.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(EmbedError::DuplicateId(w[0].id.clone()));
        }
        let mut unit_rows = Vec::with_capacity(dim * embeddings.len());
        for e in &embeddings {
            if e.dim() != dim {
                return Err(EmbedError::DimensionMismatch { id: e.id.clone(), expected: dim, found: e.dim() });
            }
            unit_rows.extend(e.vector.iter().map(|v| v / e.norm));
        }
        let ids = embeddings.into_iter().map(|e| e.id).collect();
        Ok(Self { dim, ids, unit_rows })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Cosine distances from `query` to every reference, in id order.
    pub fn distances(&self, query: &TrackEmbedding) -> Result<Vec<f64>, EmbedError> {
        if query.dim() != self.dim {
            return Err(EmbedError::DimensionMismatch { id: query.id.clone(), expected: self.dim, found: query.dim() });
        }
        Ok(self
            .unit_rows
            .chunks_exact(self.dim)
            .map(|row| {
                let dot: f64 = row.iter().zip(&query.vector).map(|(a, b)| a * b).sum();
                (1.0 - dot / query.norm).clamp(0.0, 2.0)
            })
            .collect())
    }

    /// Nearest reference; equal distances go to the smallest id.
    pub fn top1(&self, query: &TrackEmbedding) -> Result<(&str, f64), EmbedError> {
        let distances = self.distances(query)?;
        let mut best = 0;
        for (k, &d) in distances.iter().enumerate() {
            if d < distances[best] {
                best = k;
            }
        }
        Ok((&self.ids[best], distances[best]))
    }
}
