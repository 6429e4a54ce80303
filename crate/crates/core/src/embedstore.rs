//! Binary container for id-indexed embedding matrices.
//!
//! Layout (little-endian):
//!
//! | field    | size                              |
//! |----------|-----------------------------------|
//! | magic    | 8 bytes, `FETAEMB1`               |
//! | version  | u32, always 1                     |
//! | modality | u8, 0 = image, 1 = text           |
//! | count    | u32                               |
//! | dim      | u32                               |
//! | ids      | count × (u16 byte length, UTF-8)  |
//! | matrix   | count · dim × f32, row-major      |
//!
//! Rows are stored as `f32`; accessors hand out `f64` copies for computation.

use std::collections::HashMap;

use thiserror::Error;

pub const MAGIC: [u8; 8] = *b"FETAEMB1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum StoreError {
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated file: needed {needed} bytes at offset {offset}")]
    TruncatedFile { offset: usize, needed: usize },
    #[error("duplicate id: {0}")]
    DuplicateId(String),
    #[error("zero-norm row: {0}")]
    ZeroNormRow(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("non-finite value in row {0}")]
    NonFinite(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    fn code(self) -> u8 {
        match self {
            Modality::Image => 0,
            Modality::Text => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    modality: Modality,
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new(modality: Modality, dim: usize) -> Self {
        assert!(dim >= 1, "embedding dimension must be positive");
        EmbeddingStore {
            modality,
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn from_rows<I, S>(modality: Modality, dim: usize, rows: I) -> Result<Self, StoreError>
    where
        I: IntoIterator<Item = (S, Vec<f32>)>,
        S: Into<String>,
    {
        let mut store = EmbeddingStore::new(modality, dim);
        for (id, row) in rows {
            store.push(id.into(), &row)?;
        }
        Ok(store)
    }

    pub fn push(&mut self, id: String, row: &[f32]) -> Result<(), StoreError> {
        if row.len() != self.dim {
            return Err(StoreError::DimMismatch {
                expected: self.dim,
                got: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite(id));
        }
        if self.index.contains_key(&id) {
            return Err(StoreError::DuplicateId(id));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.position(id).map(|i| self.row(i))
    }

    pub fn get_f64(&self, id: &str) -> Option<Vec<f64>> {
        self.get(id).map(|r| r.iter().map(|&v| v as f64).collect())
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids
            .iter()
            .enumerate()
            .map(move |(i, id)| (id.as_str(), self.row(i)))
    }
}

pub fn write_store(store: &EmbeddingStore) -> Result<Vec<u8>, StoreError> {
    let mut out = Vec::with_capacity(21 + store.data.len() * 4 + store.ids.len() * 16);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(store.modality.code());
    let count =
        u32::try_from(store.len()).map_err(|_| StoreError::Format("too many rows".into()))?;
    let dim = u32::try_from(store.dim).map_err(|_| StoreError::Format("dim too large".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    for id in &store.ids {
        let len = u16::try_from(id.len())
            .map_err(|_| StoreError::Format(format!("id longer than 65535 bytes: {id:.32}…")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    for v in &store.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(StoreError::TruncatedFile {
                offset: self.pos,
                needed: n,
            }),
        }
    }

    fn u32(&mut self) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16, StoreError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
}

pub fn read_store(bytes: &[u8]) -> Result<EmbeddingStore, StoreError> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(StoreError::Format("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(StoreError::Format(format!("unsupported version {version}")));
    }
    let modality = match cur.take(1)?[0] {
        0 => Modality::Image,
        1 => Modality::Text,
        m => return Err(StoreError::Format(format!("unknown modality {m}"))),
    };
    let count = cur.u32()? as usize;
    let dim = cur.u32()? as usize;
    if dim == 0 {
        return Err(StoreError::Format("dim must be positive".into()));
    }

    let mut store = EmbeddingStore::new(modality, dim);
    let mut ids = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = cur.u16()? as usize;
        let raw = cur.take(len)?;
        let id = std::str::from_utf8(raw)
            .map_err(|e| StoreError::Format(format!("id is not UTF-8: {e}")))?;
        ids.push(id.to_string());
    }
    let matrix = cur.take(
        count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| StoreError::Format("matrix size overflows".into()))?,
    )?;
    if cur.pos != bytes.len() {
        return Err(StoreError::Format(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    for (id, chunk) in ids.into_iter().zip(matrix.chunks_exact(dim * 4)) {
        let row: Vec<f32> = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        store.push(id, &row)?;
    }
    Ok(store)
}

/// Scale a row to unit length in `f64`.
pub fn unit(row: &[f64]) -> Option<Vec<f64>> {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    (norm > 0.0).then(|| row.iter().map(|v| v / norm).collect())
}

/// Copy of the store with every row scaled to unit L2 norm.
pub fn l2_normalize(store: &EmbeddingStore) -> Result<EmbeddingStore, StoreError> {
    let mut out = EmbeddingStore::new(store.modality, store.dim);
    for (id, row) in store.rows() {
        let row64: Vec<f64> = row.iter().map(|&v| v as f64).collect();
        let u = unit(&row64).ok_or_else(|| StoreError::ZeroNormRow(id.to_string()))?;
        let row32: Vec<f32> = u.iter().map(|&v| v as f32).collect();
        out.push(id.to_string(), &row32)?;
    }
    Ok(out)
}
