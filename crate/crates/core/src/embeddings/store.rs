//! `EMB1` binary vector store.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "EMB1" | u32 dim | u32 count | count × (u16 key_len | key UTF-8 | dim × f32)
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use super::{EmbedItem, EmbeddingError, EmbeddingProvider, EmbeddingVector};

const MAGIC: &[u8; 4] = b"EMB1";

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryStore {
    dim: usize,
    entries: IndexMap<String, EmbeddingVector>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EmbeddingError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| EmbeddingError::InvalidStore(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, EmbeddingError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, EmbeddingError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl BinaryStore {
    pub fn new(dim: usize) -> Self {
        BinaryStore { dim, entries: IndexMap::new() }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self, EmbeddingError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| EmbeddingError::InvalidStore(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EmbeddingError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(EmbeddingError::InvalidStore("bad magic".into()));
        }
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut store = BinaryStore::new(dim);
        for _ in 0..count {
            let key_len = r.u16()? as usize;
            let key = std::str::from_utf8(r.take(key_len)?)
                .map_err(|_| EmbeddingError::InvalidStore("key is not UTF-8".into()))?
                .to_string();
            let raw = r.take(dim * 4)?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let vector = EmbeddingVector::new(values)?;
            if store.entries.insert(key.clone(), vector).is_some() {
                return Err(EmbeddingError::InvalidStore(format!("duplicate key {key}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(EmbeddingError::InvalidStore(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(store)
    }

    /// Adds or replaces an entry.
    pub fn insert(&mut self, key: impl Into<String>, vector: EmbeddingVector) -> Result<(), EmbeddingError> {
        if vector.dim() != self.dim {
            return Err(EmbeddingError::DimensionMismatch { expected: self.dim, actual: vector.dim() });
        }
        let key = key.into();
        if key.len() > u16::MAX as usize {
            return Err(EmbeddingError::InvalidStore(format!("key too long: {} bytes", key.len())));
        }
        self.entries.insert(key, vector);
        Ok(())
    }

    pub fn get_key(&self, key: &str) -> Option<&EmbeddingVector> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.entries.len() * (2 + 16 + self.dim * 4));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (key, vector) in &self.entries {
            out.extend_from_slice(&(key.len() as u16).to_le_bytes());
            out.extend_from_slice(key.as_bytes());
            for v in vector.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        fs::write(path, self.to_bytes())
    }
}

impl EmbeddingProvider for BinaryStore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn get(&self, item: &EmbedItem) -> Result<EmbeddingVector, EmbeddingError> {
        self.entries.get(item.key.as_str()).cloned().ok_or_else(|| EmbeddingError::KeyNotFound(item.key.to_string()))
    }
}
