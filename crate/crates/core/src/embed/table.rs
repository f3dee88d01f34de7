//! Binary embedding table.
//!
//! ```text
//! "JVAE" | version: u32 | dim: u32 | count: u64 |
//! count x ( timestamp_ns: u64 | dim x f32 )
//! ```
//!
//! All integers and floats little-endian. Records are written in timestamp
//! order.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{EmbedError, FeatureVector};
use crate::gaze::Nanos;

pub const TABLE_MAGIC: &[u8; 4] = b"JVAE";
pub const TABLE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    entries: BTreeMap<Nanos, Vec<f32>>,
}

fn table_err(e: std::io::Error) -> EmbedError {
    EmbedError::Table(e.to_string())
}

impl EmbeddingTable {
    /// Builds a table, rejecting mixed dimensions and repeated timestamps.
    pub fn from_entries(entries: impl IntoIterator<Item = (Nanos, Vec<f32>)>) -> Result<Self, EmbedError> {
        let mut dim = None;
        let mut map = BTreeMap::new();
        for (ts, v) in entries {
            let expected = *dim.get_or_insert(v.len());
            if v.len() != expected {
                return Err(EmbedError::DimensionMismatch { expected, found: v.len() });
            }
            if map.insert(ts, v).is_some() {
                return Err(EmbedError::DuplicateTimestamp(ts));
            }
        }
        Ok(Self { dim: dim.unwrap_or(0), entries: map })
    }

    /// Stores feature vectors at f32 precision.
    pub fn from_vectors<'a>(vectors: impl IntoIterator<Item = (Nanos, &'a FeatureVector)>) -> Result<Self, EmbedError> {
        Self::from_entries(vectors.into_iter().map(|(ts, v)| (ts, v.values().iter().map(|&x| x as f32).collect())))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, ts: Nanos) -> Option<&[f32]> {
        self.entries.get(&ts).map(Vec::as_slice)
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), EmbedError> {
        out.write_all(TABLE_MAGIC).map_err(table_err)?;
        out.write_u32::<LittleEndian>(TABLE_VERSION).map_err(table_err)?;
        out.write_u32::<LittleEndian>(self.dim as u32).map_err(table_err)?;
        out.write_u64::<LittleEndian>(self.entries.len() as u64).map_err(table_err)?;
        for (&ts, v) in &self.entries {
            out.write_u64::<LittleEndian>(ts).map_err(table_err)?;
            for &x in v {
                out.write_f32::<LittleEndian>(x).map_err(table_err)?;
            }
        }
        out.flush().map_err(table_err)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(20 + self.entries.len() * (8 + 4 * self.dim));
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self, EmbedError> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(table_err)?;
        if &magic != TABLE_MAGIC {
            return Err(EmbedError::Table(format!("bad magic {magic:?}")));
        }
        let version = input.read_u32::<LittleEndian>().map_err(table_err)?;
        if version != TABLE_VERSION {
            return Err(EmbedError::Table(format!("unsupported version {version}")));
        }
        let dim = input.read_u32::<LittleEndian>().map_err(table_err)? as usize;
        let count = input.read_u64::<LittleEndian>().map_err(table_err)?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let ts = input.read_u64::<LittleEndian>().map_err(table_err)?;
            let mut v = vec![0f32; dim];
            input.read_f32_into::<LittleEndian>(&mut v).map_err(table_err)?;
            entries.push((ts, v));
        }
        let mut table = Self::from_entries(entries)?;
        table.dim = dim;
        Ok(table)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, EmbedError> {
        let file = std::fs::File::open(path).map_err(|e| EmbedError::Table(format!("{}: {e}", path.display())))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

/// Looks up the vector for a slice timestamp and normalizes it.
pub fn embed_import(timestamp: Nanos, table: &EmbeddingTable) -> Result<FeatureVector, EmbedError> {
    let v = table.get(timestamp).ok_or(EmbedError::MissingEmbedding(timestamp))?;
    FeatureVector::normalized(v.iter().map(|&x| x as f64).collect(), format!("import-d{}", table.dim()))
}
