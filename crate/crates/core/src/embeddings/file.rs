//! Binary embedding container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic      4 bytes  "CRNK"
//! version    u32      1
//! dim_in     u32
//! count      u64
//! count x { id u64, token_count u32, token_count * dim_in f32 (row-major) }
//! ```

use std::fs;
use std::path::Path;

use crate::embeddings::RawEmbeddingMatrix;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"CRNK";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

/// Serializes entries. `dim_in` is taken from the first entry (0 for an
/// empty list); use [`encode_embeddings`] to force a header dimension.
pub fn write_embedding_file(entries: &[(u64, RawEmbeddingMatrix)], path: impl AsRef<Path>) -> Result<()> {
    let dim = entries.first().map_or(0, |(_, m)| m.dim_in());
    let bytes = encode_embeddings(dim, entries)?;
    let path = path.as_ref();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Returns the header dimension and the entries in file order.
pub fn read_embedding_file(path: impl AsRef<Path>) -> Result<(usize, Vec<(u64, RawEmbeddingMatrix)>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes)
}

pub fn encode_embeddings(dim_in: usize, entries: &[(u64, RawEmbeddingMatrix)]) -> Result<Vec<u8>> {
    let mut seen = std::collections::HashSet::with_capacity(entries.len());
    let payload: usize = entries.iter().map(|(_, m)| 12 + 4 * m.values().len()).sum();
    let mut out = Vec::with_capacity(HEADER_LEN + payload);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(dim_in, "dim_in")?.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (id, m) in entries {
        if !seen.insert(*id) {
            return Err(Error::DuplicateId(*id));
        }
        if m.dim_in() != dim_in {
            return Err(Error::DimensionMismatch {
                expected: dim_in,
                actual: m.dim_in(),
            });
        }
        out.extend_from_slice(&id.to_le_bytes());
        out.extend_from_slice(&to_u32(m.token_count(), "token_count")?.to_le_bytes());
        for v in m.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<(usize, Vec<(u64, RawEmbeddingMatrix)>)> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dim = cur.u32()? as usize;
    let count = cur.u64()?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let id = cur.u64()?;
        let token_count = cur.u32()? as usize;
        let block = cur.take(token_count * dim * 4)?;
        let values = block
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((id, RawEmbeddingMatrix::new(token_count, dim, values)?));
    }
    if cur.pos != bytes.len() {
        return Err(Error::invalid(format!(
            "{} trailing bytes after {count} entries",
            bytes.len() - cur.pos
        )));
    }
    Ok((dim, entries))
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} does not fit in u32")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n - available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
