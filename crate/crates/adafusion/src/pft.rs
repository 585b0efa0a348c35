//! "PFT1" feature tables: magic, version, tile count, dim (u32 each), then
//! the u64 tile ids and the row-major f32 values. Everything little-endian.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use adafusion_core::{FeatureTable, SourceDescriptor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PFT1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 16;

/// Decoded file contents before they are attached to a source.
#[derive(Debug, Clone, PartialEq)]
pub struct PftData {
    pub tile_ids: Vec<u64>,
    pub dim: usize,
    pub values: Vec<f32>,
}

pub fn encode(tile_ids: &[u64], dim: usize, values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN as usize + tile_ids.len() * 8 + values.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tile_ids.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for id in tile_ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<PftData> {
    let truncated = |expected: u64| Error::TruncatedFile {
        path: path.to_path_buf(),
        offset: bytes.len() as u64,
        expected,
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            offset: 0,
        });
    }
    if bytes.len() < HEADER_LEN as usize {
        return Err(truncated(HEADER_LEN));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let count = u32_at(bytes, 8) as u64;
    let dim = u32_at(bytes, 12) as u64;
    let ids_end = HEADER_LEN + 8 * count;
    let expected = ids_end + 4 * count * dim;
    if (bytes.len() as u64) < expected {
        return Err(truncated(expected));
    }
    if (bytes.len() as u64) > expected {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            offset: expected,
            reason: format!("{} trailing bytes", bytes.len() as u64 - expected),
        });
    }
    let tile_ids = bytes[HEADER_LEN as usize..ids_end as usize]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut values = Vec::with_capacity((count * dim) as usize);
    for (k, c) in bytes[ids_end as usize..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(c.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFiniteValue {
                path: path.to_path_buf(),
                offset: ids_end + 4 * k as u64,
            });
        }
        values.push(v);
    }
    Ok(PftData {
        tile_ids,
        dim: dim as usize,
        values,
    })
}

pub fn read_pft(path: impl AsRef<Path>) -> Result<PftData> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(path, &bytes)
}

/// Reads a table and attaches `source`, whose `native_dim` must match the file.
pub fn read_feature_table(
    path: impl AsRef<Path>,
    source: SourceDescriptor,
) -> Result<FeatureTable> {
    let path = path.as_ref();
    let data = read_pft(path)?;
    if data.dim != source.native_dim {
        return Err(Error::Invalid(format!(
            "{}: dim {} but source `{}` declares {}",
            path.display(),
            data.dim,
            source.source_id,
            source.native_dim
        )));
    }
    Ok(FeatureTable::new(
        source,
        data.tile_ids,
        data.dim,
        data.values,
    )?)
}

pub fn write_feature_table(table: &FeatureTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    table.validate()?;
    let bytes = encode(&table.tile_ids, table.dim, &table.values);
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    w.write_all(&bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_only_and_single_value() {
        let p = Path::new("t.pft");
        let empty = encode(&[], 7, &[]);
        assert_eq!(empty.len(), 16);
        let back = decode(p, &empty).unwrap();
        assert_eq!((back.tile_ids.len(), back.dim), (0, 7));

        let one = encode(&[9], 1, &[0.5]);
        assert_eq!(&one[24..], &0.5f32.to_le_bytes());
    }

    #[test]
    fn corruption_is_reported_with_offsets() {
        let p = Path::new("t.pft");
        let good = encode(&[1, 2], 3, &[1., 2., 3., 4., 5., 6.]);
        assert!(matches!(
            decode(p, b"PFT2xxxxxxxxxxxx"),
            Err(Error::BadMagic { offset: 0, .. })
        ));
        match decode(p, &good[..good.len() - 6]) {
            Err(Error::TruncatedFile {
                offset, expected, ..
            }) => {
                assert_eq!(offset, good.len() as u64 - 6);
                assert_eq!(expected, good.len() as u64);
            }
            other => panic!("{other:?}"),
        }
        let mut bad = good.clone();
        bad[32 + 4..32 + 8].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode(p, &bad),
            Err(Error::NonFiniteValue { offset: 36, .. })
        ));
    }
}
