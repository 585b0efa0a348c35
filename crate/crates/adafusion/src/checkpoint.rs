//! "ADFC" checkpoint container.
//!
//! Layout: magic, u32 version, u32 section count, then per section a u16
//! name length, the UTF-8 name, a u8 dtype tag, u64 rows, u64 cols, u64
//! payload length and the payload. All little-endian.

use std::fs;
use std::path::Path;

use adafusion_core::model::{FusionModel, ModelSpec};
use adafusion_core::optim::AdamState;
use adafusion_core::{Parameters, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ADFC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F64 = 0,
    F32 = 1,
    U64 = 2,
    Json = 3,
}

impl Dtype {
    fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Dtype::F64,
            1 => Dtype::F32,
            2 => Dtype::U64,
            3 => Dtype::Json,
            _ => return None,
        })
    }

    fn width(self) -> usize {
        match self {
            Dtype::F64 | Dtype::U64 => 8,
            Dtype::F32 => 4,
            Dtype::Json => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub dtype: Dtype,
    pub shape: (usize, usize),
    pub payload: Vec<u8>,
}

impl Section {
    pub fn f64s(name: impl Into<String>, shape: (usize, usize), values: &[f64]) -> Self {
        Self {
            name: name.into(),
            dtype: Dtype::F64,
            shape,
            payload: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn json(name: impl Into<String>, text: &str) -> Self {
        Self {
            name: name.into(),
            dtype: Dtype::Json,
            shape: (1, text.len()),
            payload: text.as_bytes().to_vec(),
        }
    }

    pub fn to_f64s(&self) -> Option<Vec<f64>> {
        (self.dtype == Dtype::F64).then(|| {
            self.payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        })
    }
}

pub fn encode_sections(sections: &[Section]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for s in sections {
        out.extend_from_slice(&(s.name.len() as u16).to_le_bytes());
        out.extend_from_slice(s.name.as_bytes());
        out.push(s.dtype as u8);
        out.extend_from_slice(&(s.shape.0 as u64).to_le_bytes());
        out.extend_from_slice(&(s.shape.1 as u64).to_le_bytes());
        out.extend_from_slice(&(s.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&s.payload);
    }
    out
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.at..end];
                self.at = end;
                Ok(s)
            }
            None => Err(Error::TruncatedFile {
                path: self.path.to_path_buf(),
                offset: self.bytes.len() as u64,
                expected: self.at as u64 + n as u64,
            }),
        }
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn malformed(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Malformed {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            reason: reason.into(),
        }
    }
}

pub fn decode_sections(path: &Path, bytes: &[u8]) -> Result<Vec<Section>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            offset: 0,
        });
    }
    let mut c = Cursor { path, bytes, at: 4 };
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let count = c.u32()?;
    let mut sections = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let start = c.at;
        let name_len = u16::from_le_bytes(c.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| c.malformed(start + 2, "section name is not UTF-8"))?
            .to_string();
        let tag_at = c.at;
        let dtype = Dtype::from_tag(c.take(1)?[0])
            .ok_or_else(|| c.malformed(tag_at, "unknown dtype tag"))?;
        let rows = c.u64()? as usize;
        let cols = c.u64()? as usize;
        let len_at = c.at;
        let len = c.u64()? as usize;
        if rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(dtype.width()))
            != Some(len)
        {
            return Err(c.malformed(
                len_at,
                format!("section `{name}`: {len} bytes for shape {rows}x{cols}"),
            ));
        }
        let payload = c.take(len)?.to_vec();
        if dtype == Dtype::F64 {
            if let Some(k) = payload
                .chunks_exact(8)
                .position(|b| !f64::from_le_bytes(b.try_into().unwrap()).is_finite())
            {
                return Err(Error::NonFiniteValue {
                    path: path.to_path_buf(),
                    offset: (len_at + 8 + 8 * k) as u64,
                });
            }
        }
        sections.push(Section {
            name,
            dtype,
            shape: (rows, cols),
            payload,
        });
    }
    if c.at != bytes.len() {
        return Err(c.malformed(c.at, "trailing bytes"));
    }
    Ok(sections)
}

/// Non-tensor checkpoint contents, stored as the JSON `meta` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: ModelSpec,
    pub config: Option<TrainConfig>,
    /// Number of completed epochs.
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: FusionModel,
    pub adam: Option<AdamState>,
    pub config: Option<TrainConfig>,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn to_sections(&self) -> Vec<Section> {
        let meta = CheckpointMeta {
            spec: self.model.spec.clone(),
            config: self.config.clone(),
            epoch: self.epoch,
        };
        let mut out = vec![Section::json(
            "meta",
            &serde_json::to_string(&meta).expect("meta serialises"),
        )];
        let blocks = self.model.blocks();
        for b in &blocks {
            out.push(Section::f64s(
                format!("param/{}", b.name),
                b.shape,
                b.values,
            ));
        }
        if let Some(adam) = &self.adam {
            out.push(Section {
                name: "adam/step".into(),
                dtype: Dtype::U64,
                shape: (1, 1),
                payload: adam.step.to_le_bytes().to_vec(),
            });
            for (b, (m, v)) in blocks.iter().zip(adam.first.iter().zip(&adam.second)) {
                out.push(Section::f64s(format!("adam/m/{}", b.name), b.shape, m));
                out.push(Section::f64s(format!("adam/v/{}", b.name), b.shape, v));
            }
        }
        out
    }

    pub fn from_sections(path: &Path, sections: &[Section]) -> Result<Self> {
        let bad = |reason: String| Error::Malformed {
            path: path.to_path_buf(),
            offset: 0,
            reason,
        };
        let find = |name: &str| sections.iter().find(|s| s.name == name);
        let meta = find("meta")
            .filter(|s| s.dtype == Dtype::Json)
            .ok_or_else(|| bad("no meta section".into()))?;
        let meta: CheckpointMeta =
            serde_json::from_slice(&meta.payload).map_err(|source| Error::Json {
                path: path.to_path_buf(),
                source,
            })?;
        let mut model = FusionModel::new(meta.spec, 0)?;
        let tensor = |name: &str, shape: (usize, usize)| -> Result<Vec<f64>> {
            let s = find(name).ok_or_else(|| bad(format!("missing section `{name}`")))?;
            if s.shape != shape {
                return Err(bad(format!(
                    "section `{name}` has shape {:?}, expected {shape:?}",
                    s.shape
                )));
            }
            s.to_f64s()
                .ok_or_else(|| bad(format!("section `{name}` is not f64")))
        };
        let names: Vec<(String, (usize, usize))> = model
            .blocks()
            .iter()
            .map(|b| (b.name.clone(), b.shape))
            .collect();
        for (b, (name, shape)) in model.blocks_mut().into_iter().zip(&names) {
            b.values
                .copy_from_slice(&tensor(&format!("param/{name}"), *shape)?);
        }
        let adam = match find("adam/step") {
            None => None,
            Some(s) => {
                if s.dtype != Dtype::U64 || s.payload.len() != 8 {
                    return Err(bad("adam/step must be one u64".into()));
                }
                let step = u64::from_le_bytes(s.payload[..].try_into().unwrap());
                let mut first = Vec::with_capacity(names.len());
                let mut second = Vec::with_capacity(names.len());
                for (name, shape) in &names {
                    first.push(tensor(&format!("adam/m/{name}"), *shape)?);
                    second.push(tensor(&format!("adam/v/{name}"), *shape)?);
                }
                Some(AdamState {
                    step,
                    first,
                    second,
                })
            }
        };
        Ok(Self {
            model,
            adam,
            config: meta.config,
            epoch: meta.epoch,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_sections(&ckpt.to_sections())).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_sections(path, &decode_sections(path, &bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_and_magic() {
        let p = Path::new("c.adfc");
        let bytes = encode_sections(&[Section::f64s("w", (1, 2), &[1.0, 2.0])]);
        assert_eq!(
            decode_sections(p, &bytes).unwrap()[0].to_f64s().unwrap(),
            vec![1.0, 2.0]
        );
        assert!(matches!(
            decode_sections(p, &bytes[..bytes.len() - 1]),
            Err(Error::TruncatedFile { .. })
        ));
        assert!(matches!(
            decode_sections(p, b"ADFX"),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn shape_must_match_payload() {
        let p = Path::new("c.adfc");
        let mut s = Section::f64s("w", (1, 2), &[1.0, 2.0]);
        s.shape = (2, 2);
        assert!(matches!(
            decode_sections(p, &encode_sections(&[s])),
            Err(Error::Malformed { .. })
        ));
    }
}
