//! Binary dataset container.
//!
//! ```text
//! magic   8 bytes  "SRLVIDEO"
//! version u32
//! count   u64
//! per sample:
//!   t, h, w, num_objects  u32 each
//!   seed                  u64
//!   frames                t*h*w*3 f32, row-major
//!   masks                 t*h*w   u16, row-major
//! ```
//! All integers and floats are little-endian.

use super::VideoSample;
use std::io::{BufWriter, Write};
use std::path::Path;
use thiserror::Error;

pub const DATASET_MAGIC: &[u8; 8] = b"SRLVIDEO";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad magic bytes at offset 0")]
    BadMagic,
    #[error("unsupported dataset version {found} at offset {offset} (expected {DATASET_VERSION})")]
    Version { found: u32, offset: usize },
    #[error("truncated dataset: needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated {
        offset: usize,
        needed: usize,
        len: usize,
    },
    #[error("corrupt sample header at offset {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },
}

pub fn encode_dataset(samples: &[VideoSample]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    for s in samples {
        for v in [s.t, s.h, s.w, s.num_objects] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&s.seed.to_le_bytes());
        for f in &s.frames {
            out.extend_from_slice(&f.to_le_bytes());
        }
        for m in &s.masks {
            out.extend_from_slice(&m.to_le_bytes());
        }
    }
    out
}

pub fn write_dataset(samples: &[VideoSample], path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let io = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_dataset(samples)).map_err(io)?;
    w.flush().map_err(io)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        let end = self.offset.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(DatasetError::Truncated {
                offset: self.offset,
                needed: n,
                len: self.bytes.len(),
            });
        };
        let s = &self.bytes[self.offset..end];
        self.offset = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DatasetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<VideoSample>, DatasetError> {
    let mut c = Cursor { bytes, offset: 0 };
    if c.take(8).map_err(|_| DatasetError::BadMagic)? != DATASET_MAGIC {
        return Err(DatasetError::BadMagic);
    }
    let offset = c.offset;
    let version = c.u32()?;
    if version != DATASET_VERSION {
        return Err(DatasetError::Version {
            found: version,
            offset,
        });
    }
    let count = c.u64()?;
    let mut samples = Vec::new();
    for _ in 0..count {
        let header_at = c.offset;
        let (t, h, w, g) = (
            c.u32()? as usize,
            c.u32()? as usize,
            c.u32()? as usize,
            c.u32()? as usize,
        );
        let seed = c.u64()?;
        if t == 0 || h == 0 || w == 0 {
            return Err(DatasetError::Corrupt {
                offset: header_at,
                reason: format!("zero dimension in t={t} h={h} w={w}"),
            });
        }
        let plane = t
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| DatasetError::Corrupt {
                offset: header_at,
                reason: "dimension overflow".into(),
            })?;
        let frames = c
            .take(plane * 3 * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let masks = c
            .take(plane * 2)?
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes(b.try_into().unwrap()))
            .collect();
        samples.push(VideoSample {
            t,
            h,
            w,
            num_objects: g,
            seed,
            frames,
            masks,
        });
    }
    Ok(samples)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<VideoSample>, DatasetError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_dataset(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_dataset, GeneratorConfig};

    #[test]
    fn round_trip_is_exact() {
        let samples = generate_dataset(&GeneratorConfig::default(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        write_dataset(&samples, &path).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), samples);
    }

    #[test]
    fn empty_dataset_is_valid() {
        let bytes = encode_dataset(&[]);
        assert_eq!(bytes.len(), 8 + 4 + 8);
        assert!(decode_dataset(&bytes).unwrap().is_empty());
    }

    #[test]
    fn rejects_version_mismatch() {
        let mut bytes = encode_dataset(&[]);
        bytes[8] = 9;
        assert!(matches!(
            decode_dataset(&bytes),
            Err(DatasetError::Version { found: 9, offset: 8 })
        ));
    }

    #[test]
    fn truncation_names_offset() {
        let samples = generate_dataset(&GeneratorConfig::default(), 1).unwrap();
        let bytes = encode_dataset(&samples);
        let cut = &bytes[..bytes.len() - 1];
        match decode_dataset(cut) {
            Err(e @ DatasetError::Truncated { offset, .. }) => {
                assert!(offset > 20);
                assert!(e.to_string().contains(&offset.to_string()));
            }
            other => panic!("expected truncation, got {other:?}"),
        }
        assert!(matches!(decode_dataset(b"NOTAFILE"), Err(DatasetError::BadMagic)));
    }
}
